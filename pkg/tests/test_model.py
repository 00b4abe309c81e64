import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unitrans import tensor as T
from unitrans.data import collate
from unitrans.losses import GLOSS2TEXT, SIGN2TEXT
from unitrans.model import ModelConfig, SLTModel, TaskContractError, param_shapes, sinusoid_table
from unitrans.tensor import ShapeError
from unitrans.tokenizer import RESERVED, Vocabulary
from unitrans.training import build_model, init_params, to_tensors

VOCAB = Vocabulary(list(RESERVED) + [chr(ord("a") + i) for i in range(57)])   # 64 entries


def small_config(**kw):
    base = dict(d_model=16, heads=2, d_ff=32, enc_modality_layers=1, enc_shared_layers=1, dec_layers=2,
                vocab_size=len(VOCAB), feature_dim=6, dropout_residual=0.2, dropout_attn=0.2, dropout_ffn=0.2)
    base.update(kw)
    return ModelConfig(**base)


def closed_form_count(c):
    d, f, v = c.d_model, c.d_ff, c.vocab_size
    ln = 2 * d
    attn = 4 * (d * d + d)
    ffn = d * f + f + f * d + d
    enc_layer = 2 * ln + attn + ffn
    dec_layer = 3 * ln + 2 * attn + ffn
    return (v * d + c.feature_dim * d + d
            + (2 * c.enc_modality_layers + c.enc_shared_layers) * enc_layer + ln
            + c.dec_layers * dec_layer + ln + (v if c.ctc_bias else 0))


def visual_batch(rng, lengths, cfg, tgt=((9, 10, 11),)):
    feats = [rng.standard_normal((n, cfg.feature_dim)).astype(np.float32) for n in lengths]
    tgts = [list(tgt[i % len(tgt)]) for i in range(len(lengths))]
    return collate(SIGN2TEXT, VOCAB, feats, tgts, [np.array([9])] * len(lengths), cfg.feature_dim)


def text_batch(srcs, tgts):
    return collate(GLOSS2TEXT, VOCAB, [list(s) for s in srcs], [list(t) for t in tgts])


@pytest.fixture(scope="module")
def model():
    return build_model(small_config(), seed=0)


@pytest.mark.parametrize("cfg", [
    small_config(),
    small_config(ctc_bias=False, enc_modality_layers=0),
    ModelConfig(d_model=256, heads=4, d_ff=4096, enc_modality_layers=1, enc_shared_layers=5, dec_layers=6,
                vocab_size=8000, feature_dim=1024),
])
def test_parameter_count_matches_closed_form(cfg):
    shapes = param_shapes(cfg)
    assert sum(math.prod(s) for s in shapes.values()) == closed_form_count(cfg)


def test_paper_size_parameter_count_is_reported():
    cfg = ModelConfig(vocab_size=8000, feature_dim=1024)
    n = closed_form_count(cfg)
    assert SLTModel(cfg, to_tensors(init_params(cfg, 0))).num_parameters() == n
    assert 30e6 < n < 40e6


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, heads=3)
    with pytest.raises(ValueError):
        ModelConfig(label_smoothing=1.0)
    with pytest.raises(ValueError):
        ModelConfig(ctc_alpha=-0.1)


def test_embed_source_shapes_and_formula():
    cfg = small_config(d_model=4, heads=1)
    m = build_model(cfg, 1)
    x, mask = m.embed_source(text_batch([[7, 8, 9, 10, 11]], [[9]]))
    assert x.shape == (1, 6, 4) and mask.all()
    x, _ = m.embed_source(text_batch([[7]], [[9]]))
    pos = sinusoid_table(4, 4)
    E = m.params["embed.tokens"].data
    np.testing.assert_allclose(x.data[0, 1], math.sqrt(4) * E[7] + pos[1], rtol=1e-6)
    np.testing.assert_allclose(x.data[0, 0], math.sqrt(4) * E[VOCAB.tag_text] + pos[0], rtol=1e-6)


def test_zero_frames_with_zero_bias_give_positions():
    cfg = small_config()
    m = build_model(cfg, 1)
    m.params["visual.proj.b"].data[:] = 0
    batch = collate(SIGN2TEXT, VOCAB, [np.zeros((3, cfg.feature_dim), np.float32)], [[9]], None, cfg.feature_dim)
    x, _ = m.embed_source(batch)
    np.testing.assert_allclose(x.data[0, 1:], sinusoid_table(4, cfg.d_model)[1:4], atol=1e-6)


def test_feature_dim_mismatch():
    m = build_model(small_config(), 0)
    batch = collate(SIGN2TEXT, VOCAB, [np.zeros((3, 5), np.float32)], [[9]], None, 5)
    with pytest.raises(ShapeError):
        m.embed_source(batch)


def test_empty_stacks_reduce_to_final_layer_norm():
    cfg = small_config(enc_modality_layers=0, enc_shared_layers=0)
    m = build_model(cfg, 0)
    batch = text_batch([[7, 8, 9]], [[9]])
    x, mask = m.embed_source(batch)
    enc = m.encode(x, mask, batch.modality)
    expected = T.layer_norm(x, m.params["enc.ln.g"], m.params["enc.ln.b"]).data
    np.testing.assert_allclose(enc.states.data, expected, rtol=1e-6)


def test_padding_gets_no_attention(model):
    batch = visual_batch(np.random.default_rng(0), [5, 2], model.config)
    model.record_attention, model.attention_maps = True, []
    try:
        model.encode_batch(batch)
    finally:
        model.record_attention = False
    for name, w in model.attention_maps:
        assert np.all(w[1, :, :, 3:] == 0.0), name


def test_padding_invariance(model):
    rng = np.random.default_rng(1)
    frames = rng.standard_normal((3, model.config.feature_dim)).astype(np.float32)
    other = rng.standard_normal((6, model.config.feature_dim)).astype(np.float32)
    alone = collate(SIGN2TEXT, VOCAB, [frames], [[9, 10]], None, model.config.feature_dim)
    padded = collate(SIGN2TEXT, VOCAB, [frames, other], [[9, 10], [9, 10, 11, 12]], None, model.config.feature_dim)
    with T.precision(np.float64):
        m64 = SLTModel(model.config, to_tensors({k: v.data for k, v in model.params.items()}))
        a = m64.decode(alone.tgt_in, m64.encode_batch(alone)).data[0]
        b = m64.decode(padded.tgt_in, m64.encode_batch(padded)).data[0, :3]
        ea = m64.encode_batch(alone).states.data[0]
        eb = m64.encode_batch(padded).states.data[0, :4]
    np.testing.assert_allclose(ea, eb, atol=1e-10)
    np.testing.assert_allclose(a, b, atol=1e-10)


@settings(max_examples=20, deadline=None)
@given(t=st.integers(0, 5), seed=st.integers(0, 1000))
def test_decoder_is_causal(model, t, seed):
    rng = np.random.default_rng(seed)
    batch = visual_batch(rng, [4], model.config, tgt=([9, 10, 11, 12, 13, 14],))
    enc = model.encode_batch(batch)
    base = model.decode(batch.tgt_in, enc).data
    perturbed = batch.tgt_in.copy()
    perturbed[0, t + 1:] = rng.integers(7, len(VOCAB), size=perturbed.shape[1] - t - 1)
    out = model.decode(perturbed, enc).data
    np.testing.assert_array_equal(base[0, :t + 1], out[0, :t + 1])


def test_decoder_logit_shape(model):
    rng = np.random.default_rng(0)
    batch = visual_batch(rng, [3, 5], model.config, tgt=([9] * 6,))
    assert model.decode(batch.tgt_in, model.encode_batch(batch)).shape == (2, 7, 64)


def test_incremental_decoding_matches_full_pass(model):
    rng = np.random.default_rng(2)
    batch = visual_batch(rng, [5, 3], model.config, tgt=([9, 10, 11, 12], [13, 14, 15, 16]))
    enc = model.encode_batch(batch)
    full = T.log_softmax(model.decode(batch.tgt_in, enc)).data
    cache = model.start_decoding(enc)
    for t in range(batch.tgt_in.shape[1]):
        step = model.decode_next(batch.tgt_in[:, t], cache).data
        np.testing.assert_allclose(step, full[:, t], atol=1e-5)


def test_ctc_logits(model):
    rng = np.random.default_rng(3)
    for n in (1, 7, 64):
        batch = visual_batch(rng, [n], model.config)
        out = model.ctc_logits(model.encode_batch(batch))
        assert out.shape == (1, n, len(VOCAB))
        assert np.isfinite(out.data).all()
    with pytest.raises(TaskContractError):
        model.ctc_logits(model.encode_batch(text_batch([[7, 8]], [[9]])))


def test_embedding_views_are_one_storage():
    m = build_model(small_config(), 0)
    assert m.source_embedding is m.target_embedding is m.output_projection
    batch = visual_batch(np.random.default_rng(0), [4], m.config)
    enc = m.encode_batch(batch)
    before = m.ctc_logits(enc).data[0, :, 20].copy()
    # a constant shift would vanish against the zero-mean layer-normed states
    m.output_projection.data[20] += np.random.default_rng(1).standard_normal(16).astype(np.float32)
    after = m.ctc_logits(enc).data[0, :, 20]
    assert not np.allclose(before, after)
    x, _ = m.embed_source(text_batch([[20]], [[9]]))
    np.testing.assert_allclose(x.data[0, 1], math.sqrt(16) * m.source_embedding.data[20] + sinusoid_table(2, 16)[1],
                               rtol=1e-6)


def test_eval_is_deterministic_and_train_is_not(model):
    batch = visual_batch(np.random.default_rng(4), [5], model.config)
    a = model.decode(batch.tgt_in, model.encode_batch(batch)).data
    b = model.decode(batch.tgt_in, model.encode_batch(batch)).data
    assert a.tobytes() == b.tobytes()
    c = model.decode(batch.tgt_in, model.encode_batch(batch, train=True), train=True).data
    assert not np.allclose(a, c)
