"""Unified multi-task encoder-decoder.

Source sequences enter through one of two modality-specific encoder stacks
(visual frames or textual tokens), are prefixed with a task-tag embedding,
pass through a shared encoder stack and feed one autoregressive decoder. The
token embedding matrix ``E`` is shared by the textual encoder input, the
decoder input and the decoder output projection; the CTC head projects the
shared-encoder states with ``E^T`` plus its own bias.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .tensor import Tensor, ShapeError

VISUAL, TEXTUAL = "visual", "textual"
_MASK_VALUE = -1e9


class TaskContractError(ValueError):
    """A model entry point was called with a batch of the wrong modality."""


@dataclass
class ModelConfig:
    d_model: int = 256
    heads: int = 4
    d_ff: int = 4096
    enc_modality_layers: int = 1
    enc_shared_layers: int = 5
    dec_layers: int = 6
    vocab_size: int = 1000
    feature_dim: int = 32
    dropout_residual: float = 0.4
    dropout_attn: float = 0.3
    dropout_ffn: float = 0.5
    ctc_alpha: float = 0.3
    label_smoothing: float = 0.1
    ctc_bias: bool = True
    tag_position: bool = True
    max_positions: int = 1100
    pad_id: int = 0
    bos_id: int = 1
    eos_id: int = 2
    blank_id: int = 4

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        for name in ("enc_modality_layers", "enc_shared_layers", "dec_layers"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.ctc_alpha < 0:
            raise ValueError("ctc_alpha must be >= 0")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _attn_shapes(prefix, d):
    out = {}
    for m in ("q", "k", "v", "o"):
        out[f"{prefix}.{m}.w"] = (d, d)
        out[f"{prefix}.{m}.b"] = (d,)
    return out


def _ffn_shapes(prefix, d, d_ff):
    return {f"{prefix}.w1": (d, d_ff), f"{prefix}.b1": (d_ff,),
            f"{prefix}.w2": (d_ff, d), f"{prefix}.b2": (d,)}


def _ln_shapes(prefix, d):
    return {f"{prefix}.g": (d,), f"{prefix}.b": (d,)}


def _encoder_layer_shapes(prefix, cfg):
    d = cfg.d_model
    return {**_ln_shapes(f"{prefix}.ln1", d), **_attn_shapes(f"{prefix}.attn", d),
            **_ln_shapes(f"{prefix}.ln2", d), **_ffn_shapes(f"{prefix}.ffn", d, cfg.d_ff)}


def param_shapes(cfg):
    """Ordered ``name -> shape`` map of every trainable array."""
    d = cfg.d_model
    shapes = {"embed.tokens": (cfg.vocab_size, d),
              "visual.proj.w": (cfg.feature_dim, d), "visual.proj.b": (d,)}
    for stack in (VISUAL, TEXTUAL):
        for i in range(cfg.enc_modality_layers):
            shapes.update(_encoder_layer_shapes(f"enc.{stack}.{i}", cfg))
    for i in range(cfg.enc_shared_layers):
        shapes.update(_encoder_layer_shapes(f"enc.shared.{i}", cfg))
    shapes.update(_ln_shapes("enc.ln", d))
    for i in range(cfg.dec_layers):
        p = f"dec.{i}"
        shapes.update({**_ln_shapes(f"{p}.ln1", d), **_attn_shapes(f"{p}.self", d),
                       **_ln_shapes(f"{p}.ln2", d), **_attn_shapes(f"{p}.cross", d),
                       **_ln_shapes(f"{p}.ln3", d), **_ffn_shapes(f"{p}.ffn", d, cfg.d_ff)})
    shapes.update(_ln_shapes("dec.ln", d))
    if cfg.ctc_bias:
        shapes["ctc.b"] = (cfg.vocab_size,)
    return shapes


# CTC head only matters while training; inference checkpoints may omit it.
TRAINING_ONLY_PARAMS = frozenset({"ctc.b"})


def sinusoid_table(n, d):
    pos = np.arange(n)[:, None]
    div = np.exp(np.arange(0, d, 2) * (-math.log(10000.0) / d))
    table = np.zeros((n, d))
    table[:, 0::2] = np.sin(pos * div)
    table[:, 1::2] = np.cos(pos * div)[:, : d // 2]
    return table


@dataclass
class EncodedSource:
    states: Tensor     # (B, 1 + T, d); slot 0 is the task tag
    mask: np.ndarray   # (B, 1 + T) bool
    modality: str


def _split_heads(x, h):
    b, t, d = x.shape
    return x.reshape(b, t, h, d // h).permute(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.permute(0, 2, 1, 3).reshape(b, t, h * dh)


class SLTModel:
    """Parameters plus forward passes; ``params`` maps names to leaf tensors."""

    def __init__(self, config, params, rng=None):
        self.config = config
        self.params = params
        missing = set(param_shapes(config)) - set(params)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.record_attention = False
        self.attention_maps = []
        self._pos = sinusoid_table(config.max_positions, config.d_model)
        self._pos_cache = {}

    # -- tied embedding views --------------------------------------------------
    @property
    def source_embedding(self):
        return self.params["embed.tokens"]

    @property
    def target_embedding(self):
        return self.params["embed.tokens"]

    @property
    def output_projection(self):
        return self.params["embed.tokens"]

    def num_parameters(self):
        return sum(p.size for p in self.params.values())

    def _positions(self, start, n):
        key = (start, n, T.default_dtype())
        pos = self._pos_cache.get(key)
        if pos is None:
            if start + n > self.config.max_positions:
                raise ShapeError(f"sequence of length {start + n} exceeds max_positions")
            pos = self._pos_cache[key] = self._pos[start:start + n].astype(T.default_dtype())
        return pos

    # -- building blocks ------------------------------------------------------------
    def _ln(self, x, prefix):
        return T.layer_norm(x, self.params[prefix + ".g"], self.params[prefix + ".b"])

    def _lin(self, x, prefix):
        return T.linear(x, self.params[prefix + ".w"], self.params[prefix + ".b"])

    def _drop(self, x, p, train):
        return T.dropout(x, p, self.rng, train)

    def _attention(self, q_in, kv_in, prefix, key_mask, train, causal=False):
        h = self.config.heads
        q = _split_heads(self._lin(q_in, prefix + ".q"), h)
        k = _split_heads(self._lin(kv_in, prefix + ".k"), h)
        v = _split_heads(self._lin(kv_in, prefix + ".v"), h)
        return self._attend(q, k, v, prefix, key_mask, train, causal)

    def _attend(self, q, k, v, prefix, key_mask, train, causal=False):
        dh = q.shape[-1]
        scores = T.matmul(q, k.swap_last()) * (1.0 / math.sqrt(dh))
        blocked = None
        if key_mask is not None:
            blocked = ~key_mask[:, None, None, :]
        if causal:
            tq, tk = scores.shape[-2:]
            future = np.triu(np.ones((tq, tk), dtype=bool), k=1 + tk - tq)[None, None]
            blocked = future if blocked is None else (blocked | future)
        if blocked is not None:
            scores = T.masked_fill(scores, blocked, _MASK_VALUE)
        weights = T.softmax(scores)
        if self.record_attention:
            self.attention_maps.append((prefix, weights.data.copy()))
        weights = self._drop(weights, self.config.dropout_attn, train)
        return self._lin(_merge_heads(T.matmul(weights, v)), prefix + ".o")

    def _ffn(self, x, prefix, train):
        hidden = T.relu(T.linear(x, self.params[prefix + ".w1"], self.params[prefix + ".b1"]))
        hidden = self._drop(hidden, self.config.dropout_ffn, train)
        return T.linear(hidden, self.params[prefix + ".w2"], self.params[prefix + ".b2"])

    def _encoder_layer(self, x, mask, prefix, train):
        p = self.config.dropout_residual
        h = self._ln(x, prefix + ".ln1")
        x = x + self._drop(self._attention(h, h, prefix + ".attn", mask, train), p, train)
        x = x + self._drop(self._ffn(self._ln(x, prefix + ".ln2"), prefix + ".ffn", train), p, train)
        return x

    # -- public passes --------------------------------------------------------------
    def embed_source(self, batch, train=False):
        """Modality input sequence with the tag embedding at slot 0, and its validity mask."""
        cfg = self.config
        scale = math.sqrt(cfg.d_model)
        E = self.params["embed.tokens"]
        lengths = np.asarray(batch.src_lengths)
        if batch.modality == VISUAL:
            feats = T.as_tensor(batch.src_feats)
            if feats.shape[-1] != cfg.feature_dim:
                raise ShapeError(f"embed_source: feature dim {feats.shape[-1]} != configured {cfg.feature_dim}")
            x = T.linear(feats, self.params["visual.proj.w"], self.params["visual.proj.b"])
        else:
            ids = np.asarray(batch.src_ids)
            x = T.embedding(E, ids) * scale
        bsz, tlen = x.shape[0], x.shape[1]
        x = x + self._positions(1, tlen)
        tag = T.embedding(E, np.full((bsz, 1), batch.tag, dtype=np.int64)) * scale
        if cfg.tag_position:
            tag = tag + self._positions(0, 1)
        x = T.concat([tag, x], axis=1)
        mask = np.ones((bsz, 1 + tlen), dtype=bool)
        mask[:, 1:] = np.arange(tlen)[None, :] < lengths[:, None]
        return x, mask

    def encode(self, x, mask, modality, train=False):
        cfg = self.config
        x = self._drop(x, cfg.dropout_residual, train)
        for i in range(cfg.enc_modality_layers):
            x = self._encoder_layer(x, mask, f"enc.{modality}.{i}", train)
        for i in range(cfg.enc_shared_layers):
            x = self._encoder_layer(x, mask, f"enc.shared.{i}", train)
        return EncodedSource(self._ln(x, "enc.ln"), mask, modality)

    def encode_batch(self, batch, train=False):
        x, mask = self.embed_source(batch, train)
        return self.encode(x, mask, batch.modality, train)

    def _embed_target(self, ids, start=0):
        x = T.embedding(self.params["embed.tokens"], ids) * math.sqrt(self.config.d_model)
        return x + self._positions(start, ids.shape[1])

    def logits(self, states):
        return T.matmul(states, self.output_projection.swap_last())

    def decode(self, tgt_in, enc, train=False):
        """Teacher-forced decoder pass: logits of shape (B, T_tgt, vocab)."""
        cfg = self.config
        p = cfg.dropout_residual
        x = self._drop(self._embed_target(np.asarray(tgt_in)), p, train)
        for i in range(cfg.dec_layers):
            pre = f"dec.{i}"
            h = self._ln(x, pre + ".ln1")
            x = x + self._drop(self._attention(h, h, pre + ".self", None, train, causal=True), p, train)
            h = self._ln(x, pre + ".ln2")
            x = x + self._drop(self._attention(h, enc.states, pre + ".cross", enc.mask, train), p, train)
            x = x + self._drop(self._ffn(self._ln(x, pre + ".ln3"), pre + ".ffn", train), p, train)
        return self.logits(self._ln(x, "dec.ln"))

    def ctc_logits(self, enc):
        """Per-frame logits over the shared vocabulary; the tag slot is dropped."""
        if enc.modality != VISUAL:
            raise TaskContractError("ctc_logits needs a visual-mode encoding")
        out = self.logits(enc.states[:, 1:, :])
        if self.config.ctc_bias:
            out = out + self.params["ctc.b"]
        return out

    # -- incremental decoding (inference only) ----------------------------------------
    def start_decoding(self, enc):
        """Precompute cross-attention keys/values; returns a mutable decoder cache."""
        h = self.config.heads
        cache = {"mask": enc.mask, "step": 0, "layers": []}
        for i in range(self.config.dec_layers):
            pre = f"dec.{i}.cross"
            k = _split_heads(self._lin(enc.states, pre + ".k"), h).data
            v = _split_heads(self._lin(enc.states, pre + ".v"), h).data
            cache["layers"].append({"cross_k": k, "cross_v": v, "self_k": None, "self_v": None})
        return cache

    def reorder_cache(self, cache, index):
        cache["mask"] = cache["mask"][index]
        for layer in cache["layers"]:
            for key, arr in layer.items():
                if arr is not None:
                    layer[key] = arr[index]

    def decode_next(self, tokens, cache):
        """Log-probabilities (N, vocab) for the next position given the last tokens (N,)."""
        cfg = self.config
        h = cfg.heads
        t = cache["step"]
        x = self._embed_target(np.asarray(tokens)[:, None], start=t)
        for i, layer in enumerate(cache["layers"]):
            pre = f"dec.{i}"
            hdn = self._ln(x, pre + ".ln1")
            q = _split_heads(self._lin(hdn, pre + ".self.q"), h)
            k = _split_heads(self._lin(hdn, pre + ".self.k"), h).data
            v = _split_heads(self._lin(hdn, pre + ".self.v"), h).data
            if layer["self_k"] is not None:
                k = np.concatenate([layer["self_k"], k], axis=2)
                v = np.concatenate([layer["self_v"], v], axis=2)
            layer["self_k"], layer["self_v"] = k, v
            x = x + self._attend(q, Tensor(k), Tensor(v), pre + ".self", None, False)
            hdn = self._ln(x, pre + ".ln2")
            q = _split_heads(self._lin(hdn, pre + ".cross.q"), h)
            x = x + self._attend(q, Tensor(layer["cross_k"]), Tensor(layer["cross_v"]),
                                 pre + ".cross", cache["mask"], False)
            x = x + self._ffn(self._ln(x, pre + ".ln3"), pre + ".ffn", False)
        cache["step"] = t + 1
        return T.log_softmax(self.logits(self._ln(x, "dec.ln")))[:, 0, :]
