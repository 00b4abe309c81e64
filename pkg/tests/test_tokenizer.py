import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unitrans.tokenizer import (DETERMINISTIC, EOW, RESERVED, DropoutPolicy, EmptyCorpusError, MergeTable,
                                SubwordTokenizer, TokenizerError, Vocabulary, VocabularyError, build_tokenizer,
                                decode, learn_bpe, preprocess, segment_word)

CORPUS = [
    "the cat sat on the mat", "the dog sat on the log", "a cat and a dog",
    "the mat is flat", "cats and dogs sat", "on and on and on",
]

words = st.text(alphabet="abcdeg", min_size=1, max_size=7)
lines = st.lists(words, min_size=1, max_size=6).map(" ".join)


@pytest.fixture(scope="module")
def tok():
    return build_tokenizer(CORPUS, 40)


def test_single_pair_corpus_learns_ab():
    assert learn_bpe(["ab ab ab"], 1).merges == (("a", "b"),)


def test_more_frequent_pair_wins():
    assert learn_bpe(["aa aa", "ab"], 1).merges == (("a", "a"),)


def test_tie_goes_to_smallest_pair():
    # "ab" and "cd" both occur twice; (a, b) sorts first
    assert learn_bpe(["ab cd ab cd"], 1).merges[0] == ("a", "b")


def test_zero_operations_gives_characters():
    table = learn_bpe(CORPUS, 0)
    assert table.merges == ()
    assert segment_word("cat", table.ranks) == ["c", "a", "t", EOW]


def test_empty_corpus_rejected():
    with pytest.raises(EmptyCorpusError):
        learn_bpe(["", "   "], 10)


def test_merge_table_rejects_duplicates():
    with pytest.raises(TokenizerError):
        MergeTable((("a", "b"), ("a", "b")))


def test_merge_table_file_round_trip(tmp_path):
    table = learn_bpe(CORPUS, 30)
    table.save(tmp_path / "m.bpe")
    assert MergeTable.load(tmp_path / "m.bpe") == table
    assert (tmp_path / "m.bpe").read_text(encoding="utf-8").startswith(f"#bpe v1 {table.num_operations}\n")


def test_vocabulary_layout(tok, tmp_path):
    v = tok.vocab
    assert tuple(v.tokens[:len(RESERVED)]) == RESERVED
    assert (v.pad, v.bos, v.eos, v.unk, v.blank, v.tag_gloss, v.tag_text) == tuple(range(7))
    assert sorted(v.id_of.values()) == list(range(len(v)))
    v.save(tmp_path / "vocab.txt")
    assert Vocabulary.load(tmp_path / "vocab.txt").tokens == v.tokens


def test_vocabulary_requires_reserved_block():
    with pytest.raises(VocabularyError):
        Vocabulary(["a", "b"])


def test_full_dropout_yields_characters(tok):
    policy = DropoutPolicy(1.0, 1.0)
    pieces, routed = tok.segment("the cat", policy, np.random.default_rng(0))
    assert routed
    assert pieces == ["t", "h", "e", EOW, "c", "a", "t", EOW]


def test_zero_dropout_equals_deterministic(tok):
    rng = np.random.default_rng(0)
    for line in CORPUS:
        assert tok.encode(line, DropoutPolicy(0.0, 1.0), rng) == tok.encode(line)


def test_gate_frequency_over_ten_thousand_lines(tok):
    rng = np.random.default_rng(1)
    policy = DropoutPolicy(0.2, 0.6)
    routed = differs = 0
    for i in range(10_000):
        line = CORPUS[i % len(CORPUS)]
        pieces, r = tok.segment(line, policy, rng)
        routed += r
        differs += pieces != tok.segment(line)[0]
    assert 0.58 <= routed / 10_000 <= 0.62
    assert differs / 10_000 <= 0.6


def test_decode_empty_and_out_of_range(tok):
    assert decode([], tok.vocab) == ""
    with pytest.raises(VocabularyError):
        decode([len(tok.vocab)], tok.vocab)


def test_decode_strips_control_symbols(tok):
    ids = [tok.vocab.bos, tok.vocab.tag_text] + tok.encode("the cat") + [tok.vocab.eos, tok.vocab.pad]
    assert tok.decode(ids) == "the cat"


def test_unknown_characters_map_to_unk(tok):
    ids = tok.encode("xyz")
    assert tok.vocab.unk in ids


@pytest.mark.parametrize("line,expected", [
    ("hello, world!", "hello world"),
    ("abc", "abc"),
    ("a -- b.", "a b"),
])
def test_strip_punct(line, expected):
    assert preprocess(line, "strip_punct") == expected


def test_keep_is_identity():
    assert preprocess("a, b!", "keep") == "a, b!"


# -- properties ------------------------------------------------------------------------------

@settings(max_examples=200, deadline=None)
@given(corpus=st.lists(lines, min_size=1, max_size=8), probe=lines, ops=st.integers(0, 40))
def test_round_trip_and_idempotence(corpus, probe, ops):
    tok = build_tokenizer(corpus + [probe], ops)
    ids = tok.encode(probe)
    assert tok.decode(ids) == " ".join(probe.split())
    assert tok.encode(tok.decode(ids)) == ids
    assert all(0 <= i < len(tok.vocab) for i in ids)
    assert tok.vocab.unk not in ids


@settings(max_examples=200, deadline=None)
@given(corpus=st.lists(lines, min_size=1, max_size=8), probe=lines, seed=st.integers(0, 2**16),
       p=st.floats(0.0, 1.0))
def test_dropout_never_shortens_and_decodes_identically(corpus, probe, seed, p):
    tok = build_tokenizer(corpus + [probe], 30)
    rng = np.random.default_rng(seed)
    policy = DropoutPolicy(p, 1.0)
    for word in probe.split():
        det = segment_word(word, tok.table.ranks)
        dropped = segment_word(word, tok.table.ranks, p, rng)
        assert len(dropped) >= len(det)
        assert "".join(dropped) == "".join(det)
    assert tok.decode(tok.encode(probe, policy, rng)) == tok.decode(tok.encode(probe))


@settings(max_examples=50, deadline=None)
@given(probe=lines, seed=st.integers(0, 2**16))
def test_seeded_dropout_is_reproducible(probe, seed):
    tok = build_tokenizer(CORPUS + [probe], 30)
    policy = DropoutPolicy(0.3, 0.6)
    a = tok.encode(probe, policy, np.random.default_rng(seed))
    b = tok.encode(probe, policy, np.random.default_rng(seed))
    assert a == b


def test_reserved_ids_never_emitted_by_encoding(tok):
    rng = np.random.default_rng(0)
    policy = DropoutPolicy(0.5, 1.0)
    for line in CORPUS:
        for ids in (tok.encode(line), tok.encode(line, policy, rng)):
            assert not set(ids) & (tok.vocab.reserved_ids - {tok.vocab.unk})


def test_merges_round_trip_through_saved_files(tmp_path):
    tok = build_tokenizer(CORPUS, 25)
    tok.table.save(tmp_path / "m")
    tok.vocab.save(tmp_path / "v")
    again = SubwordTokenizer(MergeTable.load(tmp_path / "m"), Vocabulary.load(tmp_path / "v"))
    for line in CORPUS:
        assert again.encode(line) == tok.encode(line)
