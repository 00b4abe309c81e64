"""Joint gloss/text subword tokenizer: BPE learning, (stochastic) BPE dropout, vocabulary."""

from __future__ import annotations

import collections
import unicodedata
from dataclasses import dataclass


# Word-final sentinel. It is its own symbol during learning so that it sorts
# after every Latin character when frequency ties are broken.
EOW = "▁"

PAD, BOS, EOS, UNK, BLANK, TAG_GLOSS, TAG_TEXT = "<pad>", "<bos>", "<eos>", "<unk>", "<blank>", "[2gls]", "[2txt]"
RESERVED = (PAD, BOS, EOS, UNK, BLANK, TAG_GLOSS, TAG_TEXT)


class TokenizerError(ValueError):
    pass


class EmptyCorpusError(TokenizerError):
    pass


class VocabularyError(TokenizerError):
    pass


@dataclass(frozen=True)
class MergeTable:
    merges: tuple  # ((left, right), ...) in priority order

    def __post_init__(self):
        if len(set(self.merges)) != len(self.merges):
            raise TokenizerError("merge table contains duplicate pairs")

    @property
    def num_operations(self):
        return len(self.merges)

    @property
    def ranks(self):
        return {pair: i for i, pair in enumerate(self.merges)}

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(f"#bpe v1 {len(self.merges)}\n")
            for left, right in self.merges:
                f.write(f"{left} {right}\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            header = f.readline().rstrip("\n").split()
            if len(header) != 3 or header[:2] != ["#bpe", "v1"]:
                raise TokenizerError(f"{path}: not a '#bpe v1' merge table")
            merges = []
            for lineno, line in enumerate(f, start=2):
                parts = line.rstrip("\n").split(" ")
                if len(parts) != 2:
                    raise TokenizerError(f"{path}:{lineno}: expected '<left> <right>'")
                merges.append((parts[0], parts[1]))
        if len(merges) != int(header[2]):
            raise TokenizerError(f"{path}: header announces {header[2]} merges, found {len(merges)}")
        return cls(tuple(merges))


@dataclass(frozen=True)
class DropoutPolicy:
    merge_drop_rate: float = 0.0
    stochastic_rate: float = 1.0

    def __post_init__(self):
        for name in ("merge_drop_rate", "stochastic_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


DETERMINISTIC = DropoutPolicy(0.0, 0.0)


def _word_symbols(word):
    return list(word) + [EOW]


def learn_bpe(corpus_lines, num_operations, min_frequency=2):
    """Learn a merge table by repeatedly merging the most frequent adjacent pair.

    Ties in frequency are broken by the lexicographically smallest pair.
    """
    if num_operations < 0:
        raise ValueError("num_operations must be >= 0")
    counts = collections.Counter()
    for line in corpus_lines:
        counts.update(line.split())
    if not counts:
        raise EmptyCorpusError("cannot learn BPE from an empty corpus")

    words = [(_word_symbols(w), c) for w, c in counts.items()]
    pair_counts = collections.Counter()
    where = collections.defaultdict(set)
    for wi, (syms, c) in enumerate(words):
        for pair in zip(syms, syms[1:]):
            pair_counts[pair] += c
            where[pair].add(wi)

    merges = []
    while len(merges) < num_operations and pair_counts:
        best = min(pair_counts.items(), key=lambda kv: (-kv[1], kv[0]))
        pair, freq = best
        if freq < min_frequency:
            break
        merges.append(pair)
        merged = pair[0] + pair[1]
        for wi in sorted(where.pop(pair, ())):
            syms, c = words[wi]
            for p in zip(syms, syms[1:]):
                pair_counts[p] -= c
                if pair_counts[p] <= 0:
                    del pair_counts[p]
            new, i = [], 0
            while i < len(syms):
                if i + 1 < len(syms) and (syms[i], syms[i + 1]) == pair:
                    new.append(merged)
                    i += 2
                else:
                    new.append(syms[i])
                    i += 1
            words[wi] = (new, c)
            for p in zip(new, new[1:]):
                pair_counts[p] += c
                where[p].add(wi)
        pair_counts.pop(pair, None)
    return MergeTable(tuple(merges))


def segment_word(word, ranks, drop_rate=0.0, rng=None):
    """Split one word into subwords, applying the lowest-rank merge first.

    With ``drop_rate > 0`` each candidate merge is skipped independently at
    every step; segmentation ends when no candidate survives.
    """
    syms = _word_symbols(word)
    while len(syms) > 1:
        cands = [(ranks[p], i) for i, p in enumerate(zip(syms, syms[1:])) if p in ranks]
        if drop_rate > 0.0 and cands:
            keep = rng.random(len(cands)) >= drop_rate
            cands = [c for c, k in zip(cands, keep) if k]
        if not cands:
            break
        _, i = min(cands)
        syms[i:i + 2] = [syms[i] + syms[i + 1]]
    return syms


class Vocabulary:
    """Bijection between token strings and ids; reserved symbols take ids 0..6."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:len(RESERVED)]) != RESERVED:
            raise VocabularyError("vocabulary must start with the reserved block " + " ".join(RESERVED))
        if len(set(tokens)) != len(tokens):
            raise VocabularyError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self.id_of = {t: i for i, t in enumerate(tokens)}
        self.pad, self.bos, self.eos, self.unk, self.blank, self.tag_gloss, self.tag_text = range(len(RESERVED))

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.id_of

    @property
    def reserved_ids(self):
        return frozenset(range(len(RESERVED)))

    @classmethod
    def from_merges(cls, table, corpus_lines=()):
        """Reserved block, then the learn-time characters, then every merge result."""
        chars = sorted({ch for line in corpus_lines for ch in line if not ch.isspace()})
        for left, right in table.merges:
            for part in (left, right):
                if len(part) == 1 and part != EOW and part not in chars:
                    chars.append(part)
        tokens = list(RESERVED) + chars + [EOW]
        seen = set(tokens)
        for left, right in table.merges:
            merged = left + right
            if merged not in seen:
                seen.add(merged)
                tokens.append(merged)
        return cls(tokens)

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for tok in self.tokens:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls([line.rstrip("\n") for line in f])


def preprocess(line, mode="keep"):
    """``strip_punct`` drops Unicode punctuation (category P*) and collapses whitespace."""
    if mode == "keep":
        return line
    if mode != "strip_punct":
        raise ValueError(f"unknown preprocessing mode {mode!r}")
    kept = "".join(ch for ch in line if not unicodedata.category(ch).startswith("P"))
    return " ".join(kept.split())


class SubwordTokenizer:
    """Encodes whitespace-tokenised lines into subword ids with optional stochastic BPE dropout."""

    def __init__(self, table, vocab):
        self.table = table
        self.vocab = vocab
        self._ranks = table.ranks
        self._cache = {}

    def segment(self, line, policy=DETERMINISTIC, rng=None, gate=None):
        """Return ``(pieces, routed)``; ``routed`` tells whether the dropout branch was taken.

        ``gate`` overrides the Bernoulli(stochastic_rate) draw when the caller
        fixes the routing decision per line.
        """
        if gate is None:
            gate = (policy.merge_drop_rate > 0.0 and policy.stochastic_rate > 0.0
                    and rng.random() < policy.stochastic_rate)
        pieces = []
        for word in line.split():
            if gate and policy.merge_drop_rate > 0.0:
                pieces.extend(segment_word(word, self._ranks, policy.merge_drop_rate, rng))
            else:
                seg = self._cache.get(word)
                if seg is None:
                    seg = self._cache[word] = segment_word(word, self._ranks)
                pieces.extend(seg)
        return pieces, bool(gate)

    def encode(self, line, policy=DETERMINISTIC, rng=None, gate=None):
        pieces, _ = self.segment(line, policy, rng, gate)
        unk = self.vocab.unk
        return [self.vocab.id_of.get(p, unk) for p in pieces]

    def decode(self, ids):
        return decode(ids, self.vocab)


def decode(ids, vocab):
    """Concatenate subwords, split words at the end-of-word sentinel, drop control symbols."""
    n = len(vocab)
    reserved = vocab.reserved_ids
    parts = []
    for i in ids:
        i = int(i)
        if not 0 <= i < n:
            raise VocabularyError(f"token id {i} outside vocabulary of size {n}")
        if i in reserved and i != vocab.unk:
            continue
        parts.append(vocab.tokens[i])
    return " ".join("".join(parts).replace(EOW, " ").split())


def build_tokenizer(lines, num_operations, min_frequency=2):
    lines = list(lines)
    table = learn_bpe(lines, num_operations, min_frequency)
    return SubwordTokenizer(table, Vocabulary.from_merges(table, lines))
