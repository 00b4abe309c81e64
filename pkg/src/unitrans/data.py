"""Corpora, on-disk formats, the seeded synthetic corpus, batching and task mixing."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .losses import GLOSS2TEXT, MT, SIGN2GLOSS, SIGN2TEXT, TASKS, TEXT2GLOSS
from .tokenizer import DETERMINISTIC, DropoutPolicy

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"SLTF"
FEATURE_VERSION = 1
MAX_POSITIONS = 1024


class FormatError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


class CorpusDataError(ValueError):
    pass


class ScheduleConfigError(ValueError):
    pass


@dataclass
class TripletCorpus:
    features: list          # per-sample (T_i, d_f) float32 arrays
    glosses: list
    texts: list
    feature_dim: int = 0

    def __post_init__(self):
        if not (len(self.features) == len(self.glosses) == len(self.texts)):
            raise AlignmentError(f"triplet streams differ in length: {len(self.features)} features, "
                                 f"{len(self.glosses)} gloss lines, {len(self.texts)} text lines")
        for i, f in enumerate(self.features):
            if f.ndim != 2 or f.shape[0] < 1:
                raise CorpusDataError(f"sample {i}: feature matrix must be (T>=1, d_f), got {f.shape}")
            if self.feature_dim and f.shape[1] != self.feature_dim:
                raise CorpusDataError(f"sample {i}: feature dim {f.shape[1]} != {self.feature_dim}")

    def __len__(self):
        return len(self.glosses)

    def subset(self, n):
        return TripletCorpus(self.features[:n], self.glosses[:n], self.texts[:n], self.feature_dim)


@dataclass
class BitextCorpus:
    source: list
    target: list

    def __post_init__(self):
        if len(self.source) != len(self.target):
            raise AlignmentError(f"bitext sides differ: {len(self.source)} vs {len(self.target)} lines")

    def __len__(self):
        return len(self.source)

    def subset(self, n):
        return BitextCorpus(self.source[:n], self.target[:n])


# -- file formats -----------------------------------------------------------------

def write_features(path, features, feature_dim):
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<III", FEATURE_VERSION, feature_dim, len(features)))
        for mat in features:
            mat = np.asarray(mat, dtype="<f4")
            if mat.ndim != 2 or mat.shape[1] != feature_dim:
                raise CorpusDataError(f"feature matrix {mat.shape} does not match d_f={feature_dim}")
            f.write(struct.pack("<I", mat.shape[0]))
            f.write(np.ascontiguousarray(mat).tobytes())


def read_features(path):
    """Return ``(features, feature_dim)`` from a binary feature file."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: missing SLTF magic")
    version, d_f, n = struct.unpack_from("<III", raw, 4)
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported feature file version {version}")
    off, feats = 16, []
    for i in range(n):
        if off + 4 > len(raw):
            raise FormatError(f"{path}: truncated before sample {i}")
        (t,) = struct.unpack_from("<I", raw, off)
        off += 4
        nbytes = 4 * t * d_f
        if off + nbytes > len(raw):
            raise FormatError(f"{path}: truncated inside sample {i}")
        mat = np.frombuffer(raw, dtype="<f4", count=t * d_f, offset=off).reshape(t, d_f).astype(np.float32)
        if not np.all(np.isfinite(mat)):
            raise CorpusDataError(f"{path}: sample {i} contains non-finite feature values")
        feats.append(mat)
        off += nbytes
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes after {n} samples")
    return feats, d_f


def write_lines(path, lines):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for line in lines:
            f.write(line + "\n")


def read_lines(path):
    with open(path, encoding="utf-8", newline="") as f:
        text = f.read()
    if not text:
        return []
    if text.endswith("\n"):
        text = text[:-1]
    return text.split("\n")


def load_corpus(feature_file, gloss_file, text_file):
    feats, d_f = read_features(feature_file)
    glosses, texts = read_lines(gloss_file), read_lines(text_file)
    if not (len(feats) == len(glosses) == len(texts)):
        raise AlignmentError(f"{gloss_file}: {len(feats)} feature samples, {len(glosses)} gloss lines, "
                             f"{len(texts)} text lines")
    return TripletCorpus(feats, glosses, texts, d_f)


def save_corpus(corpus, prefix):
    write_features(f"{prefix}.feat", corpus.features, corpus.feature_dim)
    write_lines(f"{prefix}.gloss", corpus.glosses)
    write_lines(f"{prefix}.text", corpus.texts)


def load_bitext(source_file, target_file):
    return BitextCorpus(read_lines(source_file), read_lines(target_file))


# -- synthetic corpus -----------------------------------------------------------------

_CONSONANTS = "bcdfghjklmnprstvwz"
_VOWELS = "aeiou"


def _make_words(rng, n, lo, hi, upper=False):
    words = set()
    out = []
    while len(out) < n:
        length = int(rng.integers(lo, hi + 1))
        w = "".join((_CONSONANTS if i % 2 == 0 else _VOWELS)[int(rng.integers(0, 18 if i % 2 == 0 else 5))]
                    for i in range(length))
        if upper:
            w = w.upper()
        if w not in words:
            words.add(w)
            out.append(w)
    return out


def _reorder(words):
    """Swap adjacent word pairs starting at even indices."""
    words = list(words)
    for i in range(0, len(words) - 1, 2):
        words[i], words[i + 1] = words[i + 1], words[i]
    return words


def _rotate(word):
    return word[1:] + word[:1]


def synth_generate(seed, n_train, n_dev, n_test, n_mt=None, gloss_vocab=30, word_vocab=60,
                   feature_dim=32, noise=0.1, frames_per_gloss=(2, 4), gloss_len=(3, 10)):
    """Seeded desk-scale triplet corpus plus an MT bitext over the same text distribution.

    Each gloss owns a fixed prototype frame vector and maps to one or two
    words. A sample draws a gloss sequence, emits 2-4 noisy prototype frames
    per gloss, and renders its text as the mapped words with adjacent pairs
    swapped. MT pairs rotate every word's characters by one on the source side.
    """
    rng = np.random.default_rng(seed)
    glosses = _make_words(rng, gloss_vocab, 3, 6, upper=True)
    words = _make_words(rng, word_vocab, 2, 7)
    mapping = {}
    for g in glosses:
        k = int(rng.integers(1, 3))
        mapping[g] = [words[int(j)] for j in rng.integers(0, word_vocab, size=k)]
    protos = {g: rng.standard_normal(feature_dim) for g in glosses}

    def sample_glosses():
        n = int(rng.integers(gloss_len[0], gloss_len[1] + 1))
        return [glosses[int(j)] for j in rng.integers(0, gloss_vocab, size=n)]

    def render(seq):
        return " ".join(_reorder([w for g in seq for w in mapping[g]]))

    def triplets(n):
        feats, gl, tx = [], [], []
        for _ in range(n):
            seq = sample_glosses()
            frames = []
            for g in seq:
                reps = int(rng.integers(frames_per_gloss[0], frames_per_gloss[1] + 1))
                block = np.tile(protos[g], (reps, 1))
                if noise > 0:
                    block = block + rng.normal(0.0, noise, size=block.shape)
                frames.append(block)
            feats.append(np.concatenate(frames).astype(np.float32))
            gl.append(" ".join(seq))
            tx.append(render(seq))
        return TripletCorpus(feats, gl, tx, feature_dim)

    train, dev, test = triplets(n_train), triplets(n_dev), triplets(n_test)
    if n_mt is None:
        n_mt = 2 * n_train
    tgt = [render(sample_glosses()) for _ in range(n_mt)]
    src = [" ".join(_rotate(w) for w in line.split()) for line in tgt]
    return train, dev, test, BitextCorpus(src, tgt)


# -- batching ---------------------------------------------------------------------------

@dataclass
class Batch:
    task: str
    tag: int
    modality: str
    src_lengths: np.ndarray
    tgt_in: np.ndarray          # BOS + y, PAD-padded
    tgt_out: np.ndarray         # y + EOS, PAD-padded
    src_ids: np.ndarray | None = None
    src_feats: np.ndarray | None = None
    ctc_labels: list | None = None
    indices: np.ndarray | None = None

    def __len__(self):
        return len(self.src_lengths)

    @property
    def tgt_mask(self):
        return self.tgt_out != 0


def _pad(seqs, pad, width=None):
    width = width or max((len(s) for s in seqs), default=0)
    out = np.full((len(seqs), width), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


def _pad_feats(mats, d_f):
    tmax = max(m.shape[0] for m in mats)
    out = np.zeros((len(mats), tmax, d_f), dtype=np.float32)
    for i, m in enumerate(mats):
        out[i, :m.shape[0]] = m
    return out


def task_fields(task):
    """(source field, target field) of a task over a triplet or bitext corpus."""
    return {SIGN2GLOSS: ("features", "glosses"), SIGN2TEXT: ("features", "texts"),
            GLOSS2TEXT: ("glosses", "texts"), TEXT2GLOSS: ("texts", "glosses"),
            MT: ("source", "target")}[task]


def collate(task, vocab, src, tgt, ctc=None, feature_dim=None, indices=None):
    """Build a padded batch from per-sample source (ids or frames), target ids and CTC labels."""
    spec = TASKS[task]
    tag = vocab.tag_gloss if spec.tag == "gloss" else vocab.tag_text
    lengths = np.array([len(s) for s in src], dtype=np.int64)
    tgt_in = _pad([[vocab.bos] + list(t) for t in tgt], vocab.pad)
    tgt_out = _pad([list(t) + [vocab.eos] for t in tgt], vocab.pad)
    batch = Batch(task, tag, spec.modality, lengths, tgt_in, tgt_out,
                  ctc_labels=ctc, indices=None if indices is None else np.asarray(indices))
    if spec.modality == "visual":
        batch.src_feats = _pad_feats(src, feature_dim if feature_dim else src[0].shape[1])
    else:
        batch.src_ids = _pad(src, vocab.pad)
    return batch


class TaskBatcher:
    """Epoch-wise shuffled, token-budgeted batches of one task over one corpus.

    Textual sources and all targets go through the subword encoder with the
    training dropout policy; CTC gloss labels are always segmented
    deterministically. ``gate_mode='per_line'`` fixes each line's stochastic
    dropout routing once instead of redrawing it every epoch.
    """

    def __init__(self, corpus, task, tokenizer, policy=DETERMINISTIC, batch_tokens=2048, rng=None,
                 train=True, feature_noise=0.0, gate_mode="per_epoch", max_positions=MAX_POSITIONS,
                 bucket_pool=0):
        self.corpus = corpus
        self.task = task
        self.tok = tokenizer
        self.policy = policy if train else DETERMINISTIC
        self.batch_tokens = batch_tokens
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.train = train
        self.feature_noise = feature_noise
        self.max_positions = max_positions
        self.bucket_pool = bucket_pool
        self.skipped = 0
        self.epoch = 0
        self._src_field, self._tgt_field = task_fields(task)
        n = len(corpus)
        self._fixed_gates = None
        if gate_mode == "per_line" and train:
            self._fixed_gates = self.rng.random(n) < self.policy.stochastic_rate
        elif gate_mode not in ("per_epoch", "per_line"):
            raise ValueError(f"unknown gate_mode {gate_mode!r}")
        self._ctc_cache = {}

    def _encode(self, line, i):
        gate = None if self._fixed_gates is None else bool(self._fixed_gates[i])
        return self.tok.encode(line, self.policy, self.rng, gate)

    def _ctc(self, i):
        ids = self._ctc_cache.get(i)
        if ids is None:
            ids = self._ctc_cache[i] = self.tok.encode(self.corpus.glosses[i])
        return ids

    def _sample(self, i):
        src_raw = getattr(self.corpus, self._src_field)[i]
        if self._src_field == "features":
            src = src_raw
            if self.train and self.feature_noise > 0:
                src = (src + self.rng.normal(0.0, self.feature_noise, size=src.shape)).astype(np.float32)
        else:
            src = self._encode(src_raw, i)
        tgt = self._encode(getattr(self.corpus, self._tgt_field)[i], i)
        return src, tgt

    def epoch_batches(self, order=None):
        """One pass over the corpus.

        Training shuffles, then sorts each pool of ``bucket_pool`` samples by
        length before cutting batches, so a batch's padded budget is spent on
        real tokens; the batches of a pool are yielded in shuffled order.
        Evaluation keeps corpus order.
        """
        n = len(self.corpus)
        if order is None:
            order = self.rng.permutation(n) if self.train else np.arange(n)
        self.epoch += 1
        if not (self.train and self.bucket_pool > 1):
            yield from self._cut(order, sort=False)
            return
        for start in range(0, len(order), self.bucket_pool):
            batches = list(self._cut(order[start:start + self.bucket_pool], sort=True))
            yield from (batches[j] for j in self.rng.permutation(len(batches)))

    def _cut(self, indices, sort):
        visual = self._src_field == "features"
        samples = []
        for i in indices:
            src, tgt = self._sample(int(i))
            length = max(len(src), len(tgt) + 1)
            if length + 1 > self.max_positions:
                self.skipped += 1
                log.warning("skipping sample %d of %s: %d positions exceed cap", i, self.task, length)
                continue
            samples.append((length, int(i), src, tgt))
        if sort:
            samples.sort(key=lambda s: s[0])        # stable: equal lengths keep shuffled order
        cur, cur_max = [], 0
        for length, i, src, tgt in samples:
            new_max = max(cur_max, length)
            if cur and new_max * (len(cur) + 1) > self.batch_tokens:
                yield self._collate(cur, visual)
                cur, new_max = [], length
            cur.append((i, src, tgt))
            cur_max = new_max
        if cur:
            yield self._collate(cur, visual)

    def _collate(self, items, visual):
        idx = [i for i, _, _ in items]
        ctc = [np.asarray(self._ctc(i), dtype=np.int64) for i in idx] if TASKS[self.task].uses_ctc else None
        return collate(self.task, self.tok.vocab, [s for _, s, _ in items], [t for _, _, t in items],
                       ctc, getattr(self.corpus, "feature_dim", None), idx)

    def __iter__(self):
        """Endless stream: reshuffles at every epoch boundary."""
        if len(self.corpus) == 0:
            return
        while True:
            yield from self.epoch_batches()


def make_batches(corpus, task, tokenizer, policy, batch_tokens, rng, train=True, **kw):
    batcher = TaskBatcher(corpus, task, tokenizer, policy, batch_tokens, rng, train, **kw)
    return iter(batcher) if train else batcher.epoch_batches()


@dataclass
class MixSchedule:
    mt_ratio: int = 0
    slt_cycle: tuple = field(default=(SIGN2GLOSS, SIGN2TEXT, GLOSS2TEXT))

    def __post_init__(self):
        if self.mt_ratio < 0:
            raise ScheduleConfigError("mt_ratio must be >= 0")

    def pattern(self):
        return (MT,) * self.mt_ratio + tuple(self.slt_cycle)


def mix(streams, schedule):
    """Interleave per-task batch streams following the schedule's repeating pattern.

    ``streams`` maps task name to an endless batch iterator.
    """
    pattern = schedule.pattern()
    if not pattern:
        raise ScheduleConfigError("empty task schedule")
    for task in pattern:
        if task not in streams:
            if task == MT:
                raise ScheduleConfigError("mt_ratio > 0 needs a non-empty MT corpus")
            raise ScheduleConfigError(f"no batch stream for scheduled task {task}")
    while True:
        for task in pattern:
            yield next(streams[task])
