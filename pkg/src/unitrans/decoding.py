"""Beam-search generation and the end-to-end / cascading translation pipelines."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import collate
from .losses import GLOSS2TEXT, SIGN2GLOSS, SIGN2TEXT, TEXT2GLOSS

log = logging.getLogger(__name__)


class BeamConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BeamConfig:
    beam_size: int = 8
    length_penalty: float = 1.0
    max_len_ratio: float = 1.5
    max_len_offset: int = 10

    def __post_init__(self):
        if self.beam_size < 1:
            raise BeamConfigError(f"beam_size must be >= 1, got {self.beam_size}")
        if not 0.0 <= self.length_penalty <= 2.0:
            raise BeamConfigError(f"length_penalty must lie in [0, 2], got {self.length_penalty}")


@dataclass
class Hypothesis:
    tokens: tuple        # generated ids, EOS included when finished
    logprob: float
    finished: bool
    norm_score: float = 0.0

    @property
    def output(self):
        return self.tokens[:-1] if self.finished else self.tokens


def normalized(logprob, length, gamma):
    return logprob / (max(length, 1) ** gamma) if gamma else logprob


def beam_search(model, batch, config=BeamConfig(), banned_ids=(), max_len=None, n_best=1):
    """Length-normalised beam search for every sample of a batch.

    Each sample keeps ``beam_size`` slots. At every step the live hypotheses
    of a sample are expanded over the vocabulary, the best ``slots``
    continuations are kept (ties go to the lower token id), and those ending
    in EOS, or reaching the length limit, leave the beam and free one slot
    each. The finished pool is ranked by ``logprob / len**gamma``.

    Returns, per sample, the ``n_best`` best hypotheses (a list) or the single
    best one when ``n_best == 1``.
    """
    cfg = model.config
    eos, bos = cfg.eos_id, cfg.bos_id
    bsz = len(batch)
    if max_len is None:
        limits = [int(math.ceil(config.max_len_ratio * n + config.max_len_offset)) for n in batch.src_lengths]
    else:
        limits = [int(max_len)] * bsz
    banned = np.asarray(sorted(set(banned_ids) | {cfg.pad_id, bos}), dtype=np.int64)

    with T.no_grad():
        enc = model.encode_batch(batch, train=False)
        cache = model.start_decoding(enc)
        # live hypotheses: parallel lists indexed by cache row
        owner = list(range(bsz))
        hist = [()] * bsz
        scores = np.zeros(bsz)
        tokens = np.full(bsz, bos, dtype=np.int64)
        slots = [config.beam_size] * bsz
        finished = [[] for _ in range(bsz)]
        step = 0
        while owner:
            lp = model.decode_next(tokens, cache).data.astype(np.float64)
            if banned.size:
                lp[:, banned] = -np.inf
            vocab = lp.shape[1]
            cand = scores[:, None] + lp
            rows_of = {}
            for r, b in enumerate(owner):
                rows_of.setdefault(b, []).append(r)
            new_owner, new_hist, new_scores, new_tokens, src_rows = [], [], [], [], []
            for b, rows in rows_of.items():
                flat = cand[rows].reshape(-1)
                k = min(slots[b], int(np.isfinite(flat).sum()))
                if k <= 0:
                    slots[b] = 0
                    continue
                if k < flat.size:
                    part = np.argpartition(-flat, k - 1)[:k]
                    cutoff = flat[part].min()
                    pool = np.flatnonzero(flat >= cutoff)
                else:
                    pool = np.arange(flat.size)
                # highest score first; ties by (row, token id) ascending
                pool = pool[np.lexsort((pool, -flat[pool]))][:k]
                for idx in pool:
                    row, tok = rows[idx // vocab], int(idx % vocab)
                    seq = hist[row] + (tok,)
                    s = float(flat[idx])
                    if tok == eos or len(seq) >= limits[b]:
                        done = tok == eos
                        finished[b].append(Hypothesis(seq, s, done, normalized(s, len(seq), config.length_penalty)))
                        slots[b] -= 1
                    else:
                        new_owner.append(b)
                        new_hist.append(seq)
                        new_scores.append(s)
                        new_tokens.append(tok)
                        src_rows.append(row)
            step += 1
            if not new_owner:
                break
            model.reorder_cache(cache, np.asarray(src_rows, dtype=np.int64))
            owner, hist = new_owner, new_hist
            scores = np.asarray(new_scores)
            tokens = np.asarray(new_tokens, dtype=np.int64)

    results = []
    for b in range(bsz):
        ranked = sorted(finished[b], key=lambda h: (-h.norm_score, h.tokens))
        results.append(ranked[:n_best] if n_best != 1 else (ranked[0] if ranked else Hypothesis((), 0.0, False)))
    return results


def greedy_search(model, batch, max_len, banned_ids=()):
    """Argmax decoding, used as a reference for the degenerate one-slot beam."""
    cfg = model.config
    banned = sorted(set(banned_ids) | {cfg.pad_id, cfg.bos_id})
    with T.no_grad():
        enc = model.encode_batch(batch, train=False)
        cache = model.start_decoding(enc)
        tokens = np.full(len(batch), cfg.bos_id, dtype=np.int64)
        out = [[] for _ in range(len(batch))]
        done = np.zeros(len(batch), dtype=bool)
        for _ in range(max_len):
            lp = model.decode_next(tokens, cache).data.astype(np.float64)
            lp[:, banned] = -np.inf
            tokens = lp.argmax(axis=1)
            for i, t in enumerate(tokens):
                if not done[i]:
                    out[i].append(int(t))
                    done[i] = t == cfg.eos_id
            if done.all():
                break
    return out


# -- pipelines --------------------------------------------------------------------------

def generation_banned(vocab):
    """Control symbols the decoder may never emit (EOS stays allowed)."""
    return tuple(i for i in vocab.reserved_ids if i != vocab.eos)


def _chunks(n, size):
    for start in range(0, n, size):
        yield list(range(start, min(n, start + size)))


def translate_sources(model, tokenizer, task, sources, config=BeamConfig(), chunk=64):
    """Decode a list of sources (frame matrices or text lines) for one task; returns strings."""
    vocab = tokenizer.vocab
    visual = task in (SIGN2GLOSS, SIGN2TEXT)
    outputs = []
    for idx in _chunks(len(sources), chunk):
        if visual:
            src = []
            for i in idx:
                if sources[i].shape[0] < 1:
                    raise ValueError(f"source {i} has no frames")
                src.append(sources[i])
        else:
            src = [tokenizer.encode(sources[i]) for i in idx]
        batch = collate(task, vocab, src, [[] for _ in idx], None, model.config.feature_dim, idx)
        for hyp in beam_search(model, batch, config, generation_banned(vocab)):
            outputs.append(tokenizer.decode(hyp.output))
    return outputs


def translate_end_to_end(model, tokenizer, features, config=BeamConfig()):
    return translate_sources(model, tokenizer, SIGN2TEXT, features, config)


def translate_cascade(model, tokenizer, features, config=BeamConfig()):
    """Sign2Gloss then Gloss2Text with one model; returns (gloss lines, text lines)."""
    glosses = translate_sources(model, tokenizer, SIGN2GLOSS, features, config)
    for i, g in enumerate(glosses):
        if not g:
            log.warning("cascade: empty gloss prediction for sample %d; stage 2 sees only the tag", i)
    texts = translate_sources(model, tokenizer, GLOSS2TEXT, glosses, config)
    return glosses, texts


def translate_text(model, tokenizer, lines, task=GLOSS2TEXT, config=BeamConfig()):
    if task not in (GLOSS2TEXT, TEXT2GLOSS, "mt"):
        raise ValueError(f"{task} is not a text-input task")
    return translate_sources(model, tokenizer, task, lines, config)
