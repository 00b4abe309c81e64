"""Training objectives: label-smoothed MLE, CTC, and their per-task combination."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, NEG_INF


class EmptyTargetError(ValueError):
    pass


class InfeasibleAlignmentError(ValueError):
    pass


class DataError(ValueError):
    pass


SIGN2GLOSS, SIGN2TEXT, GLOSS2TEXT, MT, TEXT2GLOSS = "sign2gloss", "sign2text", "gloss2text", "mt", "text2gloss"


@dataclass(frozen=True)
class TaskObjectiveSpec:
    task: str
    uses_ctc: bool
    ctc_target: str | None   # batch field supplying the CTC labels
    tag: str                 # "gloss" or "text"
    modality: str            # encoder stack fed by the source


TASKS = {
    SIGN2GLOSS: TaskObjectiveSpec(SIGN2GLOSS, True, "gloss", "gloss", "visual"),
    SIGN2TEXT: TaskObjectiveSpec(SIGN2TEXT, True, "gloss", "text", "visual"),
    GLOSS2TEXT: TaskObjectiveSpec(GLOSS2TEXT, False, None, "text", "textual"),
    MT: TaskObjectiveSpec(MT, False, None, "text", "textual"),
    TEXT2GLOSS: TaskObjectiveSpec(TEXT2GLOSS, False, None, "gloss", "textual"),
}

# Text2Gloss is available but left out of the joint objective.
JOINT_TASKS = (SIGN2GLOSS, SIGN2TEXT, GLOSS2TEXT, MT)


@dataclass
class LossBreakdown:
    mle: Tensor
    ctc: Tensor
    total: Tensor
    token_count: int

    def values(self):
        return {"mle": self.mle.item(), "ctc": self.ctc.item(), "total": self.total.item()}


def mle_loss(logits, targets, pad_id=0, smoothing=0.1):
    """Mean label-smoothed cross-entropy over non-pad target positions.

    The smoothing mass ``smoothing`` is spread uniformly over every vocabulary
    entry except PAD, gold included.
    """
    targets = np.asarray(targets)
    valid = targets != pad_id
    n_tokens = int(valid.sum())
    if n_tokens == 0:
        raise EmptyTargetError("mle_loss: every target position is padding")
    vocab = logits.shape[-1]
    lp = T.log_softmax(logits)
    gold = T.take_along_last(lp, targets[..., None])[..., 0]
    per_tok = gold * (-(1.0 - smoothing))
    if smoothing > 0.0:
        keep = np.ones(vocab, dtype=bool)
        if pad_id is not None and 0 <= pad_id < vocab:
            keep[pad_id] = False
        uniform = (lp * keep.astype(lp.data.dtype)).sum(axis=-1)
        per_tok = per_tok - uniform * (smoothing / int(keep.sum()))
    per_tok = per_tok * valid.astype(per_tok.data.dtype)
    return per_tok.sum() * (1.0 / n_tokens)


def ctc_min_frames(labels):
    labels = list(labels)
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def _extend(labels, blank, width):
    ext = np.full(width, blank, dtype=np.int64)
    ext[1:2 * len(labels):2] = labels
    return ext


def ctc_loss_batch(log_probs, labels, input_lengths, blank, infeasible="error"):
    """Per-sequence CTC negative log-likelihood, shape (B,).

    ``log_probs`` is (B, T, V) and already log-normalised; ``labels`` is a list
    of label id sequences. The forward recursion over the blank-interleaved
    label sequence is assembled from differentiable primitives, so gradients
    come from the substrate's backward pass. With ``infeasible="inf"`` a
    sequence that cannot be aligned yields +inf instead of raising.
    """
    bsz, tmax, _ = log_probs.shape
    input_lengths = np.asarray(input_lengths, dtype=np.int64)
    labels = [np.asarray(z, dtype=np.int64) for z in labels]
    if len(labels) != bsz:
        raise DataError(f"ctc: {len(labels)} label sequences for a batch of {bsz}")
    bad = [i for i in range(bsz) if ctc_min_frames(labels[i]) > input_lengths[i]]
    if bad and infeasible != "inf":
        i = bad[0]
        raise InfeasibleAlignmentError(
            f"ctc: {input_lengths[i]} frames cannot emit {len(labels[i])} labels "
            f"(needs {ctc_min_frames(labels[i])})")
    width = max(2 * max((len(z) for z in labels), default=0) + 1, 2)
    ext = np.stack([_extend(z, blank, width) for z in labels])              # (B, S)
    ext_len = np.array([2 * len(z) + 1 for z in labels])
    # skip transition s-2 -> s allowed onto a non-blank differing from label two back
    skip = np.zeros((bsz, width), dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])
    dtype = log_probs.data.dtype
    neg = np.full((bsz, 1), NEG_INF, dtype=dtype)
    neg2 = np.full((bsz, 2), NEG_INF, dtype=dtype)

    emit = T.take_along_last(log_probs, np.broadcast_to(ext[:, None, :], (bsz, tmax, width)))  # (B,T,S)
    init = np.full((bsz, width), NEG_INF, dtype=dtype)
    init[:, 0] = 0.0
    init[:, 1] = np.where(ext_len > 1, 0.0, NEG_INF)
    alpha = emit[:, 0, :] + Tensor(init)
    for t in range(1, tmax):
        stay = alpha
        step = T.concat([Tensor(neg), alpha[:, :-1]], axis=1)
        jump = T.masked_fill(T.concat([Tensor(neg2), alpha[:, :-2]], axis=1), ~skip, NEG_INF)
        new = T.logsumexp(T.stack([stay, step, jump], axis=-1), axis=-1) + emit[:, t, :]
        active = (t < input_lengths)[:, None]
        alpha = T.where(np.broadcast_to(active, (bsz, width)), new, alpha)
    last = np.stack([ext_len - 1, np.maximum(ext_len - 2, 0)], axis=1)
    ends = T.take_along_last(alpha, last)                       # (B, 2)
    # an empty label sequence ends only in the single blank state
    single = np.stack([np.zeros(bsz, dtype=bool), ext_len == 1], axis=1)
    ends = T.masked_fill(ends, single, NEG_INF)
    nll = -T.logsumexp(ends, axis=-1)
    if bad:
        nll = T.masked_fill(nll, np.isin(np.arange(bsz), bad), np.inf)
    return nll


def ctc_loss(log_probs, labels, blank, infeasible="error"):
    """CTC negative log-likelihood of one (T, V) log-probability matrix."""
    log_probs = T.as_tensor(log_probs)
    lp = log_probs.reshape(1, *log_probs.shape)
    return ctc_loss_batch(lp, [labels], [log_probs.shape[0]], blank, infeasible)[0]


def task_loss(batch, logits, ctc_log_probs, spec, alpha, smoothing, pad_id=0, blank_id=4):
    """Combine the decoder MLE term with ``alpha`` x mean per-sequence CTC when the task uses it."""
    if batch.task != spec.task:
        raise DataError(f"batch task {batch.task!r} does not match objective {spec.task!r}")
    mle = mle_loss(logits, batch.tgt_out, pad_id, smoothing)
    n_tok = int((np.asarray(batch.tgt_out) != pad_id).sum())
    if not spec.uses_ctc:
        zero = Tensor(0.0)
        return LossBreakdown(mle, zero, mle, n_tok)
    if batch.ctc_labels is None:
        raise DataError(f"{spec.task} batch carries no gloss labels for CTC")
    ctc = ctc_loss_batch(ctc_log_probs, batch.ctc_labels, batch.src_lengths, blank_id).mean()
    total = mle + ctc * alpha if alpha else mle
    return LossBreakdown(mle, ctc, total, n_tok)
