import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unitrans import tensor as T
from unitrans.data import Batch
from unitrans.losses import (GLOSS2TEXT, JOINT_TASKS, SIGN2GLOSS, SIGN2TEXT, TASKS, TEXT2GLOSS, DataError,
                             EmptyTargetError, InfeasibleAlignmentError, ctc_loss, ctc_loss_batch, ctc_min_frames,
                             mle_loss, task_loss)
from unitrans.tensor import Tensor

from gradcheck import check_grads

BLANK = 0


def brute_force_ctc(log_probs, labels, blank=BLANK):
    """-log of the summed probability of every frame path that collapses to ``labels``."""
    t_len, vocab = log_probs.shape
    total = 0.0
    for path in itertools.product(range(vocab), repeat=t_len):
        collapsed = [k for i, k in enumerate(path) if k != blank and (i == 0 or path[i - 1] != k)]
        if collapsed == list(labels):
            total += math.exp(sum(log_probs[t, k] for t, k in enumerate(path)))
    return -math.log(total) if total > 0 else math.inf


def _log_softmax(x):
    x = x - x.max(axis=-1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


def test_ctc_worked_example():
    lp = np.log(np.full((2, 2), 0.5))
    with T.precision(np.float64):
        loss = ctc_loss(Tensor(lp), [1], BLANK).item()
    assert loss == pytest.approx(-math.log(0.75), abs=1e-9)
    assert loss == pytest.approx(0.287682, abs=1e-6)


def test_ctc_matches_exhaustive_enumeration_everywhere():
    rng = np.random.default_rng(0)
    checked = 0
    for t_len in range(1, 7):
        for vocab in range(2, 5):
            for z_len in range(0, 4):
                for _ in range(3):
                    labels = list(rng.integers(1, vocab, size=z_len))
                    lp = _log_softmax(rng.standard_normal((t_len, vocab)) * 2)
                    expected = brute_force_ctc(lp, labels)
                    if not math.isfinite(expected):
                        continue
                    with T.precision(np.float64):
                        got = ctc_loss(Tensor(lp), labels, BLANK).item()
                    assert abs(got - expected) < 1e-8, (t_len, vocab, labels)
                    checked += 1
    assert checked > 150


def test_ctc_batch_agrees_with_single_sequences():
    rng = np.random.default_rng(3)
    lens = [6, 4, 5]
    labels = [[1, 2, 2], [3], []]
    lp = _log_softmax(rng.standard_normal((3, 6, 4)))
    with T.precision(np.float64):
        batch = ctc_loss_batch(Tensor(lp), labels, lens, BLANK).data
        single = [ctc_loss(Tensor(lp[i, :lens[i]]), labels[i], BLANK).item() for i in range(3)]
    np.testing.assert_allclose(batch, single, atol=1e-10)


def test_ctc_empty_label_is_all_blank_path():
    lp = _log_softmax(np.random.default_rng(1).standard_normal((5, 3)))
    with T.precision(np.float64):
        loss = ctc_loss(Tensor(lp), [], BLANK).item()
    assert loss == pytest.approx(-lp[:, BLANK].sum(), abs=1e-10)


def test_ctc_infeasible_alignment():
    lp = Tensor(_log_softmax(np.zeros((2, 3))))
    with pytest.raises(InfeasibleAlignmentError):
        ctc_loss(lp, [1, 1], BLANK)           # repeat needs a blank in between: 3 frames
    assert ctc_loss(lp, [1, 1], BLANK, infeasible="inf").item() == math.inf


def test_ctc_is_permutation_sensitive():
    lp = _log_softmax(np.random.default_rng(2).standard_normal((6, 4)))
    with T.precision(np.float64):
        fwd = ctc_loss(Tensor(lp), [1, 2, 3], BLANK).item()
        rev = ctc_loss(Tensor(lp), [3, 2, 1], BLANK).item()
    assert abs(fwd - rev) > 1e-6


def test_ctc_gradient_matches_finite_differences():
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        labels = list(rng.integers(1, 4, size=int(rng.integers(0, 3))))
        t_len = max(int(rng.integers(2, 6)), ctc_min_frames(labels))
        logits = rng.standard_normal((t_len, 4))

        def f(x, labels=labels):
            return ctc_loss(T.log_softmax(x), labels, BLANK)
        worst = max(worst, check_grads(f, [logits]))
    assert worst < 1e-4


def test_ctc_agrees_with_torch_reference():
    torch = pytest.importorskip("torch")
    rng = np.random.default_rng(5)
    lp = _log_softmax(rng.standard_normal((3, 7, 5)))
    labels = [[1, 2, 2, 3], [4], [2, 3]]
    lens = [7, 3, 6]
    with T.precision(np.float64):
        ours = ctc_loss_batch(Tensor(lp), labels, lens, BLANK).data
    ref = torch.nn.functional.ctc_loss(
        torch.tensor(lp).transpose(0, 1), torch.tensor(sum(labels, [])),
        torch.tensor(lens), torch.tensor([len(z) for z in labels]), blank=BLANK, reduction="none")
    np.testing.assert_allclose(ours, ref.numpy(), atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000), t_len=st.integers(1, 8), z_len=st.integers(0, 4))
def test_ctc_probability_in_unit_interval(seed, t_len, z_len):
    rng = np.random.default_rng(seed)
    labels = list(rng.integers(1, 5, size=z_len))
    lp = _log_softmax(rng.standard_normal((t_len, 5)) * 3)
    with T.precision(np.float64):
        loss = ctc_loss(Tensor(lp), labels, BLANK, infeasible="inf").item()
    if math.isfinite(loss):
        assert 0.0 < math.exp(-loss) <= 1.0 + 1e-12


# -- MLE ---------------------------------------------------------------------------------------

def test_mle_smoothed_worked_example():
    with T.precision(np.float64):
        logits = Tensor(np.log(np.array([[0.7, 0.1, 0.1, 0.1]])))
        loss = mle_loss(logits, np.array([0]), pad_id=None, smoothing=0.1).item()
    # q_gold = 0.9 + 0.1/4, q_other = 0.1/4
    assert loss == pytest.approx(-(0.925 * math.log(0.7) + 0.075 * math.log(0.1)), abs=1e-9)
    assert loss == pytest.approx(0.5026182, abs=1e-6)


def test_mle_perfect_prediction_is_zero():
    logits = np.full((1, 3, 5), -50.0)
    targets = np.array([[1, 2, 3]])
    logits[0, np.arange(3), targets[0]] = 50.0
    with T.precision(np.float64):
        assert mle_loss(Tensor(logits), targets, smoothing=0.0).item() == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("eps", [0.0, 0.1, 0.5])
def test_mle_uniform_logits_give_log_vocab(eps):
    with T.precision(np.float64):
        loss = mle_loss(Tensor(np.zeros((2, 3, 6))), np.array([[1, 2, 3], [4, 5, 1]]), pad_id=None,
                        smoothing=eps).item()
    assert loss == pytest.approx(math.log(6), abs=1e-12)


def test_mle_ignores_pad_logits():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((2, 4, 7))
    targets = np.array([[3, 4, 2, 0], [5, 2, 0, 0]])
    base = mle_loss(Tensor(logits), targets).item()
    bumped = logits.copy()
    bumped[targets == 0] += 100 * rng.standard_normal((int((targets == 0).sum()), 7))
    assert mle_loss(Tensor(bumped), targets).item() == pytest.approx(base, rel=1e-6)


def test_mle_all_pad_rejected():
    with pytest.raises(EmptyTargetError):
        mle_loss(Tensor(np.zeros((1, 2, 4))), np.zeros((1, 2), dtype=int))


def test_mle_gradient_matches_finite_differences():
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        targets = rng.integers(0, 5, size=(2, 3))
        targets[0, 0] = 1
        worst = max(worst, check_grads(lambda x, t=targets: mle_loss(x, t, 0, 0.1),
                                       [rng.standard_normal((2, 3, 5))]))
    assert worst < 1e-4


# -- task objectives -----------------------------------------------------------------------------

def test_task_table():
    assert TASKS[SIGN2GLOSS].uses_ctc and TASKS[SIGN2TEXT].uses_ctc
    assert not TASKS[GLOSS2TEXT].uses_ctc and not TASKS["mt"].uses_ctc
    assert TEXT2GLOSS in TASKS and TEXT2GLOSS not in JOINT_TASKS


def _toy_batch(task, ctc_labels=((1, 2),)):
    return Batch(task=task, tag=6, modality="visual", src_lengths=np.array([5]),
                 tgt_in=np.array([[1, 3, 2]]), tgt_out=np.array([[3, 2, 0]]),
                 ctc_labels=None if ctc_labels is None else [np.array(z) for z in ctc_labels])


def test_task_loss_recomposes_with_alpha():
    rng = np.random.default_rng(0)
    logits = Tensor(rng.standard_normal((1, 3, 6)))
    ctc_lp = T.log_softmax(Tensor(rng.standard_normal((1, 5, 6))))
    lb = task_loss(_toy_batch(SIGN2GLOSS), logits, ctc_lp, TASKS[SIGN2GLOSS], 0.3, 0.1)
    assert lb.total.item() == pytest.approx(lb.mle.item() + 0.3 * lb.ctc.item(), abs=1e-6)
    assert lb.token_count == 2
    lb0 = task_loss(_toy_batch(SIGN2TEXT), logits, ctc_lp, TASKS[SIGN2TEXT], 0.0, 0.1)
    assert lb0.total.item() == lb0.mle.item()


def test_gloss2text_has_no_ctc_term():
    logits = Tensor(np.random.default_rng(0).standard_normal((1, 3, 6)))
    lb = task_loss(_toy_batch(GLOSS2TEXT, None), logits, None, TASKS[GLOSS2TEXT], 0.3, 0.1)
    assert lb.ctc.item() == 0.0 and lb.total is lb.mle


def test_ctc_task_without_glosses_is_data_error():
    logits = Tensor(np.zeros((1, 3, 6)))
    with pytest.raises(DataError):
        task_loss(_toy_batch(SIGN2TEXT, None), logits, T.log_softmax(Tensor(np.zeros((1, 5, 6)))),
                  TASKS[SIGN2TEXT], 0.3, 0.1)
