"""Central finite-difference gradient checking in float64."""

import numpy as np

from unitrans import tensor as T


def numeric_grad(f, arrays, i, eps=1e-6):
    base = [a.copy() for a in arrays]
    g = np.zeros_like(base[i])
    it = np.nditer(base[i], flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = base[i][idx]
        base[i][idx] = old + eps
        up = f(*[T.Tensor(a) for a in base]).item()
        base[i][idx] = old - eps
        down = f(*[T.Tensor(a) for a in base]).item()
        base[i][idx] = old
        g[idx] = (up - down) / (2 * eps)
    return g


def rel_error(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


def check_grads(f, arrays, wrt=None, eps=1e-6):
    """Return the worst relative error between analytic and numeric gradients of scalar f."""
    wrt = range(len(arrays)) if wrt is None else wrt
    with T.precision(np.float64):
        ts = [T.Tensor(a.astype(np.float64), requires_grad=True) for a in arrays]
        f(*ts).backward()
        worst = 0.0
        for i in wrt:
            analytic = ts[i].grad if ts[i].grad is not None else np.zeros_like(ts[i].data)
            numeric = numeric_grad(f, [a.astype(np.float64) for a in arrays], i, eps)
            worst = max(worst, rel_error(analytic, numeric))
    return worst
