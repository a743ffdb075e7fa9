"""Independent reference computations used to pin expected test values.

Everything here deliberately avoids the library's own forward/backward
code paths: finite differences, dense-matrix algebra, per-row scalar
softmax, a linear-program transport solver, and a hand-rolled scalar Adam.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.optimize import linprog


def central_difference(f, x0: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of a matrix."""
    g = np.zeros_like(x0, dtype=np.float64)
    it = np.nditer(x0, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        xp = x0.copy()
        xp[i] += h
        xm = x0.copy()
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
        it.iternext()
    return g


def guarded_rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max elementwise |a-b| / max(1, |a|, |b|)."""
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def softmax_row(row: np.ndarray) -> np.ndarray:
    shifted = row - row.max()
    e = np.exp(shifted)
    return e / e.sum()


def cross_entropy_by_rows(logits: np.ndarray, labels, weights) -> float:
    """Per-row scalar softmax cross-entropy, summed term by term."""
    total = 0.0
    for i in range(logits.shape[0]):
        p = softmax_row(logits[i])
        total += float(weights[i]) * -math.log(p[labels[i]])
    return total / logits.shape[0]


def transport_lp(a: np.ndarray, b: np.ndarray) -> float:
    """Optimal-transport W1 between two equal-mass point sets, by LP."""
    m, k = len(a), len(b)
    cost = np.abs(a[:, None] - b[None, :]).ravel()
    a_eq = []
    b_eq = []
    for i in range(m):
        row = np.zeros(m * k)
        row[i * k:(i + 1) * k] = 1.0
        a_eq.append(row)
        b_eq.append(1.0 / m)
    for j in range(k):
        row = np.zeros(m * k)
        row[j::k] = 1.0
        a_eq.append(row)
        b_eq.append(1.0 / k)
    res = linprog(cost, A_eq=np.array(a_eq), b_eq=np.array(b_eq), bounds=(0, None), method="highs")
    assert res.success
    return float(res.fun)


def midpoint_quantiles(values: np.ndarray, q: int) -> np.ndarray:
    """Empirical inverse CDF sampled at midpoint levels (i+0.5)/q."""
    s = np.sort(values)
    idx = np.minimum(((np.arange(q) + 0.5) / q * len(s)).astype(int), len(s) - 1)
    return s[idx]


def scalar_adam_trace(
    grad_fn, w0: float, lr: float, steps: int,
    beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
) -> list[float]:
    """Hand-rolled scalar Adam; returns the parameter after each step."""
    w, m, v = w0, 0.0, 0.0
    out = []
    for t in range(1, steps + 1):
        g = grad_fn(w)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        w = w - lr * mhat / (math.sqrt(vhat) + eps)
        out.append(w)
    return out
