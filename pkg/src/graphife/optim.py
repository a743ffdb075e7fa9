"""Adam optimizer over named parameter groups."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import NumericsError


@dataclass
class AdamState:
    """First/second moment estimates for one parameter group."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], weight_decay: float = 0.0) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            weight_decay=weight_decay,
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> dict[str, np.ndarray]:
    """One Adam update with bias correction; returns the new parameter dict.

    Moments in ``state`` are updated in place and must cover exactly the
    same names as ``params``. A missing gradient is treated as zero.
    """
    if lr <= 0:
        raise ValueError(f"adam_step: lr must be positive, got {lr}")
    if set(params) != set(state.m):
        raise KeyError("adam_step: parameter names do not match optimizer state")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    out: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if not np.isfinite(g).all():
            raise NumericsError(f"adam_step: non-finite gradient for parameter '{name}'")
        if g.shape != p.shape:
            raise ValueError(f"adam_step: gradient shape {g.shape} != parameter shape {p.shape} for '{name}'")
        if state.weight_decay:
            g = g + state.weight_decay * p
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        out[name] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return out
