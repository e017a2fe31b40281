"""Central finite-difference gradient checks for tape-differentiated functions."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape, Tensor, zero_grads


def analytic_grads(fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    zero_grads(params)
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def numeric_grads(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> list[np.ndarray]:
    out = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            gf[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def relative_error(a: np.ndarray, n: np.ndarray) -> float:
    """max over components of |analytic - numeric| / max(1, |analytic|)."""
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float((np.abs(a - n) / np.maximum(1.0, np.abs(a))).max())


def check_gradients(fn, params, h: float = 1e-5) -> dict[str, float]:
    """Worst relative error per parameter (keyed by name, else position)."""
    a = analytic_grads(fn, params)
    n = numeric_grads(fn, params, h)
    return {(p.name or str(i)): relative_error(ga, gn) for i, (p, ga, gn) in enumerate(zip(params, a, n))}
