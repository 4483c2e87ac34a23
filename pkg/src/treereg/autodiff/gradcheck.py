"""Central finite-difference checks for the autodiff kernel."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||), zero when both vanish."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < 1e-300:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def numeric_grad(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = g.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn().data)
            flat[i] = orig - h
            fm = float(fn().data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
    return g


def analytic_grads(fn: Callable[[], Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    for x in inputs:
        x.requires_grad = True
        x.grad = None
    with Tape() as tape:
        out = fn()
    backward(tape, out)
    return [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]


def check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-6) -> float:
    """Largest relative error over ``inputs`` between tape and finite differences."""
    grads = analytic_grads(fn, inputs)
    return max(relative_error(g, numeric_grad(fn, x, h)) for g, x in zip(grads, inputs))
