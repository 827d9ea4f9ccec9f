"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, precision


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, eps: float = 1e-3) -> np.ndarray:
    grad = np.zeros_like(t.data, dtype=np.float64)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = fn().item()
        flat[i] = orig - eps
        down = fn().item()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-3) -> float:
    """Worst relative error between backprop and finite differences over ``inputs``.

    ``fn`` must rebuild the scalar loss from the current values of
    ``inputs``.  Runs in float64.
    """
    with precision(np.float64):
        for t in inputs:
            t.data = t.data.astype(np.float64)
            t.grad = None
        loss = fn()
        loss.backward()
        analytic = [t.grad.copy() for t in inputs]
        worst = 0.0
        for t, a in zip(inputs, analytic):
            worst = max(worst, max_relative_error(a, numerical_grad(fn, t, eps)))
    return worst
