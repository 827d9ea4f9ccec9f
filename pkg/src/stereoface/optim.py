"""SGD with momentum and decoupled-per-tensor weight decay, plus the step schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError
from .tensor import Tensor


def lr_at_epoch(epoch: int, base_lr: float, drop_every: int, factor: float) -> float:
    """Step schedule: ``base_lr * factor ** (epoch // drop_every)``."""
    if epoch < 0:
        raise ConfigError("epoch must be non-negative")
    return base_lr * factor ** (epoch // drop_every)


@dataclass
class OptimState:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")


def sgd_step(params, state: OptimState) -> None:
    """Update ``params`` in place and clear their gradients.

    ``params`` is an iterable of ``(name, tensor, decay)`` triples; ``decay``
    selects whether weight decay applies to that tensor.

        v <- momentum * v + grad + weight_decay * param
        param <- param - lr * v
    """
    params = list(params)
    missing = [name for name, t, _ in params if t.grad is None]
    if missing:
        raise NumericError(f"sgd_step: no gradient for {', '.join(missing[:5])}")
    for name, t, decay in params:
        g = t.grad
        if not np.all(np.isfinite(g)):
            raise NumericError(f"sgd_step: non-finite gradient in {name}")
        if decay and state.weight_decay:
            g = g + state.weight_decay * t.data
        v = state.buffers.get(name)
        if v is None:
            v = np.zeros_like(t.data)
        elif v.shape != t.data.shape:
            raise NumericError(f"momentum buffer for {name} has shape {v.shape}, param {t.shape}")
        if state.momentum:
            v = state.momentum * v + g
        else:
            v = g.astype(t.data.dtype, copy=True)
        state.buffers[name] = v
        t.data = (t.data - state.lr * v).astype(t.data.dtype)
        t.grad = None


def clip_grad_norm(params, max_norm: float) -> float:
    """Rescale gradients so their global L2 norm is at most ``max_norm``; returns the norm before clipping."""
    grads = [t.grad for _, t, _ in params if t.grad is not None]
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))
    if norm > max_norm:
        scale = max_norm / norm
        for _, t, _ in params:
            if t.grad is not None:
                t.grad = (t.grad * scale).astype(t.grad.dtype)
    return norm


def epoch_lrs(epochs: int, base_lr: float, drop_every: int, factor: float) -> list[float]:
    return [lr_at_epoch(e, base_lr, drop_every, factor) for e in range(epochs)]
