"""Parameter containers built on the tensor ops."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Minimal parameter container.

    Every `Tensor` attribute is state.  Names listed in ``buffers`` are
    non-trainable state (running statistics); all other tensors are
    parameters, trainable unless frozen.  Sub-modules and lists of
    sub-modules are traversed in attribute order so names are stable.
    """

    buffers: tuple[str, ...] = ()
    training: bool = True

    def named_tensors(self, prefix: str = ""):
        """Yield ``(name, tensor, is_buffer)`` for all state, frozen or not."""
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield name, val, key in self.buffers
            elif isinstance(val, Module):
                yield from val.named_tensors(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_tensors(f"{name}.{i}.")

    def modules(self):
        yield self
        for val in vars(self).values():
            items = val if isinstance(val, (list, tuple)) else (val,)
            for item in items:
                if isinstance(item, Module):
                    yield from item.modules()

    def named_parameters(self, prefix: str = ""):
        for name, t, buf in self.named_tensors(prefix):
            if not buf and t.requires_grad:
                yield name, t

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def decay_flags(self, prefix: str = ""):
        """Yield ``(name, tensor, decay)``; slopes, biases and norm scales are not decayed."""
        for name, t in self.named_parameters(prefix):
            leaf = name.rsplit(".", 1)[-1]
            yield name, t, leaf not in ("slope", "bias", "gamma", "beta")

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t, _ in self.named_tensors()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = {name: t for name, t, _ in self.named_tensors()}
        if set(own) != set(state):
            extra = sorted(set(state) - set(own))
            lacking = sorted(set(own) - set(state))
            raise KeyError(f"state mismatch: unexpected {extra[:3]}, missing {lacking[:3]}")
        for name, t in own.items():
            if state[name].shape != t.shape:
                raise ValueError(f"{name}: checkpoint shape {state[name].shape} vs {t.shape}")
            t.data = np.array(state[name], dtype=t.data.dtype)

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def freeze(self) -> None:
        for _, t, _ in self.named_tensors():
            t.requires_grad = False
            t.grad = None
        self.eval()

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None


def he_uniform(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    bound = gain * np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    def __init__(self, rng, cin: int, cout: int, k: int = 3, stride: int = 1,
                 pad: int | None = None, gain: float = 1.0):
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        self.weight = Tensor(he_uniform(rng, (cout, cin, k, k), cin * k * k, gain), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class Linear(Module):
    def __init__(self, rng, din: int, dout: int, bias: bool = True):
        self.weight = Tensor(he_uniform(rng, (din, dout), din), requires_grad=True)
        self.bias = Tensor(np.zeros(dout), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class PReLU(Module):
    def __init__(self, channels: int, init: float = 0.25):
        self.slope = Tensor(np.full(channels, init), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.prelu(x, self.slope)


class BatchNorm(Module):
    """Per-channel batch normalisation over axis 1 with running statistics."""

    buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.momentum, self.eps = momentum, eps
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = Tensor(np.zeros(channels))
        self.running_var = Tensor(np.ones(channels))

    def __call__(self, x: Tensor) -> Tensor:
        if not self.training:
            return T.batch_norm(x, self.gamma, self.beta, self.running_mean.data, self.running_var.data,
                                self.eps, batch_stats=False)
        axes = (0,) + tuple(range(2, x.data.ndim))
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if T.grad_enabled():
            n = x.data.size // x.shape[1]
            m = self.momentum
            self.running_mean.data = ((1 - m) * self.running_mean.data + m * mean).astype(mean.dtype)
            self.running_var.data = ((1 - m) * self.running_var.data + m * var * n / max(n - 1, 1)).astype(var.dtype)
        return T.batch_norm(x, self.gamma, self.beta, mean, var, self.eps, batch_stats=True)
