"""Parameter containers, basic layers and the Adam optimizer."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .tensor import Tensor


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator (PCG64) used for every random initialisation."""
    return np.random.default_rng(seed)


def param(values: np.ndarray) -> Tensor:
    return Tensor(np.asarray(values, dtype=T.default_dtype()), requires_grad=True)


def buffer(values: np.ndarray) -> Tensor:
    return Tensor(np.asarray(values, dtype=T.default_dtype()))


class Module:
    """Attribute-discovered tensors and submodules, plus a train/eval flag."""

    training: bool = True

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_tensors(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_tensors(f"{full}.{i}.")
                    elif isinstance(item, Tensor):
                        yield f"{full}.{i}", item

    def modules(self) -> Iterator["Module"]:
        yield self
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors() if t.requires_grad]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.named_tensors()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_tensors())
        missing = sorted(set(own) - set(state))
        if missing:
            raise KeyError(f"missing tensors in state: {missing[:5]}")
        for name, t in own.items():
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise DimensionError(f"{name}: expected {t.shape}, got {arr.shape}")
            t.data = arr.astype(t.dtype)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, rng, stride=1, padding=None, bias=True, zero_init=False):
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        fan_in = cin * kh * kw
        bound = 1.0 / math.sqrt(fan_in)
        w = np.zeros((cout, cin, kh, kw)) if zero_init else rng.uniform(-bound, bound, (cout, cin, kh, kw))
        self.weight = param(w)
        self.bias = param(np.zeros(cout) if zero_init else rng.uniform(-bound, bound, cout)) if bias else None
        self.stride = stride
        self.padding = (kh // 2, kw // 2) if padding is None else padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, cin, cout, rng, bias=True):
        bound = 1.0 / math.sqrt(cin)
        self.weight = param(rng.uniform(-bound, bound, (cin, cout)))
        self.bias = param(rng.uniform(-bound, bound, cout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.weight = param(np.ones(dim))
        self.bias = param(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class BatchNorm(Module):
    """Per-channel normalisation; batch statistics in training, running ones in eval."""

    def __init__(self, channels: int, affine: bool = True, momentum: float = 0.1, eps: float = 1e-5):
        self.weight = param(np.ones(channels)) if affine else None
        self.bias = param(np.zeros(channels)) if affine else None
        self.running_mean = buffer(np.zeros(channels))
        self.running_var = buffer(np.ones(channels))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        if not self.training:
            return T.batch_norm(x, self.weight, self.bias, self.running_mean.data, self.running_var.data, self.eps)
        stats: list = []
        out = T.batch_norm(x, self.weight, self.bias, eps=self.eps, stats=stats)
        count = x.size // x.shape[1]
        if count > 1:
            m = self.momentum
            mu, var = stats[0]
            var = var * count / (count - 1)
            self.running_mean.data = ((1 - m) * self.running_mean.data + m * mu).astype(self.running_mean.dtype)
            self.running_var.data = ((1 - m) * self.running_var.data + m * var).astype(self.running_var.dtype)
        return out


class Adam:
    """Adam with L2 weight decay folded into the gradient."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype)
