"""Minimal parameter containers on top of the tensor core."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .core import RunningStats, Tensor, batch_norm, conv2d, default_dtype, relu


class Module:
    """Attribute-walking container, enough for naming and checkpoints."""

    training = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + name, val
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, val in vars(self).items():
            if isinstance(val, RunningStats):
                yield f"{prefix}{name}.running_mean", val.mean
                yield f"{prefix}{name}.running_var", val.var
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state(self) -> list[tuple[str, np.ndarray]]:
        """Ordered (name, array) pairs: parameters, then running statistics."""
        return [(n, p.data) for n, p in self.named_parameters()] + list(self.named_buffers())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True):
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def _param(arr) -> Tensor:
    return Tensor(np.asarray(arr, dtype=default_dtype()), requires_grad=True)


class Conv2d(Module):
    def __init__(self, cin, cout, k=1, stride=1, dilation=1, rng=None, zero_init=False, init_scale=1.0):
        self.stride, self.dilation = stride, dilation
        self.padding = dilation * (k - 1) // 2
        shape = (cout, cin, k, k)
        if zero_init:
            w = np.zeros(shape)
        else:
            bound = init_scale * math.sqrt(6.0 / (cin * k * k))
            w = rng.uniform(-bound, bound, size=shape)
        self.weight = _param(w)
        self.bias = _param(np.zeros(cout))

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


class BatchNorm2d(Module):
    def __init__(self, channels, eps=1e-5, momentum=0.1):
        self.eps, self.momentum = eps, momentum
        self.gamma = _param(np.ones(channels))
        self.beta = _param(np.zeros(channels))
        self.stats = RunningStats.fresh(channels, dtype=default_dtype())

    def __call__(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.stats, self.training, self.eps, self.momentum)


class ConvBNReLU(Module):
    def __init__(self, cin, cout, k=3, stride=1, dilation=1, rng=None):
        self.conv = Conv2d(cin, cout, k, stride, dilation, rng=rng)
        self.bn = BatchNorm2d(cout)

    def __call__(self, x: Tensor) -> Tensor:
        return relu(self.bn(self.conv(x)))


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def __call__(self, x):
        for layer in self.layers:
            x = layer(x)
        return x
