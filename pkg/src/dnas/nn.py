"""Parameterized layers on top of the tensor library.

A :class:`Module` tracks parameters through attribute assignment (including
lists of submodules) and carries a train/eval flag for batch norm and
dropout. Weight initialization draws from an explicit generator so module
construction is reproducible.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigurationError
from .tensor import Tensor


def _walk_value(value, prefix):
    """Yield (name, parameter) pairs from tensors, modules, nested lists."""
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield prefix, value
    elif isinstance(value, Module):
        yield from value._walk(f"{prefix}.")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk_value(item, f"{prefix}.{i}")


def _child_modules(value):
    if isinstance(value, Module):
        yield from value.modules()
    elif isinstance(value, (list, tuple)):
        for item in value:
            yield from _child_modules(item)


class Module:
    def __init__(self):
        self.training = True

    def _walk(self, prefix=""):
        for name, value in vars(self).items():
            yield from _walk_value(value, f"{prefix}{name}")

    def parameters(self):
        return [p for _, p in self._walk()]

    def named_parameters(self):
        return list(self._walk())

    def modules(self):
        yield self
        for value in vars(self).values():
            yield from _child_modules(value)

    def train(self):
        for m in self.modules():
            m.training = True
        return self

    def eval(self):
        for m in self.modules():
            m.training = False
        return self

    def param_count(self):
        return sum(p.data.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def he_normal(rng: np.random.Generator, shape, fan_in) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


class Conv2d(Module):
    """Grouped same-padding convolution, He-normal init, no bias."""

    def __init__(self, c_in, c_out, kernel_size, stride=1, groups=1, rng=None):
        super().__init__()
        if c_in % groups or c_out % groups:
            raise ConfigurationError(
                f"Conv2d groups={groups} must divide c_in={c_in} and c_out={c_out}"
            )
        rng = rng if rng is not None else np.random.default_rng()
        self.stride = stride
        self.groups = groups
        self.kernel_size = kernel_size
        self.padding = (kernel_size - 1) // 2
        fan_in = (c_in // groups) * kernel_size * kernel_size
        self.weight = Tensor(
            he_normal(rng, (c_out, c_in // groups, kernel_size, kernel_size), fan_in),
            requires_grad=True,
        )

    def forward(self, x):
        return T.conv2d(x, self.weight, self.stride, self.padding, self.groups)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        return T.batch_norm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            self.training,
            self.momentum,
            self.eps,
        )

    def copy_stats_from(self, other: "BatchNorm2d"):
        self.running_mean[:] = other.running_mean
        self.running_var[:] = other.running_var


class Linear(Module):
    def __init__(self, d_in, d_out, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng()
        self.weight = Tensor(he_normal(rng, (d_in, d_out), d_in), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out, dtype=np.float32), requires_grad=True)

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class Dropout(Module):
    """Applies only in train mode; needs the caller's generator per forward."""

    def __init__(self, p):
        super().__init__()
        self.p = p

    def forward(self, x, rng=None):
        if not self.training or self.p == 0.0:
            return x
        if rng is None:
            raise ConfigurationError("Dropout in train mode requires an rng")
        return T.dropout(x, self.p, rng)
