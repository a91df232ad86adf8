"""SGD with momentum, Adam, and the cosine learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigurationError, DivergenceError


def cosine_lr(epoch: int, total_epochs: int, lr0: float) -> float:
    """Half-cosine decay from lr0 at epoch 0 to 0 at total_epochs."""
    if not 0 <= epoch <= total_epochs:
        raise ConfigurationError(f"epoch {epoch} outside [0, {total_epochs}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


class _Optimizer:
    def __init__(self, named_params):
        # (name, tensor) pairs; names make divergence diagnostics actionable
        self.params = list(named_params)

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()

    def _check_grad(self, name, grad):
        if not np.all(np.isfinite(grad)):
            raise DivergenceError(f"non-finite gradient for parameter {name!r}")


class SgdMomentum(_Optimizer):
    """v <- momentum*v + grad + wd*param;  param <- param - lr*v."""

    def __init__(self, named_params, lr, momentum=0.9, weight_decay=0.0):
        super().__init__(named_params)
        if lr <= 0:
            raise ConfigurationError(f"learning rate must be positive, got {lr}")
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for _, p in self.params]

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        if lr <= 0:
            raise ConfigurationError(f"learning rate must be positive, got {lr}")
        for (name, p), v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            self._check_grad(name, p.grad)
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= (lr * v).astype(p.data.dtype)


class AdamState(_Optimizer):
    """Bias-corrected Adam; weight decay enters through the gradient."""

    def __init__(self, named_params, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        super().__init__(named_params)
        if lr <= 0:
            raise ConfigurationError(f"learning rate must be positive, got {lr}")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]
        self.step_count = 0

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        if lr <= 0:
            raise ConfigurationError(f"learning rate must be positive, got {lr}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for (name, p), m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            self._check_grad(name, p.grad)
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= update.astype(p.data.dtype)
