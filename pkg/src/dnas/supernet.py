"""Stochastic supernet: parallel candidate blocks mixed by relaxed masks.

Each searchable layer holds every candidate block with its own independent
weights plus a trainable logit vector theta_l. A forward pass draws one
standard-Gumbel noise vector per layer, forms the temperature-tau softmax
mask over (theta + noise), executes every candidate, and mixes the outputs
by the mask. Layers sample independently. As tau -> 0 the mask collapses to
the categorical sample argmax(theta + noise), whose distribution is exactly
softmax(theta); as tau grows the mask flattens toward uniform.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocks import build_block
from .errors import ConfigurationError
from .nn import Module
from .space import ArchDescriptor, Classifier, HeadConv, SearchSpace, Stem
from .tensor import Tensor

GUMBEL_U_LO = 1e-20
GUMBEL_U_HI = 1.0 - 1e-7


def layer_probs(theta_l: np.ndarray) -> np.ndarray:
    """Candidate sampling distribution for one layer: softmax(theta_l)."""
    z = np.asarray(theta_l, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def gumbel_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    u = np.clip(rng.random(n), GUMBEL_U_LO, GUMBEL_U_HI)
    return -np.log(-np.log(u))


def sample_gumbel_mask(theta_l: Tensor, tau: float, rng=None, noise=None) -> tuple:
    """One relaxed mask row: softmax((theta + g) / tau), differentiable in theta.

    Returns (mask tensor, noise draw); pass ``noise`` back in to freeze the
    draw (gradient checks, reproducing a forward).
    """
    if tau <= 0:
        raise ConfigurationError(f"gumbel temperature must be positive, got {tau}")
    n = theta_l.data.shape[0]
    if noise is None:
        if rng is None:
            raise ConfigurationError("sample_gumbel_mask needs an rng or a fixed noise draw")
        noise = gumbel_noise(n, rng)
    shifted = T.mul_const(T.add(theta_l, T.as_const(noise.astype(np.float32))), 1.0 / tau)
    return T.softmax_vec(shifted), noise


@dataclass
class GumbelMasks:
    """Mask rows of one forward pass, with the draws that produced them."""

    tensors: list
    noise: list
    tau: float

    def values(self):
        return [t.data.copy() for t in self.tensors]


class Supernet(Module):
    def __init__(self, space: SearchSpace, rng):
        super().__init__()
        self.space = space
        self.stem = Stem(space, rng)
        self.layers = [
            [build_block(cand, rng) for cand in slot.candidates] for slot in space.slots
        ]
        self.head = HeadConv(space, rng)
        self.classifier = Classifier(space, rng)

    def forward(self, x: Tensor, theta: "ThetaParams", tau: float, rng=None, noise=None):
        """Relaxed forward pass; returns (logits, GumbelMasks)."""
        if noise is not None and len(noise) != len(self.layers):
            raise ConfigurationError(
                f"{len(noise)} noise rows for {len(self.layers)} layers"
            )
        out = self.stem(x)
        mask_rows = []
        draws = []
        for l, blocks in enumerate(self.layers):
            mask, g = sample_gumbel_mask(
                theta.layers[l], tau, rng=rng, noise=None if noise is None else noise[l]
            )
            if not np.all(np.isfinite(mask.data)):
                raise FloatingPointError(f"non-finite mask at layer {l} (tau={tau})")
            candidate_outs = [block(out) for block in blocks]
            out = T.weighted_sum(candidate_outs, mask)
            if not np.all(np.isfinite(out.data)):
                raise FloatingPointError(f"non-finite activation after layer {l}")
            mask_rows.append(mask)
            draws.append(g)
        logits = self.classifier(self.head(out))
        return logits, GumbelMasks(mask_rows, draws, tau)


class ThetaParams:
    """Per-layer architecture logits; zero-initialized (uniform prior)."""

    def __init__(self, space: SearchSpace):
        self.space = space
        self.layers = [
            Tensor(np.zeros(len(slot.candidates), dtype=np.float32), requires_grad=True)
            for slot in space.slots
        ]

    def named_parameters(self):
        return [(f"theta.{i}", t) for i, t in enumerate(self.layers)]

    def probs(self):
        return [layer_probs(t.data) for t in self.layers]

    def snapshot(self):
        return [t.data.copy() for t in self.layers]

    def load_values(self, values):
        if len(values) != len(self.layers):
            raise ConfigurationError(
                f"{len(values)} theta rows for {len(self.layers)} layers"
            )
        for t, v in zip(self.layers, values):
            arr = np.asarray(v, dtype=np.float32)
            if arr.shape != t.data.shape:
                raise ConfigurationError(
                    f"theta row shape {arr.shape} does not match {t.data.shape}"
                )
            t.data[:] = arr


def sample_arch(space: SearchSpace, theta: ThetaParams, rng: np.random.Generator) -> ArchDescriptor:
    """Independent categorical draw per layer from softmax(theta_l)."""
    choices = [int(rng.choice(len(t.data), p=layer_probs(t.data))) for t in theta.layers]
    return ArchDescriptor(space.config_hash, choices)


def arch_log_prob(theta: ThetaParams, arch: ArchDescriptor) -> float:
    total = 0.0
    for t, choice in zip(theta.layers, arch.choices):
        total += float(np.log(layer_probs(t.data)[choice]))
    return total


def arch_entropy(theta: ThetaParams) -> float:
    """Sum over layers of the candidate-distribution entropy, in nats."""
    total = 0.0
    for t in theta.layers:
        p = layer_probs(t.data)
        total += float(-(p * np.log(p)).sum())
    return total


# -- checkpointing ------------------------------------------------------------


def save_theta(path, theta: ThetaParams, tau: float, epoch: int, rng_state: dict):
    obj = {
        "space_config_hash": theta.space.config_hash,
        "theta": {str(i): [float(v) for v in t.data] for i, t in enumerate(theta.layers)},
        "tau": tau,
        "epoch": epoch,
        "rng_state": rng_state,
    }
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def load_theta(path, space: SearchSpace) -> tuple:
    """Returns (ThetaParams, checkpoint dict); verifies the space hash."""
    with open(path) as fh:
        obj = json.load(fh)
    if obj["space_config_hash"] != space.config_hash:
        raise ConfigurationError(
            f"theta checkpoint was trained for space {obj['space_config_hash']}, "
            f"not {space.config_hash}"
        )
    theta = ThetaParams(space)
    rows = [obj["theta"][str(i)] for i in range(len(space.slots))]
    theta.load_values(rows)
    return theta, obj


def copy_parameters(src: Module, dst: Module):
    """Copy parameters and batch-norm running stats between twin structures."""
    from .nn import BatchNorm2d

    src_params = src.named_parameters()
    dst_params = dst.named_parameters()
    if [n for n, _ in src_params] != [n for n, _ in dst_params]:
        raise ConfigurationError("modules do not share a parameter structure")
    for (_, a), (_, b) in zip(src_params, dst_params):
        b.data[:] = a.data
    src_bns = [m for m in src.modules() if isinstance(m, BatchNorm2d)]
    dst_bns = [m for m in dst.modules() if isinstance(m, BatchNorm2d)]
    for a, b in zip(src_bns, dst_bns):
        b.copy_stats_from(a)


def extract_network(supernet: Supernet, arch: ArchDescriptor, rng) -> "Module":
    """Materialize one path of the supernet, inheriting its weights."""
    from .space import Network

    net = Network(supernet.space, arch, rng)
    copy_parameters(supernet.stem, net.stem)
    for layer_blocks, choice, block in zip(supernet.layers, arch.choices, net.blocks):
        copy_parameters(layer_blocks[choice], block)
    copy_parameters(supernet.head, net.head)
    copy_parameters(supernet.classifier, net.classifier)
    return net
