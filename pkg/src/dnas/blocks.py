"""Candidate block vocabulary for the layer-wise search.

Nine kinds: eight inverted-bottleneck variants spanning expansion {1,3,6},
kernel {3,5}, and group {1,2} settings, plus a parameter-free identity
("skip") that removes the layer. Each bottleneck runs

    1x1 expand conv (grouped, + shuffle if grouped) -> BN -> ReLU
    KxK depthwise conv (stride)                     -> BN -> ReLU
    1x1 project conv (grouped, + shuffle if grouped)-> BN

with a residual add when the output shape matches the input shape. ReLU
never follows the projection. Batch norm follows every convolution and
convolutions carry no bias.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .errors import ConfigurationError
from .nn import BatchNorm2d, Conv2d, Module

# kind -> (expansion, kernel, groups); skip is handled separately.
BOTTLENECK_KINDS = {
    "k3_e1": (1, 3, 1),
    "k3_e1_g2": (1, 3, 2),
    "k3_e3": (3, 3, 1),
    "k3_e6": (6, 3, 1),
    "k5_e1": (1, 5, 1),
    "k5_e1_g2": (1, 5, 2),
    "k5_e3": (3, 5, 1),
    "k5_e6": (6, 5, 1),
}

SKIP = "skip"
BLOCK_KINDS = (*BOTTLENECK_KINDS, SKIP)


@dataclass(frozen=True)
class BlockConfig:
    """One candidate operator instance: kind plus its channel/stride context."""

    kind: str
    c_in: int
    c_out: int
    stride: int

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ConfigurationError(f"unknown block kind {self.kind!r}")
        if self.stride not in (1, 2):
            raise ConfigurationError(f"block stride must be 1 or 2, got {self.stride}")
        if self.kind == SKIP:
            if self.stride != 1 or self.c_in != self.c_out:
                raise ConfigurationError(
                    f"skip block requires stride 1 and c_in == c_out, got "
                    f"stride={self.stride}, {self.c_in}->{self.c_out}"
                )
        else:
            e, _, g = BOTTLENECK_KINDS[self.kind]
            expanded = e * self.c_in
            if self.c_in % g or expanded % g or self.c_out % g:
                raise ConfigurationError(
                    f"{self.kind}: groups={g} must divide c_in={self.c_in}, "
                    f"expanded={expanded}, and c_out={self.c_out}"
                )

    @property
    def expansion(self):
        return 0 if self.kind == SKIP else BOTTLENECK_KINDS[self.kind][0]

    @property
    def kernel(self):
        return 0 if self.kind == SKIP else BOTTLENECK_KINDS[self.kind][1]

    @property
    def groups(self):
        return 0 if self.kind == SKIP else BOTTLENECK_KINDS[self.kind][2]

    @property
    def has_residual(self):
        return self.kind != SKIP and self.stride == 1 and self.c_in == self.c_out


class SkipBlock(Module):
    """Identity: feeds the input straight through, zero parameters."""

    def __init__(self, cfg: BlockConfig):
        super().__init__()
        self.cfg = cfg

    def forward(self, x):
        return x


class BottleneckBlock(Module):
    def __init__(self, cfg: BlockConfig, rng):
        super().__init__()
        self.cfg = cfg
        e, k, g = BOTTLENECK_KINDS[cfg.kind]
        expanded = e * cfg.c_in
        self.expand = Conv2d(cfg.c_in, expanded, 1, stride=1, groups=g, rng=rng)
        self.expand_bn = BatchNorm2d(expanded)
        self.depthwise = Conv2d(expanded, expanded, k, stride=cfg.stride, groups=expanded, rng=rng)
        self.depthwise_bn = BatchNorm2d(expanded)
        self.project = Conv2d(expanded, cfg.c_out, 1, stride=1, groups=g, rng=rng)
        self.project_bn = BatchNorm2d(cfg.c_out)

    def forward(self, x):
        g = self.cfg.groups
        out = self.expand(x)
        if g > 1:
            out = T.channel_shuffle(out, g)
        out = T.relu(self.expand_bn(out))
        out = T.relu(self.depthwise_bn(self.depthwise(out)))
        out = self.project(out)
        if g > 1:
            out = T.channel_shuffle(out, g)
        out = self.project_bn(out)
        if self.cfg.has_residual:
            out = T.add(out, x)
        return out


def build_block(cfg: BlockConfig, rng) -> Module:
    if cfg.kind == SKIP:
        return SkipBlock(cfg)
    return BottleneckBlock(cfg, rng)


def block_param_count(cfg: BlockConfig) -> int:
    """Trainable parameter count from the config alone (convs + BN affine)."""
    if cfg.kind == SKIP:
        return 0
    e, k, g = BOTTLENECK_KINDS[cfg.kind]
    expanded = e * cfg.c_in
    expand_w = expanded * (cfg.c_in // g)
    depthwise_w = expanded * k * k
    project_w = cfg.c_out * (expanded // g)
    bn = 2 * expanded + 2 * expanded + 2 * cfg.c_out
    return expand_w + depthwise_w + project_w + bn


def block_flops(cfg: BlockConfig, input_hw) -> int:
    """Multiply-add count of the three convolutions at a given resolution."""
    if cfg.kind == SKIP:
        return 0
    e, k, g = BOTTLENECK_KINDS[cfg.kind]
    h, w = input_hw
    ho, wo = h // cfg.stride, w // cfg.stride
    expanded = e * cfg.c_in
    expand = expanded * (cfg.c_in // g) * h * w
    depthwise = expanded * k * k * ho * wo
    project = cfg.c_out * (expanded // g) * ho * wo
    return expand + depthwise + project
