"""Macro-architecture, per-layer candidate slots, and architecture descriptors.

A JSON config drives everything::

    {
      "input_resolution": 32,
      "channel_scale": 1.0,
      "num_classes": 10,
      "stages": [
        {"f": 8,  "n": 1, "s": 2, "searchable": false},   # fixed 3x3 stem
        {"f": 8,  "n": 1, "s": 1, "searchable": true},
        ...
      ],
      "head_width": 128
    }

The first stage is the fixed stem convolution; every later stage is
searchable and expands into ``n`` layer slots (the stage stride applies to
the first slot only). The fixed head (1x1 conv, global average pool,
classifier) is implicit. ``channel_scale`` multiplies stage widths, rounding
to the nearest multiple of 2.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .blocks import (
    BOTTLENECK_KINDS,
    SKIP,
    BlockConfig,
    block_flops,
    block_param_count,
    build_block,
)
from .errors import ConfigurationError
from .nn import BatchNorm2d, Conv2d, Dropout, Linear, Module

STEM_KIND = "stem"
HEAD_CONV_KIND = "head_conv"
CLASSIFIER_KIND = "classifier"
FIXED_KINDS = (STEM_KIND, HEAD_CONV_KIND, CLASSIFIER_KIND)


@dataclass(frozen=True)
class StageSpec:
    f: int
    n: int
    s: int
    searchable: bool


@dataclass(frozen=True)
class MacroSpec:
    input_resolution: int
    channel_scale: float
    num_classes: int
    stages: tuple
    head_width: int


@dataclass(frozen=True)
class LayerSlot:
    """One searchable position: its shape context and legal candidates."""

    index: int
    c_in: int
    c_out: int
    stride: int
    h: int
    w: int
    candidates: tuple

    @property
    def kinds(self):
        return tuple(c.kind for c in self.candidates)


@dataclass
class ArchDescriptor:
    """A concrete architecture: one candidate index per searchable slot."""

    space_hash: str
    choices: list

    def to_json_dict(self, space: "SearchSpace") -> dict:
        return {
            "space_config_hash": self.space_hash,
            "choices": [space.slots[l].candidates[i].kind for l, i in enumerate(self.choices)],
        }

    @classmethod
    def from_json_dict(cls, obj: dict, space: "SearchSpace") -> "ArchDescriptor":
        kinds = obj["choices"]
        if len(kinds) != len(space.slots):
            raise ConfigurationError(
                f"descriptor has {len(kinds)} choices for {len(space.slots)} slots"
            )
        choices = []
        for slot, kind in zip(space.slots, kinds):
            if kind not in slot.kinds:
                raise ConfigurationError(
                    f"layer {slot.index}: kind {kind!r} not a candidate (legal: {slot.kinds})"
                )
            choices.append(slot.kinds.index(kind))
        return cls(space_hash=obj["space_config_hash"], choices=choices)


def _scale_channels(f: int, scale: float) -> int:
    if scale == 1.0:
        return f
    return max(2, int(round(f * scale / 2.0)) * 2)


def config_hash(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _candidate_list(c_in, c_out, stride) -> tuple:
    cands = [BlockConfig(kind, c_in, c_out, stride) for kind in BOTTLENECK_KINDS]
    if stride == 1 and c_in == c_out:
        cands.append(BlockConfig(SKIP, c_in, c_out, stride))
    return tuple(cands)


class SearchSpace:
    def __init__(self, macro: MacroSpec, slots, config: dict):
        self.macro = macro
        self.slots = tuple(slots)
        self.config = config
        self.config_hash = config_hash(config)
        stem = macro.stages[0]
        self.stem_channels = _scale_channels(stem.f, macro.channel_scale)
        self.stem_stride = stem.s
        self.final_hw = (slots[-1].h // slots[-1].stride, slots[-1].w // slots[-1].stride)
        self.final_channels = slots[-1].c_out

    @property
    def input_resolution(self):
        return self.macro.input_resolution

    @property
    def num_classes(self):
        return self.macro.num_classes

    @property
    def head_width(self):
        return self.macro.head_width

    def log10_size(self) -> float:
        return float(sum(np.log10(len(s.candidates)) for s in self.slots))

    def random_arch(self, rng: np.random.Generator) -> ArchDescriptor:
        choices = [int(rng.integers(len(s.candidates))) for s in self.slots]
        return ArchDescriptor(self.config_hash, choices)

    def fixed_op_params(self) -> int:
        stem_c = self.stem_channels
        hw = self.head_width
        stem = stem_c * 3 * 3 * 3 + 2 * stem_c
        head = hw * self.final_channels + 2 * hw
        classifier = hw * self.num_classes + self.num_classes
        return stem + head + classifier

    def fixed_op_flops(self) -> int:
        res = self.macro.input_resolution
        stem_out = res // self.stem_stride
        stem = self.stem_channels * 3 * 9 * stem_out * stem_out
        hf, wf = self.final_hw
        head = self.head_width * self.final_channels * hf * wf
        classifier = self.head_width * self.num_classes
        return stem + head + classifier


def build_space(config: dict) -> SearchSpace:
    """Expand a config into a SearchSpace; pure function of the config."""
    required = {"input_resolution", "channel_scale", "num_classes", "stages", "head_width"}
    missing = required - set(config)
    if missing:
        raise ConfigurationError(f"space config missing fields: {sorted(missing)}")
    stages = tuple(
        StageSpec(int(s["f"]), int(s["n"]), int(s["s"]), bool(s["searchable"]))
        for s in config["stages"]
    )
    if not stages or stages[0].searchable:
        raise ConfigurationError("the first stage must be the fixed stem (searchable: false)")
    if not all(s.searchable for s in stages[1:]):
        raise ConfigurationError("only the first stage may be fixed; later stages are searched")
    if len(stages) < 2:
        raise ConfigurationError("config needs at least one searchable stage")
    scale = float(config["channel_scale"])
    if scale <= 0:
        raise ConfigurationError(f"channel_scale must be positive, got {scale}")
    macro = MacroSpec(
        input_resolution=int(config["input_resolution"]),
        channel_scale=scale,
        num_classes=int(config["num_classes"]),
        stages=stages,
        head_width=int(config["head_width"]),
    )

    stride_product = 1
    for s in stages:
        if s.s not in (1, 2):
            raise ConfigurationError(f"stage stride must be 1 or 2, got {s.s}")
        stride_product *= s.s
    if macro.input_resolution % stride_product != 0:
        raise ConfigurationError(
            f"input resolution {macro.input_resolution} not divisible by "
            f"total stride product {stride_product}"
        )

    widths = [_scale_channels(s.f, scale) for s in stages]
    for i, (stage, f) in enumerate(zip(stages, widths)):
        if f % 2 != 0:
            raise ConfigurationError(
                f"stage {i} width {f} (from f={stage.f}, scale={scale}) is not even; "
                f"grouped candidates need even channel counts"
            )

    slots = []
    hw = macro.input_resolution // stages[0].s
    c_prev = widths[0]
    index = 0
    for stage, f in zip(stages[1:], widths[1:]):
        for block_i in range(stage.n):
            stride = stage.s if block_i == 0 else 1
            slots.append(
                LayerSlot(
                    index=index,
                    c_in=c_prev,
                    c_out=f,
                    stride=stride,
                    h=hw,
                    w=hw,
                    candidates=_candidate_list(c_prev, f, stride),
                )
            )
            hw //= stride
            c_prev = f
            index += 1
    return SearchSpace(macro, slots, config)


def validate_arch(space: SearchSpace, arch: ArchDescriptor):
    """Return a list of (layer, reason); empty means the descriptor is valid."""
    problems = []
    if arch.space_hash != space.config_hash:
        problems.append((-1, f"space hash {arch.space_hash} != {space.config_hash}"))
    if len(arch.choices) != len(space.slots):
        problems.append((-1, f"{len(arch.choices)} choices for {len(space.slots)} slots"))
        return problems
    for slot, choice in zip(space.slots, arch.choices):
        if not 0 <= choice < len(slot.candidates):
            problems.append(
                (slot.index, f"choice index {choice} out of range [0, {len(slot.candidates)})")
            )
    return problems


# -- fixed operators and materialized networks ------------------------------


class Stem(Module):
    def __init__(self, space: SearchSpace, rng):
        super().__init__()
        self.conv = Conv2d(3, space.stem_channels, 3, stride=space.stem_stride, rng=rng)
        self.bn = BatchNorm2d(space.stem_channels)

    def forward(self, x):
        return T.relu(self.bn(self.conv(x)))


class HeadConv(Module):
    def __init__(self, space: SearchSpace, rng):
        super().__init__()
        self.conv = Conv2d(space.final_channels, space.head_width, 1, rng=rng)
        self.bn = BatchNorm2d(space.head_width)

    def forward(self, x):
        return T.relu(self.bn(self.conv(x)))


class Classifier(Module):
    """Global pool + flatten + fully connected logits."""

    def __init__(self, space: SearchSpace, rng, dropout_p=0.0):
        super().__init__()
        self.dropout = Dropout(dropout_p)
        self.fc = Linear(space.head_width, space.num_classes, rng=rng)

    def forward(self, x, rng=None):
        out = T.flatten2d(T.global_avg_pool(x))
        out = self.dropout(out, rng=rng)
        return self.fc(out)


class Network(Module):
    """A standalone (single-path) network for one architecture descriptor."""

    def __init__(self, space: SearchSpace, arch: ArchDescriptor, rng, dropout_p=0.0):
        super().__init__()
        problems = validate_arch(space, arch)
        if problems:
            raise ConfigurationError(f"invalid architecture: {problems}")
        self.space = space
        self.arch = arch
        self.stem = Stem(space, rng)
        self.blocks = [
            build_block(slot.candidates[i], rng) for slot, i in zip(space.slots, arch.choices)
        ]
        self.head = HeadConv(space, rng)
        self.classifier = Classifier(space, rng, dropout_p)

    def forward(self, x, rng=None):
        out = self.stem(x)
        for block in self.blocks:
            out = block(out)
        out = self.head(out)
        return self.classifier(out, rng=rng)

    def total_flops(self) -> int:
        chosen = (
            block_flops(slot.candidates[i], (slot.h, slot.w))
            for slot, i in zip(self.space.slots, self.arch.choices)
        )
        return self.space.fixed_op_flops() + sum(chosen)


def arch_param_count(space: SearchSpace, arch: ArchDescriptor) -> int:
    chosen = (
        block_param_count(slot.candidates[i]) for slot, i in zip(space.slots, arch.choices)
    )
    return space.fixed_op_params() + sum(chosen)


def materialize(space: SearchSpace, arch: ArchDescriptor, rng, dropout_p=0.0) -> Network:
    return Network(space, arch, rng, dropout_p=dropout_p)


# -- config file handling ----------------------------------------------------


def load_space_config(path_or_name) -> dict:
    """Load a space config from a JSON path or a packaged name.

    Packaged configs: ``desk_32`` (the small CI-friendly default) and
    ``mobile_224`` (the full-scale 22-layer space).
    """
    name = str(path_or_name)
    if name.endswith(".json") or "/" in name:
        with open(name) as fh:
            return json.load(fh)
    import importlib.resources as res

    ref = res.files("dnas").joinpath(f"configs/{name}.json")
    if not ref.is_file():
        raise ConfigurationError(f"unknown packaged space config {name!r}")
    return json.loads(ref.read_text())
