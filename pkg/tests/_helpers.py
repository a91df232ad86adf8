"""Shared fixtures-in-spirit: tiny spaces and synthetic latency tables."""

import time

import numpy as np

from dnas.blocks import SKIP
from dnas.latency import LatencyTable, fixed_keys, slot_key
from dnas.space import build_space

MICRO_CONFIG = {
    "input_resolution": 8,
    "channel_scale": 1.0,
    "num_classes": 3,
    "stages": [
        {"f": 4, "n": 1, "s": 2, "searchable": False},
        {"f": 4, "n": 1, "s": 1, "searchable": True},
        {"f": 8, "n": 1, "s": 2, "searchable": True},
    ],
    "head_width": 16,
}


def micro_space():
    """Two searchable layers (9 + 8 candidates), 8x8 input, 3 classes."""
    return build_space(MICRO_CONFIG)


def desk_space():
    from dnas.space import load_space_config

    return build_space(load_space_config("desk_32"))


def synthetic_lut(space, rng=None, lo=50.0, hi=500.0) -> LatencyTable:
    """A structurally complete table with made-up timings (no benching)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    entries = {}
    for slot in space.slots:
        for cand in slot.candidates:
            key = slot_key(slot, cand)
            if key in entries:
                continue
            entries[key] = 0.0 if cand.kind == SKIP else float(rng.uniform(lo, hi))
    for key in fixed_keys(space):
        entries[key] = float(rng.uniform(lo, hi))
    return LatencyTable(
        device_label="synthetic",
        repeats=5,
        warmup=1,
        created_unix=int(time.time()),
        space_hash=space.config_hash,
        entries=entries,
    )
