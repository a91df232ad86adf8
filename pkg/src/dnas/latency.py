"""Host-CPU operator microbenchmarks and the latency lookup-table model.

A table entry is keyed by (kind, c_in, c_out, stride, h, w): two layers
whose chosen operator sees the same shape share one measurement. Fixed
stem/head operators are benchmarked too, under reserved kinds, so a
whole-network prediction is a plain sum of entries. Skip entries are 0.0 by
definition and never timed.

Benchmarking protocol (the table records it): eval-mode forward with fresh
random weights at batch size 1; ``warmup`` discarded runs; the MEDIAN of
``repeats`` timed runs, in microseconds. Each timed sample is auto-widened
over an inner loop until it spans at least 100x the timer resolution.
Benchmark one operator at a time, single-threaded, to keep the sequential
execution assumption behind the additive model honest.

The expected-latency path accumulates in float64 with the same summation
order as the hard prediction, so a one-hot mask reproduces
:func:`arch_latency` to float equality and the mask gradient is exactly the
table constants.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .blocks import SKIP, build_block
from .errors import ConfigurationError, MissingLatencyError
from .space import (
    CLASSIFIER_KIND,
    HEAD_CONV_KIND,
    STEM_KIND,
    ArchDescriptor,
    Classifier,
    HeadConv,
    SearchSpace,
    Stem,
    materialize,
)
from .tensor import Tensor


@dataclass(frozen=True, order=True)
class LatencyKey:
    kind: str
    c_in: int
    c_out: int
    stride: int
    h: int
    w: int


def slot_key(slot, cand) -> LatencyKey:
    return LatencyKey(cand.kind, slot.c_in, slot.c_out, slot.stride, slot.h, slot.w)


def fixed_keys(space: SearchSpace):
    hf, wf = space.final_hw
    res = space.input_resolution
    return (
        LatencyKey(STEM_KIND, 3, space.stem_channels, space.stem_stride, res, res),
        LatencyKey(HEAD_CONV_KIND, space.final_channels, space.head_width, 1, hf, wf),
        LatencyKey(CLASSIFIER_KIND, space.head_width, space.num_classes, 1, hf, wf),
    )


@dataclass
class LatencyTable:
    device_label: str
    repeats: int
    warmup: int
    created_unix: int
    space_hash: str
    entries: dict = field(default_factory=dict)
    aggregation: str = "median"

    def lookup(self, key: LatencyKey) -> float:
        try:
            return self.entries[key]
        except KeyError:
            raise MissingLatencyError(f"latency table has no entry for {key}") from None

    def covers(self, space: SearchSpace) -> bool:
        needed = {slot_key(s, c) for s in space.slots for c in s.candidates}
        needed.update(fixed_keys(space))
        return needed <= set(self.entries)

    def key_set(self):
        return frozenset(self.entries)

    def to_json_dict(self) -> dict:
        rows = [
            {
                "kind": k.kind,
                "c_in": k.c_in,
                "c_out": k.c_out,
                "stride": k.stride,
                "h": k.h,
                "w": k.w,
                "latency_us": v,
            }
            for k, v in sorted(self.entries.items())
        ]
        return {
            "device_label": self.device_label,
            "created_unix": self.created_unix,
            "repeats": self.repeats,
            "warmup": self.warmup,
            "aggregation": self.aggregation,
            "space_hash": self.space_hash,
            "entries": rows,
        }

    def save(self, path):
        _atomic_write_json(path, self.to_json_dict())

    @classmethod
    def load(cls, path) -> "LatencyTable":
        with open(path) as fh:
            obj = json.load(fh)
        entries = {
            LatencyKey(r["kind"], r["c_in"], r["c_out"], r["stride"], r["h"], r["w"]): float(
                r["latency_us"]
            )
            for r in obj["entries"]
        }
        return cls(
            device_label=obj["device_label"],
            repeats=obj["repeats"],
            warmup=obj["warmup"],
            created_unix=obj["created_unix"],
            space_hash=obj["space_hash"],
            entries=entries,
            aggregation=obj.get("aggregation", "median"),
        )

    def export_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["kind", "c_in", "c_out", "stride", "h", "w", "latency_us"])
            for k, v in sorted(self.entries.items()):
                writer.writerow([k.kind, k.c_in, k.c_out, k.stride, k.h, k.w, repr(v)])


def _atomic_write_json(path, obj):
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


# -- timing -------------------------------------------------------------------


def time_callable(fn, repeats: int, warmup: int) -> float:
    """Median wall time of fn() in microseconds, inner-loop calibrated."""
    if repeats < 5:
        raise ConfigurationError(f"repeats must be >= 5, got {repeats}")
    if warmup < 1:
        raise ConfigurationError(f"warmup must be >= 1, got {warmup}")
    floor = 100.0 * time.get_clock_info("perf_counter").resolution
    inner = 1
    while True:
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        elapsed = time.perf_counter() - t0
        if elapsed >= floor or inner >= 1 << 20:
            break
        inner *= 2
    for _ in range(warmup):
        for _ in range(inner):
            fn()
    samples = np.empty(repeats)
    for r in range(repeats):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        samples[r] = (time.perf_counter() - t0) / inner
    return float(np.median(samples) * 1e6)


def bench_block(cfg, input_shape, repeats: int = 50, warmup: int = 10, rng=None) -> float:
    """Measure one candidate operator; skip is 0.0 by definition, untimed."""
    if cfg.kind == SKIP:
        return 0.0
    if input_shape[0] != 1:
        raise ConfigurationError(f"benchmarks run at batch size 1, got {input_shape[0]}")
    rng = rng if rng is not None else np.random.default_rng(0)
    block = build_block(cfg, rng).eval()
    x = Tensor(rng.standard_normal(input_shape).astype(np.float32))

    def run():
        with T.no_grad():
            block(x)

    return time_callable(run, repeats, warmup)


def bench_module(module, input_shape, repeats: int = 50, warmup: int = 10, rng=None) -> float:
    rng = rng if rng is not None else np.random.default_rng(0)
    module.eval()
    x = Tensor(rng.standard_normal(input_shape).astype(np.float32))

    def run():
        with T.no_grad():
            module(x)

    return time_callable(run, repeats, warmup)


def build_lut(
    space: SearchSpace,
    repeats: int = 50,
    warmup: int = 10,
    device_label: str = "host",
    rng=None,
) -> LatencyTable:
    """Benchmark every distinct operator key of the space, plus fixed ops."""
    rng = rng if rng is not None else np.random.default_rng(0)
    entries = {}
    for slot in space.slots:
        for cand in slot.candidates:
            key = slot_key(slot, cand)
            if key in entries:
                continue
            entries[key] = bench_block(
                cand, (1, slot.c_in, slot.h, slot.w), repeats, warmup, rng
            )
    stem_key, head_key, cls_key = fixed_keys(space)
    res = space.input_resolution
    hf, wf = space.final_hw
    entries[stem_key] = bench_module(Stem(space, rng), (1, 3, res, res), repeats, warmup, rng)
    entries[head_key] = bench_module(
        HeadConv(space, rng), (1, space.final_channels, hf, wf), repeats, warmup, rng
    )
    entries[cls_key] = bench_module(
        Classifier(space, rng), (1, space.head_width, hf, wf), repeats, warmup, rng
    )
    return LatencyTable(
        device_label=device_label,
        repeats=repeats,
        warmup=warmup,
        created_unix=int(time.time()),
        space_hash=space.config_hash,
        entries=entries,
    )


# -- the additive latency model ----------------------------------------------


def fixed_ops_latency(table: LatencyTable, space: SearchSpace) -> float:
    stem_key, head_key, cls_key = fixed_keys(space)
    return table.lookup(stem_key) + table.lookup(head_key) + table.lookup(cls_key)


def slot_latency_vector(table: LatencyTable, slot) -> np.ndarray:
    return np.array([table.lookup(slot_key(slot, c)) for c in slot.candidates], dtype=np.float64)


def arch_latency(table: LatencyTable, space: SearchSpace, arch: ArchDescriptor) -> float:
    """Hard prediction: fixed-op latency plus the chosen entry per layer."""
    total = fixed_ops_latency(table, space)
    for slot, choice in zip(space.slots, arch.choices):
        total = total + table.lookup(slot_key(slot, slot.candidates[choice]))
    return total


def expected_latency(table: LatencyTable, space: SearchSpace, masks) -> Tensor:
    """Differentiable E[latency] under per-layer relaxed masks (microseconds).

    ``masks`` is one 1-D tensor per searchable slot, row-stochastic. The
    gradient w.r.t. each mask row is exactly that slot's table constants.
    """
    if len(masks) != len(space.slots):
        raise ConfigurationError(f"{len(masks)} mask rows for {len(space.slots)} slots")
    total = T.as_const(fixed_ops_latency(table, space), dtype=np.float64)
    for slot, mask in zip(space.slots, masks):
        if mask.data.shape != (len(slot.candidates),):
            raise ConfigurationError(
                f"layer {slot.index}: mask shape {mask.data.shape} for "
                f"{len(slot.candidates)} candidates"
            )
        if abs(float(mask.data.sum()) - 1.0) > 1e-5:
            raise ConfigurationError(
                f"layer {slot.index}: mask rows must sum to 1, got {mask.data.sum()!r}"
            )
        total = T.add(total, T.dot_const(mask, slot_latency_vector(table, slot)))
    return total


def validate_additivity(
    table: LatencyTable,
    space: SearchSpace,
    sample_archs: int = 10,
    seed: int = 0,
    repeats: int = 30,
    warmup: int = 5,
) -> dict:
    """Compare summed per-operator predictions against end-to-end timings.

    Report-only: a desktop CPU with caches and a scheduler is noisier than
    the sequential in-order execution the additive model assumes, so the
    summary records the error rather than enforcing it.
    """
    if sample_archs < 5:
        raise ConfigurationError(f"need at least 5 sampled architectures, got {sample_archs}")
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(sample_archs):
        arch = space.random_arch(rng)
        net = materialize(space, arch, rng).eval()
        predicted = arch_latency(table, space, arch)
        res = space.input_resolution
        measured = bench_module(net, (1, 3, res, res), repeats, warmup, rng)
        arch_id = hashlib.sha256(
            json.dumps(arch.to_json_dict(space), sort_keys=True).encode()
        ).hexdigest()[:12]
        samples.append(
            {
                "arch_id": arch_id,
                "predicted_us": predicted,
                "measured_us": measured,
                "rel_err": abs(measured - predicted) / predicted,
            }
        )
    errs = [s["rel_err"] for s in samples]
    return {
        "device_label": table.device_label,
        "num_samples": len(samples),
        "samples": samples,
        "mean_rel_err": float(np.mean(errs)),
        "max_rel_err": float(np.max(errs)),
        "note": (
            "additive lookup-table prediction vs measured end-to-end forward; "
            "host CPUs violate the sequential-operator assumption, expect "
            "errors well above embedded targets"
        ),
    }
