"""Dataset ingestion: binary loader, synthetic generator, splits, augmentation.

The interchange format is the CIFAR-10 binary layout with a configurable
square resolution: each record is one label byte followed by 3*H*W pixel
bytes (channel planes R, G, B). Pixels are kept as uint8 in memory; batch
assembly scales to [0, 1] and standardizes per channel with constants from a
sidecar JSON (``<file>.norm.json``), computed from the dataset itself when
the sidecar is missing.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DatasetFormatError


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, H, W) uint8
    labels: np.ndarray  # (N,) int64
    num_classes: int
    mean: np.ndarray  # per-channel mean of pixels scaled to [0, 1]
    std: np.ndarray

    def __len__(self):
        return self.images.shape[0]

    @property
    def resolution(self):
        return self.images.shape[2]

    def to_float(self, idx) -> np.ndarray:
        """Normalized float32 batch for the given indices."""
        x = self.images[idx].astype(np.float32) / 255.0
        return (x - self.mean.reshape(1, 3, 1, 1)) / self.std.reshape(1, 3, 1, 1)

    def label_batch(self, idx) -> np.ndarray:
        return self.labels[idx]


def _compute_norm(images: np.ndarray):
    if images.shape[0] == 0:
        return np.zeros(3, dtype=np.float32), np.ones(3, dtype=np.float32)
    scaled = images.astype(np.float64) / 255.0
    mean = scaled.mean(axis=(0, 2, 3))
    std = scaled.std(axis=(0, 2, 3))
    std[std < 1e-6] = 1.0
    return mean.astype(np.float32), std.astype(np.float32)


def _norm_sidecar_path(path):
    return f"{path}.norm.json"


def load_binary(path, resolution: int = 32, num_classes: int = 10) -> Dataset:
    """Parse a binary dataset file; an empty file is an empty dataset."""
    raw = np.fromfile(path, dtype=np.uint8)
    record = 1 + 3 * resolution * resolution
    if raw.size % record != 0:
        raise DatasetFormatError(
            f"file length {raw.size} is not a multiple of the {record}-byte record; "
            f"data ends mid-record at byte offset {raw.size}",
            byte_offset=int(raw.size),
        )
    n = raw.size // record
    rows = raw.reshape(n, record)
    labels = rows[:, 0].astype(np.int64)
    bad = np.nonzero(labels >= num_classes)[0]
    if bad.size:
        raise DatasetFormatError(
            f"record {int(bad[0])} has label {int(labels[bad[0]])} >= {num_classes}",
            record_index=int(bad[0]),
        )
    images = rows[:, 1:].reshape(n, 3, resolution, resolution).copy()

    sidecar = _norm_sidecar_path(path)
    if os.path.exists(sidecar):
        with open(sidecar) as fh:
            norm = json.load(fh)
        mean = np.asarray(norm["mean"], dtype=np.float32)
        std = np.asarray(norm["std"], dtype=np.float32)
    else:
        mean, std = _compute_norm(images)
        tmp = f"{sidecar}.tmp.{os.getpid()}"
        with open(tmp, "w") as fh:
            json.dump({"mean": [float(v) for v in mean], "std": [float(v) for v in std]}, fh)
            fh.write("\n")
        os.replace(tmp, sidecar)
    return Dataset(images, labels, num_classes, mean, std)


def write_binary(ds: Dataset, path):
    """Serialize back to the record layout (atomic replace)."""
    n = len(ds)
    res = ds.resolution if n else 0
    record = 1 + 3 * res * res
    out = np.empty((n, record), dtype=np.uint8)
    if n:
        out[:, 0] = ds.labels.astype(np.uint8)
        out[:, 1:] = ds.images.reshape(n, -1)
    tmp = f"{path}.tmp.{os.getpid()}"
    out.tofile(tmp)
    os.replace(tmp, path)


def synth_dataset(
    classes: int, per_class: int, resolution: int, seed: int, noise: float = 0.08
) -> Dataset:
    """Procedural class-separable images: oriented gratings plus noise.

    Class c gets a sinusoidal grating at angle pi*c/classes and frequency
    2 + (c mod 5), modulated by a class-specific RGB tint; every image draws
    a random phase and Gaussian pixel noise of standard deviation ``noise``
    (in [0,1] pixel units). The tints keep class centroids distinct, so even
    a nearest-centroid rule on raw pixels beats chance; higher noise makes
    the task arbitrarily harder without destroying separability.
    """
    if classes < 2:
        raise ConfigurationError(f"need at least 2 classes, got {classes}")
    rng = np.random.default_rng(seed)
    grid = np.linspace(0.0, 1.0, resolution)
    xx, yy = np.meshgrid(grid, grid, indexing="ij")
    images = np.empty((classes * per_class, 3, resolution, resolution), dtype=np.uint8)
    labels = np.empty(classes * per_class, dtype=np.int64)
    i = 0
    for c in range(classes):
        angle = np.pi * c / classes
        freq = 2.0 + (c % 5)
        u = np.cos(angle) * xx + np.sin(angle) * yy
        hue = 2.0 * np.pi * c / classes
        tint = 0.55 + 0.45 * np.cos(hue + np.array([0.0, 2.0, 4.0]) * np.pi / 3.0)
        for _ in range(per_class):
            phase = rng.uniform(0.0, 2.0 * np.pi)
            base = 0.5 + 0.45 * np.sin(2.0 * np.pi * freq * u + phase)
            img = base[None, :, :] * tint[:, None, None]
            img = img + rng.normal(0.0, noise, img.shape)
            images[i] = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
            labels[i] = c
            i += 1
    mean, std = _compute_norm(images)
    return Dataset(images, labels, classes, mean, std)


@dataclass(frozen=True)
class SplitSpec:
    fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigurationError(f"split fraction must be in (0, 1], got {self.fraction}")


def split_indices(ds: Dataset, spec: SplitSpec):
    """Deterministic stratified split; parts are disjoint and exhaustive."""
    rng = np.random.default_rng(spec.seed)
    part_a, part_b = [], []
    for c in range(ds.num_classes):
        idx = np.nonzero(ds.labels == c)[0]
        perm = idx[rng.permutation(idx.size)]
        k = int(idx.size * spec.fraction)
        part_a.append(perm[:k])
        part_b.append(perm[k:])
    return np.concatenate(part_a), np.concatenate(part_b)


def split(ds: Dataset, spec: SplitSpec):
    ia, ib = split_indices(ds, spec)
    a = Dataset(ds.images[ia], ds.labels[ia], ds.num_classes, ds.mean, ds.std)
    b = Dataset(ds.images[ib], ds.labels[ib], ds.num_classes, ds.mean, ds.std)
    return a, b


def augment(batch: np.ndarray, rng: np.random.Generator, flip_p: float = 0.5, pad: int = 4,
            training: bool = True) -> np.ndarray:
    """Horizontal flip + random crop from zero padding; identity in eval."""
    if not training:
        return batch
    n, _, h, w = batch.shape
    out = batch.copy()
    flips = rng.random(n) < flip_p
    out[flips] = out[flips, :, :, ::-1]
    if pad:
        padded = np.zeros((n, 3, h + 2 * pad, w + 2 * pad), dtype=batch.dtype)
        padded[:, :, pad : pad + h, pad : pad + w] = out
        offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
        for i in range(n):
            oy, ox = offsets[i]
            out[i] = padded[i, :, oy : oy + h, ox : ox + w]
    return out


def batch_indices(n: int, batch_size: int, rng: np.random.Generator = None):
    """Index batches covering [0, n); shuffled when an rng is given."""
    order = np.arange(n) if rng is None else rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]
