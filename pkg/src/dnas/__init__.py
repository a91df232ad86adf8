"""Differentiable architecture search over a latency-profiled block vocabulary.

The package is organized as a pipeline:

- ``dnas.tensor`` / ``dnas.nn`` / ``dnas.optim``: a small float32 tensor
  library with reverse-mode autodiff and the two optimizers the trainer uses.
- ``dnas.blocks``: the searchable inverted-bottleneck block vocabulary.
- ``dnas.space``: macro-architecture config, per-layer candidate slots,
  architecture descriptors, and standalone network materialization.
- ``dnas.latency``: host microbenchmarks, the latency lookup table, and the
  differentiable expected-latency model.
- ``dnas.supernet``: the stochastic supernet with relaxed categorical masks.
- ``dnas.trainer``: the latency-aware loss and the two-phase search loop.
- ``dnas.data``: binary dataset loader, synthetic data, splits, augmentation.
- ``dnas.cli``: the ``dnas`` command-line entry point.

This module deliberately imports nothing heavy: the CLI configures BLAS
thread limits via environment variables before numpy is first imported.
"""

__version__ = "0.1.0"

_SUBMODULES = (
    "tensor",
    "nn",
    "optim",
    "blocks",
    "space",
    "latency",
    "supernet",
    "trainer",
    "data",
    "errors",
)


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        return importlib.import_module(f"dnas.{name}")
    raise AttributeError(f"module 'dnas' has no attribute {name!r}")
