"""Command-line pipeline: bench-lut, search, sample, train, predict, report.

Exit codes: 0 success, 2 configuration/validation problem, 3 I/O or file
format problem, 4 numerical divergence.

Thread control: the DNAS_THREADS environment variable caps BLAS kernel
parallelism (applied before numpy loads). Benchmarking commands (bench-lut
and anything that times a network) force single-threaded kernels regardless,
to keep measurements stable and the sequential-execution assumption honest.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4

_BENCH_COMMANDS = {"bench-lut", "train"}
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _configure_threads(command):
    if command in _BENCH_COMMANDS:
        # measurement integrity: single-threaded kernels no matter what
        for var in _THREAD_VARS:
            os.environ[var] = "1"
        return
    threads = os.environ.get("DNAS_THREADS", "1")
    for var in _THREAD_VARS:
        os.environ.setdefault(var, threads)


def _atomic_json(path, obj):
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _write_manifest(out_dir, args, space_config, seed, lut_path=None, device_label=None):
    from .space import config_hash

    manifest = {
        "command_line": sys.argv,
        "config_hash": config_hash(space_config),
        "space_config": space_config,
        "seed": seed,
        "lut_path": None if lut_path is None else os.path.abspath(lut_path),
        "device_label": device_label,
        "created_unix": int(time.time()),
        "out_dir": os.path.abspath(out_dir),
    }
    _atomic_json(os.path.join(out_dir, "manifest.json"), manifest)
    return manifest


def _resolve_seed(seed):
    """A missing --seed draws one from entropy; the manifest records it."""
    if seed is not None:
        return seed
    return int.from_bytes(os.urandom(4), "little")


def _load_dataset(path_or_synth, space, seed, per_class, noise):
    from .data import load_binary, synth_dataset

    if path_or_synth == "synth":
        return synth_dataset(
            classes=space.num_classes,
            per_class=per_class,
            resolution=space.input_resolution,
            seed=seed,
            noise=noise,
        )
    return load_binary(
        path_or_synth, resolution=space.input_resolution, num_classes=space.num_classes
    )


def cmd_bench_lut(args):
    from .latency import build_lut
    from .space import build_space, load_space_config

    import numpy as np

    config = load_space_config(args.space)
    space = build_space(config)
    rng = np.random.default_rng(_resolve_seed(args.seed))
    table = build_lut(
        space,
        repeats=args.repeats,
        warmup=args.warmup,
        device_label=args.device_label,
        rng=rng,
    )
    table.save(args.out)
    if args.csv:
        table.export_csv(args.csv)
        print(f"wrote {args.csv}")
    timed = {k: v for k, v in table.entries.items() if v > 0.0}
    slowest = max(timed, key=timed.get)
    fastest = min(timed, key=timed.get)
    print(f"benchmarked {len(table.entries)} distinct operator keys -> {args.out}")
    print(f"  slowest: {slowest.kind} {slowest.c_in}->{slowest.c_out} "
          f"@{slowest.h}x{slowest.w}: {timed[slowest]:.1f} us")
    print(f"  fastest: {fastest.kind} {fastest.c_in}->{fastest.c_out} "
          f"@{fastest.h}x{fastest.w}: {timed[fastest]:.1f} us")
    return EXIT_OK


def cmd_search(args):
    from .latency import LatencyTable
    from .space import build_space, config_hash, load_space_config
    from .trainer import SearchHyperParams, run_search

    config = load_space_config(args.space)
    space = build_space(config)
    table = LatencyTable.load(args.lut)
    if table.space_hash != space.config_hash:
        print(
            f"error: latency table was built for space config {table.space_hash}, "
            f"but --space hashes to {space.config_hash}",
            file=sys.stderr,
        )
        return EXIT_CONFIG
    seed = _resolve_seed(args.seed)
    dataset = _load_dataset(args.data, space, seed, args.synth_per_class, args.synth_noise)
    hyper = SearchHyperParams(
        alpha=args.alpha,
        beta=args.beta,
        epochs=args.epochs,
        theta_postpone=args.theta_postpone,
        batch_size=args.batch_size,
        theta_batch_size=args.theta_batch_size,
    )
    os.makedirs(args.out, exist_ok=True)
    _write_manifest(args.out, args, config, seed, args.lut, table.device_label)

    def progress(line):
        print(json.dumps(line, sort_keys=True))

    run_search(space, table, hyper, dataset, seed, out_dir=args.out,
               on_metrics=progress if args.verbose else None)
    print(f"search finished: {args.out}/theta.json, {args.out}/metrics.jsonl")
    return EXIT_OK


def cmd_sample(args):
    import numpy as np

    from .blocks import block_flops, block_param_count
    from .latency import LatencyTable, arch_latency
    from .space import arch_param_count, build_space
    from .supernet import arch_log_prob, load_theta, sample_arch

    run_dir = os.path.dirname(os.path.abspath(args.theta))
    manifest_path = os.path.join(run_dir, "manifest.json")
    if args.space is not None:
        from .space import load_space_config

        config = load_space_config(args.space)
        lut_path = args.lut
    elif os.path.exists(manifest_path):
        with open(manifest_path) as fh:
            manifest = json.load(fh)
        config = manifest["space_config"]
        lut_path = args.lut or manifest.get("lut_path")
    else:
        print(
            "error: no manifest.json next to --theta; pass --space (and --lut) explicitly",
            file=sys.stderr,
        )
        return EXIT_CONFIG
    space = build_space(config)
    theta, _ = load_theta(args.theta, space)
    table = LatencyTable.load(lut_path) if lut_path else None

    seed = _resolve_seed(args.seed)
    rng = np.random.default_rng(seed)
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for i in range(args.count):
        arch = sample_arch(space, theta, rng)
        name = f"arch_{i:03d}.json"
        _atomic_json(os.path.join(args.out, name), arch.to_json_dict(space))
        flops = space.fixed_op_flops() + sum(
            block_flops(slot.candidates[c], (slot.h, slot.w))
            for slot, c in zip(space.slots, arch.choices)
        )
        rows.append(
            {
                "file": name,
                "log_prob": arch_log_prob(theta, arch),
                "predicted_latency_us": (
                    arch_latency(table, space, arch) if table is not None else None
                ),
                "flops": flops,
                "param_count": arch_param_count(space, arch),
            }
        )
    rows.sort(key=lambda r: (r["predicted_latency_us"] is None, r["predicted_latency_us"]))
    _atomic_json(os.path.join(args.out, "index.json"), {"seed": seed, "samples": rows})
    print(f"sampled {args.count} architectures -> {args.out}/index.json")
    return EXIT_OK


def cmd_train(args):
    from .latency import LatencyTable
    from .space import ArchDescriptor, build_space, load_space_config, validate_arch
    from .trainer import SearchHyperParams, train_from_scratch

    config = load_space_config(args.space)
    space = build_space(config)
    with open(args.arch) as fh:
        arch = ArchDescriptor.from_json_dict(json.load(fh), space)
    problems = validate_arch(space, arch)
    if problems:
        print(f"error: invalid architecture: {problems}", file=sys.stderr)
        return EXIT_CONFIG
    table = LatencyTable.load(args.lut) if args.lut else None
    seed = _resolve_seed(args.seed)
    dataset = _load_dataset(args.data, space, seed, args.synth_per_class, args.synth_noise)
    hyper = SearchHyperParams(batch_size=args.batch_size)
    os.makedirs(args.out, exist_ok=True)
    _write_manifest(args.out, args, config, seed, args.lut,
                    None if table is None else table.device_label)
    _, metrics = train_from_scratch(
        space, arch, dataset, args.epochs, hyper, seed, lut=table
    )
    _atomic_json(os.path.join(args.out, "metrics.json"), metrics)
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_predict(args):
    from .latency import LatencyTable, arch_latency, fixed_keys, slot_key
    from .space import ArchDescriptor, build_space, load_space_config

    config = load_space_config(args.space)
    space = build_space(config)
    table = LatencyTable.load(args.lut)
    with open(args.arch) as fh:
        arch = ArchDescriptor.from_json_dict(json.load(fh), space)

    rows = []
    for key, label in zip(fixed_keys(space), ("stem", "head_conv", "classifier")):
        rows.append((label, key.kind, table.lookup(key)))
    for slot, choice in zip(space.slots, arch.choices):
        cand = slot.candidates[choice]
        rows.append((f"layer_{slot.index}", cand.kind, table.lookup(slot_key(slot, cand))))
    total = arch_latency(table, space, arch)
    width = max(len(r[0]) for r in rows)
    for name, kind, us in rows:
        print(f"{name:<{width}}  {kind:<10}  {us:>12.3f} us")
    print(f"{'total':<{width}}  {'':<10}  {total:>12.3f} us")
    if args.csv:
        import csv as _csv

        with open(args.csv, "w", newline="") as fh:
            writer = _csv.writer(fh)
            writer.writerow(["layer", "kind", "latency_us"])
            for name, kind, us in rows:
                writer.writerow([name, kind, repr(us)])
        print(f"wrote {args.csv}")
    return EXIT_OK


REPORT_COLUMNS = ("epoch", "phase", "tau", "ce", "expected_lat_us", "entropy_nats")


def cmd_report(args):
    path = os.path.join(args.run, "metrics.jsonl")
    lines = []
    if os.path.exists(path):
        with open(path) as fh:
            lines = [json.loads(l) for l in fh if l.strip()]
    if args.csv:
        import csv as _csv

        with open(args.csv, "w", newline="") as fh:
            writer = _csv.writer(fh)
            writer.writerow(REPORT_COLUMNS)
            for line in lines:
                writer.writerow([line.get(c) for c in REPORT_COLUMNS])
        print(f"wrote {args.csv}")
        return EXIT_OK
    print("  ".join(f"{c:>15}" for c in REPORT_COLUMNS))
    for line in lines:
        cells = []
        for c in REPORT_COLUMNS:
            v = line.get(c)
            if isinstance(v, float):
                cells.append(f"{v:>15.6f}")
            else:
                cells.append(f"{str(v):>15}")
        print("  ".join(cells))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dnas",
        description="latency-aware differentiable architecture search",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bench-lut", help="benchmark every operator and write the latency table")
    p.add_argument("--space", required=True, help="space config path or packaged name")
    p.add_argument("--out", required=True, help="output LUT JSON path")
    p.add_argument("--repeats", type=int, default=50)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--device-label", default="host")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--csv", default=None, help="also export the table as CSV")
    p.set_defaults(func=cmd_bench_lut)

    p = sub.add_parser("search", help="train the stochastic supernet")
    p.add_argument("--space", required=True)
    p.add_argument("--lut", required=True)
    p.add_argument("--data", required=True, help="dataset path or 'synth'")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=0.2)
    p.add_argument("--beta", type=float, default=0.6)
    p.add_argument("--theta-postpone", type=int, default=4)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--theta-batch-size", type=int, default=None)
    p.add_argument("--synth-per-class", type=int, default=128)
    p.add_argument("--synth-noise", type=float, default=0.08)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("sample", help="draw architectures from a trained distribution")
    p.add_argument("--theta", required=True)
    p.add_argument("--count", type=int, default=6)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--space", default=None, help="override the run manifest's space config")
    p.add_argument("--lut", default=None, help="override the run manifest's LUT path")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("train", help="train one architecture from scratch")
    p.add_argument("--space", required=True)
    p.add_argument("--arch", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--lut", default=None, help="optional LUT for predicted latency")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--synth-per-class", type=int, default=128)
    p.add_argument("--synth-noise", type=float, default=0.08)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="per-layer latency breakdown for an architecture")
    p.add_argument("--lut", required=True)
    p.add_argument("--space", required=True)
    p.add_argument("--arch", required=True)
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("report", help="summarize a search run's metrics log")
    p.add_argument("--run", required=True)
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    if argv:
        _configure_threads(argv[0])
    parser = build_parser()
    args = parser.parse_args(argv)

    from .errors import (
        ConfigurationError,
        DatasetFormatError,
        DivergenceError,
        MissingLatencyError,
    )

    try:
        return args.func(args)
    except (ConfigurationError, MissingLatencyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetFormatError, OSError, json.JSONDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO
    except DivergenceError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
