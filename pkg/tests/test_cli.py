import json
import os

import numpy as np
import pytest

from dnas import cli
from dnas.latency import LatencyTable, arch_latency, slot_key
from dnas.space import ArchDescriptor, build_space

from _helpers import MICRO_CONFIG, micro_space


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """One miniature pipeline: bench-lut -> search -> sample -> predict -> train."""
    root = tmp_path_factory.mktemp("cli")
    config_path = root / "micro.json"
    config_path.write_text(json.dumps(MICRO_CONFIG))
    lut_path = root / "lut.json"
    rc = cli.main([
        "bench-lut", "--space", str(config_path), "--out", str(lut_path),
        "--repeats", "5", "--warmup", "1", "--device-label", "ci-host", "--seed", "0",
    ])
    assert rc == 0
    run_dir = root / "run"
    rc = cli.main([
        "search", "--space", str(config_path), "--lut", str(lut_path),
        "--data", "synth", "--epochs", "2", "--seed", "7", "--out", str(run_dir),
        "--batch-size", "16", "--synth-per-class", "16", "--theta-postpone", "1",
    ])
    assert rc == 0
    sample_dir = root / "samples"
    rc = cli.main([
        "sample", "--theta", str(run_dir / "theta.json"), "--count", "4",
        "--seed", "3", "--out", str(sample_dir),
    ])
    assert rc == 0
    return {
        "root": root,
        "config": config_path,
        "lut": lut_path,
        "run": run_dir,
        "samples": sample_dir,
    }


class TestBenchLut:
    def test_missing_required_flag_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["bench-lut", "--out", "x.json"])
        assert exc.value.code == 2

    def test_entry_count_matches_distinct_keys(self, workdir):
        table = LatencyTable.load(workdir["lut"])
        space = micro_space()
        keys = {slot_key(s, c) for s in space.slots for c in s.candidates}
        assert len(table.entries) == len(keys) + 3  # + stem, head conv, classifier
        assert table.device_label == "ci-host"

    def test_csv_export_flag(self, workdir, tmp_path):
        target = tmp_path / "lut.csv"
        rc = cli.main([
            "bench-lut", "--space", str(workdir["config"]), "--out", str(tmp_path / "l.json"),
            "--repeats", "5", "--warmup", "1", "--csv", str(target), "--seed", "0",
        ])
        assert rc == 0
        lines = target.read_text().strip().splitlines()
        assert lines[0] == "kind,c_in,c_out,stride,h,w,latency_us"
        table = LatencyTable.load(tmp_path / "l.json")
        assert len(lines) == len(table.entries) + 1

    def test_failed_rerun_leaves_previous_lut(self, workdir):
        before = workdir["lut"].read_bytes()
        rc = cli.main([
            "bench-lut", "--space", "no-such-config", "--out", str(workdir["lut"]),
            "--repeats", "5", "--warmup", "1",
        ])
        assert rc == 2
        assert workdir["lut"].read_bytes() == before


class TestSearch:
    def test_outputs_exist(self, workdir):
        for name in ("manifest.json", "theta.json", "metrics.jsonl"):
            assert (workdir["run"] / name).exists()

    def test_manifest_links_config_and_lut(self, workdir):
        manifest = json.loads((workdir["run"] / "manifest.json").read_text())
        space = build_space(manifest["space_config"])
        assert manifest["config_hash"] == space.config_hash
        assert manifest["seed"] == 7
        assert manifest["lut_path"] == str(workdir["lut"])
        assert manifest["device_label"] == "ci-host"

    def test_lut_for_other_space_refused_with_both_hashes(self, workdir, tmp_path, capsys):
        other = dict(MICRO_CONFIG)
        other["head_width"] = 32
        other_path = tmp_path / "other.json"
        other_path.write_text(json.dumps(other))
        rc = cli.main([
            "search", "--space", str(other_path), "--lut", str(workdir["lut"]),
            "--data", "synth", "--epochs", "1", "--seed", "1", "--out", str(tmp_path / "r"),
        ])
        assert rc == 2
        err = capsys.readouterr().err
        table = LatencyTable.load(workdir["lut"])
        assert table.space_hash in err
        assert build_space(other).config_hash in err

    def test_same_seed_reproduces_theta_bytes(self, workdir, tmp_path):
        args = [
            "search", "--space", str(workdir["config"]), "--lut", str(workdir["lut"]),
            "--data", "synth", "--epochs", "2", "--seed", "7",
            "--batch-size", "16", "--synth-per-class", "16", "--theta-postpone", "1",
        ]
        rerun = tmp_path / "rerun"
        assert cli.main(args + ["--out", str(rerun)]) == 0
        assert (rerun / "theta.json").read_bytes() == (
            workdir["run"] / "theta.json"
        ).read_bytes()


class TestSample:
    def test_index_sorted_by_predicted_latency(self, workdir):
        index = json.loads((workdir["samples"] / "index.json").read_text())
        lats = [r["predicted_latency_us"] for r in index["samples"]]
        assert all(l is not None for l in lats)
        assert lats == sorted(lats)

    def test_descriptors_validate_and_roundtrip(self, workdir):
        space = micro_space()
        index = json.loads((workdir["samples"] / "index.json").read_text())
        assert len(index["samples"]) == 4
        for row in index["samples"]:
            obj = json.loads((workdir["samples"] / row["file"]).read_text())
            arch = ArchDescriptor.from_json_dict(obj, space)
            assert arch.space_hash == space.config_hash
            assert row["param_count"] > 0 and row["flops"] > 0
            assert row["log_prob"] <= 0.0

    def test_default_count_is_six(self, workdir, tmp_path):
        out = tmp_path / "six"
        rc = cli.main([
            "sample", "--theta", str(workdir["run"] / "theta.json"),
            "--seed", "5", "--out", str(out),
        ])
        assert rc == 0
        index = json.loads((out / "index.json").read_text())
        assert len(index["samples"]) == 6

    def test_missing_manifest_needs_space_flag(self, workdir, tmp_path, capsys):
        theta_copy = tmp_path / "theta.json"
        theta_copy.write_bytes((workdir["run"] / "theta.json").read_bytes())
        rc = cli.main(["sample", "--theta", str(theta_copy), "--out", str(tmp_path / "s")])
        assert rc == 2
        rc = cli.main([
            "sample", "--theta", str(theta_copy), "--out", str(tmp_path / "s"),
            "--space", str(workdir["config"]), "--lut", str(workdir["lut"]),
            "--seed", "1",
        ])
        assert rc == 0


class TestPredict:
    def test_breakdown_sums_to_total(self, workdir, tmp_path, capsys):
        arch_file = workdir["samples"] / "arch_000.json"
        rc = cli.main([
            "predict", "--lut", str(workdir["lut"]), "--space", str(workdir["config"]),
            "--arch", str(arch_file), "--csv", str(tmp_path / "breakdown.csv"),
        ])
        assert rc == 0
        out = capsys.readouterr().out
        lines = [l for l in out.splitlines() if l.strip() and "wrote" not in l]
        total_line = [l for l in lines if l.startswith("total")][0]
        total = float(total_line.split()[-2])
        space = micro_space()
        table = LatencyTable.load(workdir["lut"])
        arch = ArchDescriptor.from_json_dict(json.loads(arch_file.read_text()), space)
        assert total == pytest.approx(arch_latency(table, space, arch), abs=5e-4)
        csv_lines = (tmp_path / "breakdown.csv").read_text().strip().splitlines()
        assert csv_lines[0] == "layer,kind,latency_us"
        # exact sum from the CSV values
        vals = [float(l.split(",")[2]) for l in csv_lines[1:]]
        assert sum(vals) == pytest.approx(arch_latency(table, space, arch), rel=1e-12)

    def test_skip_rows_show_zero(self, workdir, tmp_path, capsys):
        space = micro_space()
        choices = [s.kinds.index("skip") if "skip" in s.kinds else 0 for s in space.slots]
        arch = ArchDescriptor(space.config_hash, choices)
        arch_file = tmp_path / "skippy.json"
        arch_file.write_text(json.dumps(arch.to_json_dict(space)))
        rc = cli.main([
            "predict", "--lut", str(workdir["lut"]), "--space", str(workdir["config"]),
            "--arch", str(arch_file),
        ])
        assert rc == 0
        out = capsys.readouterr().out
        skip_rows = [l for l in out.splitlines() if " skip" in l]
        assert skip_rows and all("0.000 us" in l for l in skip_rows)

    def test_missing_lut_file_exits_3(self, workdir, capsys):
        rc = cli.main([
            "predict", "--lut", "nope.json", "--space", str(workdir["config"]),
            "--arch", str(workdir["samples"] / "arch_000.json"),
        ])
        assert rc == 3


class TestTrain:
    def test_metrics_fields_and_epochs_zero(self, workdir, tmp_path):
        out = tmp_path / "t"
        rc = cli.main([
            "train", "--space", str(workdir["config"]),
            "--arch", str(workdir["samples"] / "arch_000.json"),
            "--data", "synth", "--epochs", "0", "--seed", "2", "--out", str(out),
            "--lut", str(workdir["lut"]), "--synth-per-class", "12",
        ])
        assert rc == 0
        metrics = json.loads((out / "metrics.json").read_text())
        assert set(metrics) == {
            "top1", "param_count", "flops", "predicted_latency_us", "measured_latency_us",
        }

    def test_missing_arch_file_exits_3(self, workdir, tmp_path):
        rc = cli.main([
            "train", "--space", str(workdir["config"]), "--arch", "missing.json",
            "--data", "synth", "--epochs", "0", "--out", str(tmp_path / "x"),
        ])
        assert rc == 3

    def test_arch_for_wrong_space_exits_2(self, workdir, tmp_path):
        bad = {"space_config_hash": "beef", "choices": ["k3_e1", "k3_e1"]}
        arch_file = tmp_path / "bad.json"
        arch_file.write_text(json.dumps(bad))
        rc = cli.main([
            "train", "--space", str(workdir["config"]), "--arch", str(arch_file),
            "--data", "synth", "--epochs", "0", "--out", str(tmp_path / "y"),
        ])
        assert rc == 2


class TestReport:
    def test_six_columns_and_tau_schedule(self, workdir, capsys):
        rc = cli.main(["report", "--run", str(workdir["run"])])
        assert rc == 0
        out = capsys.readouterr().out.splitlines()
        header = out[0].split()
        assert header == list(cli.REPORT_COLUMNS)
        assert len(header) == 6
        for line in out[1:]:
            cells = line.split()
            epoch, tau = int(cells[0]), float(cells[2])
            assert tau == pytest.approx(5.0 * np.exp(-0.045 * epoch), abs=1e-6)

    def test_empty_run_is_ok(self, tmp_path, capsys):
        os.makedirs(tmp_path / "empty", exist_ok=True)
        rc = cli.main(["report", "--run", str(tmp_path / "empty")])
        assert rc == 0
        out = capsys.readouterr().out.splitlines()
        assert len(out) == 1  # header only

    def test_csv_export(self, workdir, tmp_path):
        target = tmp_path / "report.csv"
        rc = cli.main(["report", "--run", str(workdir["run"]), "--csv", str(target)])
        assert rc == 0
        lines = target.read_text().strip().splitlines()
        assert lines[0] == ",".join(cli.REPORT_COLUMNS)
        assert len(lines) >= 2
