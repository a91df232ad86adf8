import json
import math

import numpy as np
import pytest

from dnas import tensor as T
from dnas.data import synth_dataset
from dnas.errors import ConfigurationError, DivergenceError
from dnas.latency import slot_latency_vector
from dnas.supernet import layer_probs
from dnas.tensor import Tensor
from dnas.trainer import (
    SearchHyperParams,
    evaluate_top1,
    init_search,
    latency_aware_loss,
    run_search,
    train_from_scratch,
    train_theta_epoch,
    train_weights_epoch,
)

from _helpers import micro_space, synthetic_lut


def micro_setup(per_class=24, seed=5, **hyper_kwargs):
    space = micro_space()
    lut = synthetic_lut(space)
    defaults = dict(epochs=4, theta_postpone=1, batch_size=16)
    defaults.update(hyper_kwargs)
    hyper = SearchHyperParams(**defaults)
    ds = synth_dataset(classes=3, per_class=per_class, resolution=8, seed=1)
    return space, lut, hyper, ds, seed


class TestLoss:
    def test_hand_evaluated_reference_point(self):
        ce = Tensor(np.float32(2.0))
        lat = T.as_const(1000.0, dtype=np.float64)
        loss = latency_aware_loss(ce, lat, alpha=0.2, beta=0.6)
        expect = 2.0 * 0.2 * math.log(1000.0) ** 0.6
        assert loss.item() == pytest.approx(expect, rel=1e-6)
        assert loss.item() == pytest.approx(1.2755, abs=2e-4)

    def test_beta_zero_collapses_latency_term(self):
        ce = Tensor(np.float32(2.0))
        lat = T.as_const(123456.0, dtype=np.float64)
        loss = latency_aware_loss(ce, lat, alpha=0.2, beta=0.0)
        assert loss.item() == pytest.approx(0.4, rel=1e-6)

    def test_loss_strictly_increases_in_latency(self):
        ce = Tensor(np.float32(1.5))
        for lat_a, lat_b in [(100.0, 200.0), (1e3, 1e4), (5e4, 6e4)]:
            la = latency_aware_loss(ce, T.as_const(lat_a, dtype=np.float64), 0.2, 0.6)
            lb = latency_aware_loss(ce, T.as_const(lat_b, dtype=np.float64), 0.2, 0.6)
            assert lb.item() > la.item()

    def test_latency_gradient_is_positive(self):
        ce = Tensor(np.float32(2.0))
        lat = Tensor(np.float64(1000.0), requires_grad=True)
        lat.data = np.asarray(1000.0)  # keep float64 scalar
        loss = latency_aware_loss(ce, lat, 0.2, 0.6)
        loss.backward()
        assert lat.grad > 0.0

    def test_additive_variant(self):
        ce = Tensor(np.float32(2.0))
        lat = T.as_const(1000.0, dtype=np.float64)
        loss = latency_aware_loss(ce, lat, 0.2, 0.6, additive=True)
        assert loss.item() == pytest.approx(2.0 + 0.2 * math.log(1000.0) ** 0.6, rel=1e-6)

    def test_sub_microsecond_latency_rejected(self):
        ce = Tensor(np.float32(1.0))
        with pytest.raises(ConfigurationError):
            latency_aware_loss(ce, T.as_const(0.5, dtype=np.float64), 0.2, 0.6)


class TestHyperParams:
    def test_defaults_follow_the_recipe(self):
        h = SearchHyperParams()
        assert (h.alpha, h.beta) == (0.2, 0.6)
        assert h.tau0 == 5.0
        assert h.tau_decay == pytest.approx(math.exp(-0.045))
        assert h.w_lr == 0.1 and h.w_momentum == 0.9 and h.w_weight_decay == 1e-4
        assert h.theta_lr == 1e-2 and h.theta_weight_decay == 5e-4
        assert h.split_fraction == 0.8

    def test_invariants_enforced(self):
        with pytest.raises(ConfigurationError):
            SearchHyperParams(alpha=0.0)
        with pytest.raises(ConfigurationError):
            SearchHyperParams(tau_decay=1.5)
        with pytest.raises(ConfigurationError):
            SearchHyperParams(theta_postpone=30, epochs=30)
        with pytest.raises(ConfigurationError):
            SearchHyperParams(split_fraction=1.0)


class TestPhases:
    def test_weight_phase_freezes_theta(self):
        space, lut, hyper, ds, seed = micro_setup()
        state = init_search(space, lut, hyper, ds, seed)
        before_theta = [t.data.tobytes() for t in state.theta.layers]
        before_w = [p.data.copy() for p in state.supernet.parameters()]
        train_weights_epoch(state)
        after_theta = [t.data.tobytes() for t in state.theta.layers]
        assert before_theta == after_theta  # bitwise frozen
        moved = sum(
            float(np.abs(p.data - b).sum()) for p, b in zip(state.supernet.parameters(), before_w)
        )
        assert moved > 0.0

    def test_theta_phase_freezes_weights(self):
        space, lut, hyper, ds, seed = micro_setup()
        state = init_search(space, lut, hyper, ds, seed)
        state.epoch = 1
        before_w = [p.data.tobytes() for p in state.supernet.parameters()]
        before_theta = [t.data.copy() for t in state.theta.layers]
        train_theta_epoch(state)
        after_w = [p.data.tobytes() for p in state.supernet.parameters()]
        assert before_w == after_w  # bitwise frozen
        moved = sum(
            float(np.abs(t.data - b).sum()) for t, b in zip(state.theta.layers, before_theta)
        )
        assert moved > 0.0

    def test_metrics_line_schema(self):
        space, lut, hyper, ds, seed = micro_setup()
        state = init_search(space, lut, hyper, ds, seed)
        line = train_weights_epoch(state)
        assert set(line) == {
            "epoch", "phase", "tau", "ce", "expected_lat_us", "entropy_nats", "lr",
        }
        assert line["phase"] == "weights"

    def test_separable_toy_learns_quickly(self):
        # any functioning learner beats chance-level CE = ln(num_classes)
        space, lut, hyper, ds, seed = micro_setup(per_class=40, epochs=6, theta_postpone=5)
        state = init_search(space, lut, hyper, ds, seed)
        last = None
        for epoch in range(5):
            state.epoch = epoch
            state.tau = hyper.tau0 * hyper.tau_decay ** epoch
            last = train_weights_epoch(state)
        assert last["ce"] < math.log(3)


class TestRunSearch:
    def test_tau_schedule_in_metrics(self, tmp_path):
        space, lut, hyper, ds, seed = micro_setup(epochs=5, theta_postpone=2)
        out = tmp_path / "run"
        run_search(space, lut, hyper, ds, seed, out_dir=out)
        lines = [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines()]
        for line in lines:
            expect = 5.0 * math.exp(-0.045 * line["epoch"])
            assert line["tau"] == pytest.approx(expect, abs=1e-9)
        # postponement: no theta lines before epoch 2
        assert all(l["phase"] == "weights" for l in lines if l["epoch"] < 2)
        assert any(l["phase"] == "theta" for l in lines if l["epoch"] >= 2)

    def test_entropy_starts_at_uniform_maximum(self, tmp_path):
        space, lut, hyper, ds, seed = micro_setup(epochs=2, theta_postpone=1)
        state = run_search(space, lut, hyper, ds, seed, out_dir=tmp_path / "r")
        first = state.history[0]
        assert first["entropy_nats"] == pytest.approx(np.log(9) + np.log(8), rel=1e-6)

    def test_theta_frozen_during_postponement(self, tmp_path):
        space, lut, hyper, ds, seed = micro_setup(epochs=3, theta_postpone=2)
        state = init_search(space, lut, hyper, ds, seed)
        zero_bytes = [t.data.tobytes() for t in state.theta.layers]
        out = tmp_path / "run"
        state = run_search(space, lut, hyper, ds, seed, out_dir=out)
        # rebuild the trajectory: during postponed epochs theta must stay at init
        state2 = init_search(space, lut, hyper, ds, seed)
        for epoch in range(2):
            state2.epoch = epoch
            state2.tau = hyper.tau0 * hyper.tau_decay ** epoch
            train_weights_epoch(state2)
            assert [t.data.tobytes() for t in state2.theta.layers] == zero_bytes

    def test_same_seed_reproduces_bitwise(self, tmp_path):
        space, lut, hyper, ds, seed = micro_setup(epochs=3, theta_postpone=1)
        a = run_search(space, lut, hyper, ds, seed, out_dir=tmp_path / "a")
        b = run_search(space, lut, hyper, ds, seed, out_dir=tmp_path / "b")
        for ta, tb in zip(a.theta.layers, b.theta.layers):
            assert ta.data.tobytes() == tb.data.tobytes()
        assert (tmp_path / "a" / "theta.json").read_bytes() == (
            tmp_path / "b" / "theta.json"
        ).read_bytes()
        for la, lb in zip(a.history, b.history):
            assert round(la["ce"], 6) == round(lb["ce"], 6)

    def test_class_subset_knob_filters_dataset(self):
        space, lut, hyper, ds, seed = micro_setup(epochs=2, theta_postpone=1)
        hyper = hyper.with_overrides(class_subset=2)
        state = init_search(space, lut, hyper, ds, seed)
        assert set(np.unique(state.train_set.labels)) <= {0, 1}
        assert set(np.unique(state.val_set.labels)) <= {0, 1}

    def test_mismatched_lut_rejected(self):
        space, lut, hyper, ds, seed = micro_setup()
        lut.space_hash = "0000000000000000"
        with pytest.raises(ConfigurationError, match="built for space"):
            init_search(space, lut, hyper, ds, seed)

    def test_divergent_lr_aborts(self):
        space, lut, hyper, ds, seed = micro_setup(w_lr=1e8, epochs=3, theta_postpone=1)
        state = init_search(space, lut, hyper, ds, seed)
        with pytest.raises(DivergenceError):
            for epoch in range(3):
                state.epoch = epoch
                train_weights_epoch(state)


class TestLatencyOnly:
    def test_theta_converges_to_cheapest_candidates(self):
        space = micro_space()
        lut = synthetic_lut(space)
        ds = synth_dataset(classes=3, per_class=160, resolution=8, seed=2)
        hyper = SearchHyperParams(
            epochs=50, theta_postpone=0, latency_only=True, batch_size=4,
            theta_weight_decay=0.0,
        )
        state = run_search(space, lut, hyper, ds, seed=6)
        for slot, t in zip(space.slots, state.theta.layers):
            cheapest = int(np.argmin(slot_latency_vector(lut, slot)))
            assert layer_probs(t.data)[cheapest] >= 0.9

    def test_expected_latency_under_probs_non_increasing(self):
        space = micro_space()
        lut = synthetic_lut(space)
        ds = synth_dataset(classes=3, per_class=32, resolution=8, seed=3)
        hyper = SearchHyperParams(
            epochs=40, theta_postpone=0, latency_only=True, batch_size=8,
            theta_weight_decay=0.0,
        )
        state = init_search(space, lut, hyper, ds, seed=7)
        values = [state.expected_latency_under_probs()]
        for epoch in range(hyper.epochs):
            state.epoch = epoch
            state.tau = hyper.tau0 * hyper.tau_decay ** epoch
            train_theta_epoch(state)
            values.append(state.expected_latency_under_probs())
        increases = sum(1 for a, b in zip(values, values[1:]) if b > a + 1e-9)
        assert increases <= max(1, int(0.05 * len(values)))

    def test_ce_field_is_null_in_latency_only_mode(self):
        space, lut, hyper, ds, seed = micro_setup(
            epochs=2, theta_postpone=0, latency_only=True
        )
        state = run_search(space, lut, hyper, ds, seed)
        assert all(l["ce"] is None for l in state.history)


class TestRetraining:
    def test_zero_epochs_reports_chance_level(self):
        space = micro_space()
        ds = synth_dataset(classes=3, per_class=60, resolution=8, seed=4)
        hyper = SearchHyperParams()
        arch = space.random_arch(np.random.default_rng(8))
        _, metrics = train_from_scratch(space, arch, ds, epochs=0, hyper=hyper, seed=9)
        assert set(metrics) == {
            "top1", "param_count", "flops", "predicted_latency_us", "measured_latency_us",
        }
        # untrained: binomial around 1/3 on 36 held-out samples
        assert 0.0 <= metrics["top1"] <= 0.7
        assert metrics["predicted_latency_us"] is None
        assert metrics["measured_latency_us"] > 0.0

    def test_learns_above_twice_chance(self):
        space = micro_space()
        lut = synthetic_lut(space)
        ds = synth_dataset(classes=3, per_class=80, resolution=8, seed=5)
        hyper = SearchHyperParams(batch_size=32)
        arch = space.random_arch(np.random.default_rng(10))
        _, metrics = train_from_scratch(space, arch, ds, epochs=8, hyper=hyper, seed=11, lut=lut)
        assert metrics["top1"] >= 2.0 / 3.0
        assert metrics["predicted_latency_us"] > 0.0

    def test_evaluate_top1_empty_rejected(self):
        space = micro_space()
        ds = synth_dataset(classes=3, per_class=2, resolution=8, seed=6)
        from dnas.data import Dataset

        empty = Dataset(ds.images[:0], ds.labels[:0], 3, ds.mean, ds.std)
        net = __import__("dnas.space", fromlist=["materialize"]).materialize(
            space, space.random_arch(np.random.default_rng(12)), np.random.default_rng(13)
        )
        with pytest.raises(ConfigurationError):
            evaluate_top1(net, empty)
