"""Latency-aware loss and the two-phase alternating search procedure.

Each search epoch first trains operator weights on the training split with
SGD-momentum under a cosine learning-rate schedule, then trains the
architecture logits theta on the held-out split with Adam. Theta updates are
postponed for the first few epochs so operators are partially trained before
cheap blocks can win by cost alone. The Gumbel-Softmax temperature anneals
exponentially per epoch: tau(e) = tau0 * decay^e.

The loss multiplies cross-entropy by a latency penalty::

    loss = CE * alpha * ln(latency_us) ** beta

with the expected latency of the drawn masks standing in for a sampled
architecture's latency (one-sample estimate, differentiable through the
lookup table). An additive variant (CE + alpha * ln(latency)^beta) exists
behind a flag for ablations only. Latency-only ablation replaces the CE
factor by the constant 1, which drives theta toward each layer's cheapest
candidate.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .data import Dataset, SplitSpec, augment, batch_indices, split
from .errors import ConfigurationError, DivergenceError
from .latency import LatencyTable, arch_latency, bench_module, expected_latency
from .optim import AdamState, SgdMomentum, cosine_lr
from .space import ArchDescriptor, SearchSpace, arch_param_count, materialize
from .supernet import (
    Supernet,
    ThetaParams,
    arch_entropy,
    sample_gumbel_mask,
    save_theta,
)

LOSS_DIVERGENCE_LIMIT = 1e4


@dataclass(frozen=True)
class SearchHyperParams:
    alpha: float = 0.2
    beta: float = 0.6
    tau0: float = 5.0
    tau_decay: float = math.exp(-0.045)
    epochs: int = 30
    theta_postpone: int = 4
    batch_size: int = 64
    theta_batch_size: int | None = None  # None: use batch_size
    w_lr: float = 0.1
    w_momentum: float = 0.9
    w_weight_decay: float = 1e-4
    theta_lr: float = 1e-2
    theta_weight_decay: float = 5e-4
    split_fraction: float = 0.8
    class_subset: int | None = None
    additive_loss: bool = False
    latency_only: bool = False
    retrain_epochs: int = 40
    retrain_lr: float = 0.1
    retrain_weight_decay: float = 4e-5
    retrain_dropout: float = 0.2

    def __post_init__(self):
        if self.alpha <= 0 or self.beta < 0:
            raise ConfigurationError(f"alpha must be > 0 and beta >= 0, got {self.alpha}, {self.beta}")
        if self.tau0 <= 0 or not 0.0 < self.tau_decay < 1.0:
            raise ConfigurationError(
                f"tau0 must be > 0 and decay in (0, 1), got {self.tau0}, {self.tau_decay}"
            )
        if not 0.0 < self.split_fraction < 1.0:
            raise ConfigurationError(f"split fraction must be in (0, 1), got {self.split_fraction}")
        if not 0 <= self.theta_postpone < self.epochs:
            raise ConfigurationError(
                f"theta postponement ({self.theta_postpone}) must be < epochs ({self.epochs})"
            )

    def with_overrides(self, **kwargs) -> "SearchHyperParams":
        return replace(self, **kwargs)


def latency_aware_loss(ce, lat_us, alpha: float, beta: float, additive: bool = False):
    """Combine cross-entropy with the latency penalty (microseconds in)."""
    if float(lat_us.data) <= 1.0:
        raise ConfigurationError(
            f"latency term needs > 1 microsecond for a positive log, got {float(lat_us.data)}"
        )
    penalty = T.mul_const(T.pow_const(T.tlog(lat_us), beta), alpha)
    if additive:
        return T.add(ce, penalty)
    return T.mul(ce, penalty)


@dataclass
class SearchState:
    space: SearchSpace
    lut: LatencyTable
    hyper: SearchHyperParams
    supernet: Supernet
    theta: ThetaParams
    w_opt: SgdMomentum
    theta_opt: AdamState
    rng: np.random.Generator
    train_set: Dataset
    val_set: Dataset
    epoch: int = 0
    tau: float = 5.0
    history: list = field(default_factory=list)

    def expected_latency_under_probs(self) -> float:
        """E[latency] under softmax(theta) itself (not a mask draw)."""
        from .latency import fixed_ops_latency, slot_latency_vector
        from .supernet import layer_probs

        total = fixed_ops_latency(self.lut, self.space)
        for slot, t in zip(self.space.slots, self.theta.layers):
            total += float(layer_probs(t.data) @ slot_latency_vector(self.lut, slot))
        return total


def init_search(space, lut, hyper, dataset, seed) -> SearchState:
    if lut.space_hash != space.config_hash:
        raise ConfigurationError(
            f"latency table was built for space {lut.space_hash}, not {space.config_hash}"
        )
    if not lut.covers(space):
        raise ConfigurationError("latency table does not cover every (slot, candidate) pair")
    if hyper.class_subset is not None and hyper.class_subset < dataset.num_classes:
        keep = np.nonzero(dataset.labels < hyper.class_subset)[0]
        dataset = Dataset(
            dataset.images[keep], dataset.labels[keep], hyper.class_subset,
            dataset.mean, dataset.std,
        )
    rng = np.random.default_rng(seed)
    supernet = Supernet(space, rng)
    theta = ThetaParams(space)
    w_opt = SgdMomentum(
        supernet.named_parameters(), hyper.w_lr, hyper.w_momentum, hyper.w_weight_decay
    )
    theta_opt = AdamState(
        theta.named_parameters(), hyper.theta_lr, weight_decay=hyper.theta_weight_decay
    )
    train_set, val_set = split(dataset, SplitSpec(hyper.split_fraction, seed))
    return SearchState(
        space, lut, hyper, supernet, theta, w_opt, theta_opt, rng, train_set, val_set,
        tau=hyper.tau0,
    )


def _zero_all_grads(state: SearchState):
    state.w_opt.zero_grad()
    state.theta_opt.zero_grad()


def _search_loss(state: SearchState, x, labels):
    logits, masks = state.supernet(
        T.Tensor(x), state.theta, state.tau, rng=state.rng
    )
    ce = T.cross_entropy(logits, labels)
    elat = expected_latency(state.lut, state.space, masks.tensors)
    loss = latency_aware_loss(
        ce, elat, state.hyper.alpha, state.hyper.beta, state.hyper.additive_loss
    )
    return loss, float(ce.data), float(elat.data)


def _check_loss(loss_val, epoch, phase):
    if not np.isfinite(loss_val) or loss_val > LOSS_DIVERGENCE_LIMIT:
        raise DivergenceError(f"loss diverged to {loss_val} (epoch {epoch}, {phase} phase)")


def train_weights_epoch(state: SearchState) -> dict:
    """One pass over the training split; only operator weights move."""
    hyper = state.hyper
    lr = cosine_lr(state.epoch, hyper.epochs, hyper.w_lr)
    ces, lats = [], []
    state.supernet.train()
    for idx in batch_indices(len(state.train_set), hyper.batch_size, state.rng):
        x = augment(state.train_set.to_float(idx), state.rng)
        labels = state.train_set.label_batch(idx)
        _zero_all_grads(state)
        loss, ce_val, lat_val = _search_loss(state, x, labels)
        _check_loss(loss.item(), state.epoch, "weights")
        loss.backward()
        state.w_opt.step(lr=lr)
        ces.append(ce_val)
        lats.append(lat_val)
    _zero_all_grads(state)
    return {
        "epoch": state.epoch,
        "phase": "weights",
        "tau": state.tau,
        "ce": float(np.mean(ces)),
        "expected_lat_us": float(np.mean(lats)),
        "entropy_nats": arch_entropy(state.theta),
        "lr": lr,
    }


def _latency_only_loss(state: SearchState):
    masks = []
    for t in state.theta.layers:
        mask, _ = sample_gumbel_mask(t, state.tau, rng=state.rng)
        masks.append(mask)
    elat = expected_latency(state.lut, state.space, masks)
    one = T.as_const(np.float32(1.0))
    loss = latency_aware_loss(one, elat, state.hyper.alpha, state.hyper.beta)
    return loss, float(elat.data)


def train_theta_epoch(state: SearchState) -> dict:
    """One pass over the held-out split; only architecture logits move.

    The architecture optimizer sees one Gumbel draw per batch, so smaller
    theta batches mean more draws per epoch at the same total compute; the
    default matches the weight phase's batch size.
    """
    hyper = state.hyper
    theta_bs = hyper.theta_batch_size or hyper.batch_size
    ces, lats = [], []
    state.supernet.train()
    for idx in batch_indices(len(state.val_set), theta_bs, state.rng):
        _zero_all_grads(state)
        if hyper.latency_only:
            loss, lat_val = _latency_only_loss(state)
            ce_val = None
        else:
            x = state.val_set.to_float(idx)
            labels = state.val_set.label_batch(idx)
            loss, ce_val, lat_val = _search_loss(state, x, labels)
        _check_loss(loss.item(), state.epoch, "theta")
        loss.backward()
        state.theta_opt.step()
        if ce_val is not None:
            ces.append(ce_val)
        lats.append(lat_val)
    _zero_all_grads(state)
    return {
        "epoch": state.epoch,
        "phase": "theta",
        "tau": state.tau,
        "ce": float(np.mean(ces)) if ces else None,
        "expected_lat_us": float(np.mean(lats)),
        "entropy_nats": arch_entropy(state.theta),
        "lr": hyper.theta_lr,
    }


def run_search(space, lut, hyper, dataset, seed, out_dir=None, on_metrics=None) -> SearchState:
    """The full alternating search; optionally persists checkpoint + metrics.

    With an ``out_dir``, writes ``metrics.jsonl`` (one JSON object per phase
    per line) while running and an atomic ``theta.json`` checkpoint at the
    end.
    """
    state = init_search(space, lut, hyper, dataset, seed)
    metrics_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_fh = open(os.path.join(out_dir, "metrics.jsonl"), "w")

    def emit(line):
        state.history.append(line)
        if metrics_fh is not None:
            metrics_fh.write(json.dumps(line, sort_keys=True) + "\n")
            metrics_fh.flush()
        if on_metrics is not None:
            on_metrics(line)

    try:
        for epoch in range(hyper.epochs):
            state.epoch = epoch
            state.tau = hyper.tau0 * hyper.tau_decay ** epoch
            if not hyper.latency_only:
                emit(train_weights_epoch(state))
            if epoch >= hyper.theta_postpone:
                emit(train_theta_epoch(state))
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    if out_dir is not None:
        save_theta(
            os.path.join(out_dir, "theta.json"),
            state.theta,
            tau=state.tau,
            epoch=state.epoch,
            rng_state=state.rng.bit_generator.state,
        )
    return state


# -- retraining a sampled architecture ----------------------------------------


def train_from_scratch(
    space: SearchSpace,
    arch: ArchDescriptor,
    dataset: Dataset,
    epochs: int,
    hyper: SearchHyperParams,
    seed: int,
    lut: LatencyTable | None = None,
):
    """Train one architecture with fresh weights; returns (net, metrics).

    SGD with momentum, 10x step decay at 25/50/75% of the epoch budget,
    flip+crop augmentation, dropout before the classifier. ``epochs=0`` is
    allowed and reports untrained (chance-level) accuracy. Metrics carry the
    usual reporting columns: top-1, parameter count, multiply-adds, predicted
    and measured latency.
    """
    rng = np.random.default_rng(seed)
    net = materialize(space, arch, rng, dropout_p=hyper.retrain_dropout)
    train_set, heldout = split(dataset, SplitSpec(hyper.split_fraction, seed))
    opt = SgdMomentum(
        net.named_parameters(), hyper.retrain_lr, hyper.w_momentum, hyper.retrain_weight_decay
    )
    milestones = {m for m in (epochs // 4, epochs // 2, (3 * epochs) // 4) if m > 0}
    for epoch in range(epochs):
        decay_steps = sum(1 for m in milestones if epoch >= m)
        lr = hyper.retrain_lr * (0.1 ** decay_steps)
        net.train()
        for idx in batch_indices(len(train_set), hyper.batch_size, rng):
            x = augment(train_set.to_float(idx), rng)
            labels = train_set.label_batch(idx)
            opt.zero_grad()
            loss = T.cross_entropy(net(T.Tensor(x), rng=rng), labels)
            _check_loss(loss.item(), epoch, "retrain")
            loss.backward()
            opt.step(lr=lr)

    top1 = evaluate_top1(net, heldout)
    predicted = arch_latency(lut, space, arch) if lut is not None else None
    res = space.input_resolution
    measured = bench_module(net, (1, 3, res, res), repeats=30, warmup=5, rng=rng)
    metrics = {
        "top1": top1,
        "param_count": arch_param_count(space, arch),
        "flops": net.total_flops(),
        "predicted_latency_us": predicted,
        "measured_latency_us": measured,
    }
    return net, metrics


def evaluate_top1(net, dataset: Dataset, batch_size: int = 128) -> float:
    if len(dataset) == 0:
        raise ConfigurationError("cannot evaluate on an empty dataset")
    net.eval()
    correct = 0
    for idx in batch_indices(len(dataset), batch_size):
        with T.no_grad():
            logits = net(T.Tensor(dataset.to_float(idx)))
        correct += int((np.argmax(logits.data, axis=1) == dataset.label_batch(idx)).sum())
    return correct / len(dataset)
