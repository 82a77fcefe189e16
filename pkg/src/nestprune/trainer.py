"""Joint training of the dense network and its capacity-``c`` subnetworks.

One step runs the dense network plus one masked forward/backward per
capacity, all through the shared classifier, stacks the per-loss gradients
into a :class:`GradientBundle`, integrates them block by block and applies
a plain SGD update. Masks are derived once per step from the current
scores.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .data import Dataset, batch_iterator
from .gradients import GradientBundle, IntegrationConfig, count_conflicts, integrate_bundle
from .layers import RunningStats
from .model import DENSE, PrunableModel, capacity_key

MODES = ("compatible", "edge_popup_scores_only", "frozen_scores")


class NumericalError(RuntimeError):
    """A loss or gradient became non-finite."""


@dataclass
class TrainConfig:
    capacities: tuple = (0.8, 0.6, 0.4, 0.2)
    lr: float = 0.05
    alpha: float = 0.5
    epochs: int = 5
    batch_size: int = 64
    seed: int = 0
    mode: str = "compatible"
    # capacity of the network trained by the first loss; 1.0 is the dense network
    base_capacity: float = 1.0
    combine: str = "original"
    # False sums the per-loss gradients directly instead of integrating them
    integrate: bool = True
    momentum: float = 0.0
    weight_decay: float = 0.0
    # None: filter score gradients by the mask except in edge-popup mode
    filter_scores: bool | None = None
    calibration_fraction: float = 1 / 30
    track_conflicts: bool = True

    def __post_init__(self):
        self.capacities = tuple(float(c) for c in self.capacities)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        for c in self.capacities + (self.base_capacity,):
            if not 0.0 < c <= 1.0:
                raise ValueError(f"capacities must lie in (0, 1], got {c}")
        if any(a <= b for a, b in zip(self.capacities, self.capacities[1:])):
            raise ValueError("capacities must be unique and strictly decreasing")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("lr and batch_size must be positive, epochs non-negative")
        if not 0.0 < self.calibration_fraction <= 1.0:
            raise ValueError("calibration_fraction must be in (0, 1]")
        self.integration = IntegrationConfig(alpha=self.alpha, shuffle_seed=self.seed,
                                             combine=self.combine)

    @property
    def score_filter(self) -> bool:
        if self.filter_scores is None:
            return self.mode != "edge_popup_scores_only"
        return self.filter_scores

    def trainable(self, name: str) -> bool:
        is_score = name.endswith(".score")
        if self.mode == "frozen_scores":
            return not is_score
        if self.mode == "edge_popup_scores_only":
            return is_score
        return True

    def echo(self) -> dict:
        return {k: getattr(self, k) for k in (
            "capacities", "lr", "alpha", "epochs", "batch_size", "seed", "mode", "base_capacity",
            "combine", "integrate", "momentum", "weight_decay", "filter_scores",
            "calibration_fraction")}


@dataclass
class StepReport:
    step: int
    losses: list[float]
    conflicts: np.ndarray | None
    grad_norms: np.ndarray | None = None


@dataclass
class TrainState:
    step: int = 0
    velocity: np.ndarray | None = None
    reports: list[StepReport] = field(default_factory=list)


def gradient_magnitude_report(bundle: GradientBundle) -> np.ndarray:
    """L2 norm of every loss's gradient in every block, shape ``(n_losses, n_blocks)``."""
    sq = np.add.reduceat(bundle.matrix ** 2, bundle.offsets[:-1], axis=1)
    return np.sqrt(sq)


def loss_masks(model: PrunableModel, cfg: TrainConfig, candidates=None) -> list[list[np.ndarray]]:
    """Masks for loss 0 (base network) followed by one per capacity."""
    if cfg.base_capacity == 1.0 and candidates is None:
        base = model.dense_masks()
    else:
        base = model.masks(cfg.base_capacity, allowed=candidates)
    return [base] + [model.masks(c, allowed=candidates) for c in cfg.capacities]


def compute_bundle(model: PrunableModel, x, y, cfg: TrainConfig, candidates=None):
    """Per-loss gradients for one batch. Returns ``(bundle, losses, base_moments)``."""
    names = list(model.parameters())
    frozen = [n for n in names if not cfg.trainable(n)]
    rows, losses, base_moments = [], [], None
    for k, masks in enumerate(loss_masks(model, cfg, candidates)):
        # overflow shows up as non-finite values, which are checked below
        with np.errstate(over="ignore", invalid="ignore"):
            fwd = model.forward(x, masks)
            if not np.all(np.isfinite(fwd.logits)):
                raise NumericalError(f"loss {k}: non-finite logits")
            loss, grad_logits = nx.softmax_cross_entropy(fwd.logits, y)
            if not math.isfinite(loss):
                raise NumericalError(f"loss {k} is not finite ({loss})")
            grads = model.backward(fwd, grad_logits, filter_scores=cfg.score_filter)
        if k == 0:
            base_moments = fwd.moments
        for n in frozen:
            grads.pop(n, None)
        rows.append(model.flatten(grads))
        losses.append(loss)
    matrix = np.stack(rows)
    if not np.all(np.isfinite(matrix)):
        raise NumericalError("non-finite gradient")
    return GradientBundle(model.blocks(), matrix), losses, base_moments


def _update_running_stats(model: PrunableModel, cfg: TrainConfig, moments) -> None:
    key = DENSE if cfg.base_capacity == 1.0 else capacity_key(cfg.base_capacity)
    if key not in model.bn_stats:
        model.bn_stats[key] = [bn.fresh_stats() for bn in model.bn_layers()]
    for bn, st, (mean, var, _) in zip(model.bn_layers(), model.bn_stats[key], moments):
        m = bn.momentum
        st.mean[...] = (1 - m) * st.mean + m * mean
        st.var[...] = (1 - m) * st.var + m * var


def train_step(model: PrunableModel, x, y, cfg: TrainConfig, state: TrainState | None = None,
               candidates=None) -> StepReport:
    """One update of ``model`` in place on batch ``(x, y)``."""
    state = state if state is not None else TrainState()
    if len(x) == 0:
        raise ValueError("empty batch")
    bundle, losses, moments = compute_bundle(model, x, y, cfg, candidates)
    if cfg.integrate:
        update = integrate_bundle(bundle, cfg.integration, step=state.step)
    else:
        update = bundle.matrix.sum(axis=0)
    conflicts = count_conflicts(bundle) if cfg.track_conflicts else None
    norms = gradient_magnitude_report(bundle) if cfg.track_conflicts else None

    params = model.parameters()
    theta = model.flatten(params)
    if cfg.weight_decay:
        update = update + cfg.weight_decay * theta
    trainable = model.flatten({n: np.ones(a.shape) if cfg.trainable(n) else np.zeros(a.shape)
                               for n, a in params.items()}).astype(bool)
    update = np.where(trainable, update, 0.0)
    if cfg.momentum:
        state.velocity = update if state.velocity is None else cfg.momentum * state.velocity + update
        update = state.velocity
    for name, delta in model.unflatten(update).items():
        if cfg.trainable(name):
            params[name] -= cfg.lr * delta
    if model.bn_layers():
        _update_running_stats(model, cfg, moments)

    report = StepReport(state.step, losses, conflicts, norms)
    state.step += 1
    state.reports.append(report)
    return report


def train(model: PrunableModel, dataset: Dataset, cfg: TrainConfig, state: TrainState | None = None,
          candidates=None, progress=None) -> TrainState:
    """Run ``cfg.epochs`` epochs of :func:`train_step`; returns the training state."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    state = state if state is not None else TrainState()
    for epoch in range(cfg.epochs):
        for idx in batch_iterator(len(dataset), cfg.batch_size, shuffle_seed=cfg.seed + epoch):
            report = train_step(model, dataset.images[idx], dataset.labels[idx], cfg, state,
                                candidates=candidates)
            if progress is not None:
                progress(epoch, report)
    return state


def calibration_indices(n: int, fraction: float, seed: int = 0) -> np.ndarray:
    k = max(1, math.ceil(fraction * n - 1e-9))
    return np.sort(np.random.default_rng(seed).permutation(n)[:k])


def adaptive_bn_recalibrate(model: PrunableModel, capacity: float, calibration_data,
                            batch_size: int | None = None, masks=None) -> list[RunningStats]:
    """Recompute batch-norm statistics for one capacity; parameters are not touched.

    Batches go through the masked network in training mode; the per-channel
    mean and population variance of each normalization layer's input are
    pooled exactly over all calibration batches and stored under
    ``model.bn_stats[capacity]``.
    """
    x = np.asarray(calibration_data, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("calibration data is empty")
    masks = model.masks(capacity) if masks is None else masks
    batch_size = batch_size or len(x)
    n_bn = len(model.bn_layers())
    count = [0] * n_bn
    mean = [None] * n_bn
    m2 = [None] * n_bn
    for lo in range(0, len(x), batch_size):
        fwd = model.forward(x[lo:lo + batch_size], masks, stats=None, keep_cache=False)
        for b, (bm, bv, nb) in enumerate(fwd.moments):
            if count[b] == 0:
                count[b], mean[b], m2[b] = nb, bm.copy(), bv * nb
            else:
                tot = count[b] + nb
                delta = bm - mean[b]
                mean[b] = mean[b] + delta * (nb / tot)
                m2[b] = m2[b] + bv * nb + delta ** 2 * (count[b] * nb / tot)
                count[b] = tot
    stats = [RunningStats(mean[b], m2[b] / count[b]) for b in range(n_bn)]
    model.bn_stats[capacity_key(capacity)] = stats
    return stats
