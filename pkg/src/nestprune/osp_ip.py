"""One-shot vs iterative score-only pruning of a frozen random network.

Weights stay at their random initialization; only scores are trained.
One-shot pruning (OSP) trains the scores for each target capacity starting
from the dense network. Iterative pruning (IP) starts with a 50% subnetwork
and walks down a capacity schedule, each step choosing its connections
only among those kept by the previous step.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .model import PrunableModel, build_convnet
from .trainer import TrainConfig, adaptive_bn_recalibrate, calibration_indices, train

IP_START = 0.5


@dataclass
class StudyConfig:
    targets: tuple = (1.0, 0.5, 0.4, 0.3, 0.2, 0.1)
    ip_schedule: tuple = (0.5, 0.4, 0.3, 0.2, 0.1)
    seeds: int = 5
    epochs: int = 2
    lr: float = 0.1
    momentum: float = 0.9
    batch_size: int = 64
    calibration_fraction: float = 1 / 30

    def __post_init__(self):
        self.targets = tuple(float(t) for t in self.targets)
        self.ip_schedule = tuple(float(c) for c in self.ip_schedule)
        if not self.ip_schedule or self.ip_schedule[0] != IP_START:
            raise ValueError(f"the iterative schedule must start at {IP_START}")
        if any(a <= b for a, b in zip(self.ip_schedule, self.ip_schedule[1:])):
            raise ValueError("the iterative schedule must be strictly decreasing")
        missing = [t for t in self.targets if t < IP_START and t not in self.ip_schedule]
        if missing:
            raise ValueError(f"targets {missing} are not on the iterative schedule")


@dataclass
class StudyResult:
    targets: list[float]
    osp: np.ndarray  # (seeds, targets) accuracies
    ip: np.ndarray
    seeds: list[int] = field(default_factory=list)

    def summary(self) -> list[dict]:
        rows = []
        for j, t in enumerate(self.targets):
            rows.append({"capacity": t,
                         "osp_mean": float(self.osp[:, j].mean()), "osp_std": float(self.osp[:, j].std()),
                         "ip_mean": float(self.ip[:, j].mean()), "ip_std": float(self.ip[:, j].std())})
        return rows


def _accuracy(model: PrunableModel, capacity: float, masks, train_ds: Dataset, test_ds: Dataset,
              cfg: StudyConfig) -> float:
    cal = train_ds.images[calibration_indices(len(train_ds), cfg.calibration_fraction)]
    stats = adaptive_bn_recalibrate(model, capacity, cal, masks=masks)
    _, logits = model.predict(test_ds.images, masks=masks, stats=stats)
    return float((logits.argmax(axis=1) == test_ds.labels).mean())


def _score_config(cfg: StudyConfig, capacity: float, seed: int) -> TrainConfig:
    return TrainConfig(capacities=(), base_capacity=capacity, mode="edge_popup_scores_only",
                       lr=cfg.lr, momentum=cfg.momentum, epochs=cfg.epochs,
                       batch_size=cfg.batch_size, seed=seed, track_conflicts=False)


def one_shot(init: PrunableModel, capacity: float, train_ds, test_ds, cfg: StudyConfig, seed: int) -> float:
    model = copy.deepcopy(init)
    if capacity < 1.0:
        train(model, train_ds, _score_config(cfg, capacity, seed))
    return _accuracy(model, capacity, model.masks(capacity), train_ds, test_ds, cfg)


def iterative(init: PrunableModel, train_ds, test_ds, cfg: StudyConfig, seed: int) -> dict[float, float]:
    """Accuracy at every capacity of the iterative schedule."""
    model = copy.deepcopy(init)
    candidates = None
    out = {}
    for c in cfg.ip_schedule:
        train(model, train_ds, _score_config(cfg, c, seed), candidates=candidates)
        masks = model.masks(c, allowed=candidates)
        out[c] = _accuracy(model, c, masks, train_ds, test_ds, cfg)
        candidates = masks
    return out


def run_study(train_ds: Dataset, test_ds: Dataset, cfg: StudyConfig, model_factory=None,
              progress=None) -> StudyResult:
    """OSP and IP accuracies for every target capacity and seed.

    IP only exists below its 50% starting point; at and above it both
    protocols are the same one-shot run.
    """
    model_factory = model_factory or (lambda seed: build_convnet(
        in_channels=train_ds.images.shape[1], image_size=train_ds.images.shape[2],
        classes=train_ds.num_classes, seed=seed))
    osp = np.zeros((cfg.seeds, len(cfg.targets)))
    ip = np.zeros_like(osp)
    for s in range(cfg.seeds):
        init = model_factory(s)
        ip_acc = iterative(init, train_ds, test_ds, cfg, s)
        for j, t in enumerate(cfg.targets):
            if t == IP_START:
                osp[s, j] = ip[s, j] = ip_acc[t]
                continue
            osp[s, j] = one_shot(init, t, train_ds, test_ds, cfg, s)
            ip[s, j] = ip_acc[t] if t < IP_START else osp[s, j]
            if progress:
                progress(s, t, osp[s, j], ip[s, j])
    return StudyResult(list(cfg.targets), osp, ip, list(range(cfg.seeds)))
