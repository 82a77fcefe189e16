"""Flat ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored. Lists are comma separated.
See ``docs/CONFIG.md`` for the schema.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


def _floats(v: str) -> tuple:
    return tuple(float(x) for x in v.split(",") if x.strip())


def _bool(v: str) -> bool:
    low = v.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _opt_bool(v: str):
    return None if v.lower() in ("auto", "none") else _bool(v)


SCHEMA = {
    # training
    "capacities": _floats,
    "alpha": float,
    "eta": float,
    "epochs": int,
    "batch": int,
    "seed": int,
    "mode": str,
    "combine": str,
    "integrate": _bool,
    "momentum": float,
    "weight_decay": float,
    "filter_scores": _opt_bool,
    "calibration_fraction": float,
    # model
    "model": str,  # mlp | convnet
    "hidden": lambda v: tuple(int(x) for x in v.split(",") if x.strip()),
    "embed_dim": int,
    "batchnorm": _bool,
    # data
    "dataset": str,  # mnist | idx | cifar | blobs
    "train_images": str,
    "train_labels": str,
    "test_images": str,
    "test_labels": str,
    "cifar_train": lambda v: tuple(x.strip() for x in v.split(",") if x.strip()),
    "cifar_test": lambda v: tuple(x.strip() for x in v.split(",") if x.strip()),
    "mnist_dir": str,
    "train_subset": int,
    "test_subset": int,
    "blobs_classes": int,
    "blobs_per_class": int,
    "blobs_dim": int,
    # outputs
    "out": str,
    # one-shot vs iterative score-only pruning study
    "study_capacities": _floats,
    "study_seeds": int,
    "ip_schedule": _floats,
    "study_epochs": int,
}

DEFAULTS = {
    "capacities": (0.8, 0.6, 0.4, 0.2),
    "alpha": 0.5,
    "eta": 0.05,
    "epochs": 5,
    "batch": 64,
    "seed": 0,
    "mode": "compatible",
    "combine": "original",
    "integrate": True,
    "momentum": 0.0,
    "weight_decay": 0.0,
    "filter_scores": None,
    "calibration_fraction": 1 / 30,
    "model": "mlp",
    "hidden": (256, 128),
    "embed_dim": 64,
    "batchnorm": True,
    "dataset": "mnist",
}


@dataclass
class RunConfig:
    values: dict
    source: str | None = None
    lines: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    values = dict(DEFAULTS)
    lines = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in lines:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r} (first on line {lines[key]})")
        try:
            values[key] = SCHEMA[key](value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
        lines[key] = lineno
    return RunConfig(values, source, lines)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path))


def dump_config(values: dict) -> str:
    out = []
    for k, v in values.items():
        if isinstance(v, (tuple, list)):
            v = ",".join(str(x) for x in v)
        out.append(f"{k} = {v}")
    return "\n".join(out) + "\n"
