"""Checkpoint files: every tensor, per-capacity BN statistics, config echo, seed."""
from __future__ import annotations

from .container import FormatError, read_container, write_container
from .layers import RunningStats
from .model import PrunableModel

MAGIC = b"NPRNCKPT"
VERSION = 1


def save_checkpoint(path, model: PrunableModel, config: dict | None = None, seed: int | None = None) -> int:
    arrays = [(name, arr) for name, arr in model.parameters().items()]
    stats_table = []
    for n, (cap, stats) in enumerate(sorted(model.bn_stats.items())):
        names = []
        for b, st in enumerate(stats):
            arrays.append((f"bn_stats.{n}.{b}.mean", st.mean))
            arrays.append((f"bn_stats.{n}.{b}.var", st.var))
            names.append([f"bn_stats.{n}.{b}.mean", f"bn_stats.{n}.{b}.var"])
        stats_table.append({"capacity": cap, "layers": names})
    header = {"kind": "checkpoint", "arch": model.arch(), "bn_stats": stats_table,
              "config": _jsonable(config or {}), "seed": seed}
    return write_container(path, MAGIC, VERSION, header, arrays)


def load_checkpoint(path) -> tuple[PrunableModel, dict]:
    """Returns ``(model, header)``; the header carries ``config`` and ``seed``."""
    header, arrays = read_container(path, MAGIC, VERSION)
    if header.get("kind") != "checkpoint":
        raise FormatError(f"{path}: not a checkpoint")
    model = PrunableModel.from_arch(header["arch"])
    try:
        model.set_parameters(arrays)
        model.bn_stats = {
            float(entry["capacity"]): [RunningStats(arrays[m], arrays[v]) for m, v in entry["layers"]]
            for entry in header["bn_stats"]
        }
    except KeyError as exc:
        raise FormatError(f"{path}: missing tensor {exc}") from None
    return model, header


def _jsonable(d):
    if isinstance(d, dict):
        return {str(k): _jsonable(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [_jsonable(v) for v in d]
    if isinstance(d, float) or isinstance(d, (int, str, bool)) or d is None:
        return d
    return str(d)
