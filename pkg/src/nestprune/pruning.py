"""Post-training pruning at any capacity, nesting checks and COO export."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .container import FormatError, read_container, write_container
from .layers import PrunableConv2d, RunningStats
from .model import DENSE, PrunableModel, capacity_key

COO_MAGIC = b"NPRNCOO\0"
COO_VERSION = 1


@dataclass
class SparseLayer:
    """Surviving connections of one prunable layer.

    ``encoding == "element"``: ``rows``/``cols`` index the weight viewed as
    ``(out, fan_in)``; ``values`` holds one weight per pair.
    ``encoding == "kernel"``: ``rows`` lists kept output kernels, ``cols`` is
    empty and ``values`` is ``(len(rows), fan_in)``.
    """

    index: int
    shape: tuple
    encoding: str
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    def bits(self) -> np.ndarray:
        out, fan_in = self.shape[0], int(np.prod(self.shape[1:]))
        bits = np.zeros((out, fan_in), dtype=bool)
        if self.encoding == "element":
            bits[self.rows, self.cols] = True
        else:
            bits[self.rows] = True
        return bits.reshape(self.shape)

    def dense_weight(self) -> np.ndarray:
        out, fan_in = self.shape[0], int(np.prod(self.shape[1:]))
        w = np.zeros((out, fan_in))
        if self.encoding == "element":
            w[self.rows, self.cols] = self.values
        else:
            w[self.rows] = self.values
        return w.reshape(self.shape)


@dataclass
class SparseSubnetwork:
    capacity: float
    structured: bool
    arch: dict
    layers: list[SparseLayer]
    shared: dict[str, np.ndarray]  # biases, norm affine, heads
    bn_stats: list[RunningStats] = field(default_factory=list)

    def masks(self) -> list[np.ndarray]:
        return [l.bits() for l in self.layers]

    def to_model(self) -> PrunableModel:
        """Dense model holding the kept weights (zeros elsewhere) and this capacity's BN stats."""
        model = PrunableModel.from_arch(self.arch)
        params = model.parameters()
        for layer in self.layers:
            params[f"backbone.{layer.index}.weight"][...] = layer.dense_weight()
            params[f"backbone.{layer.index}.score"][...] = layer.bits()
        for name, arr in self.shared.items():
            params[name][...] = arr
        if self.bn_stats:
            model.bn_stats = {DENSE: self.bn_stats, capacity_key(self.capacity): self.bn_stats}
        return model

    def predict(self, x, batch_size: int = 1000):
        return self.to_model().predict(x, masks=self.masks(), stats=self.bn_stats or None,
                                       batch_size=batch_size)

    def nnz(self) -> list[int]:
        return [l.nnz for l in self.layers]


def _sparse_layer(index: int, weight: np.ndarray, bits: np.ndarray, kernel: bool) -> SparseLayer:
    out = weight.shape[0]
    w2 = weight.reshape(out, -1)
    b2 = bits.reshape(out, -1)
    if kernel:
        rows = np.flatnonzero(b2.all(axis=1)).astype(np.uint32)
        return SparseLayer(index, weight.shape, "kernel", rows, np.zeros(0, np.uint32), w2[rows].copy())
    rows, cols = np.nonzero(b2)  # row-major: lexicographically sorted
    return SparseLayer(index, weight.shape, "element", rows.astype(np.uint32), cols.astype(np.uint32),
                       w2[rows, cols].copy())


def _shared_tensors(model: PrunableModel) -> dict[str, np.ndarray]:
    return {n: a.copy() for n, a in model.parameters().items()
            if not (n.startswith("backbone.") and (n.endswith(".weight") or n.endswith(".score")))}


def _capacity_stats(model: PrunableModel, capacity: float) -> list[RunningStats]:
    key = capacity_key(capacity)
    if not model.bn_layers():
        return []
    if key not in model.bn_stats:
        warnings.warn(f"capacity {capacity} has no recalibrated batch-norm statistics; "
                      "exporting the dense statistics", stacklevel=3)
        key = DENSE
    return [s.copy() for s in model.bn_stats[key]]


def prune(model: PrunableModel, capacity: float, structured: bool = False) -> SparseSubnetwork:
    """Keep the top-``capacity`` connections of every prunable layer.

    With ``structured`` conv layers keep whole kernels ranked by mean score.
    """
    if not 0.0 < capacity <= 1.0:
        raise ValueError(f"capacity must be in (0, 1], got {capacity}")
    if structured and not model.has_conv():
        raise ValueError("structured pruning needs at least one convolutional layer")
    masks = model.masks(capacity, structured=structured)
    layers = []
    prunable = [(i, l) for i, l in enumerate(model.backbone) if l.prunable]
    for (i, layer), bits in zip(prunable, masks):
        kernel = structured and isinstance(layer, PrunableConv2d)
        layers.append(_sparse_layer(i, layer.weight, bits, kernel))
    return SparseSubnetwork(float(capacity), structured, model.arch(), layers, _shared_tensors(model),
                            _capacity_stats(model, capacity))


def structured_prune(model: PrunableModel, capacity: float) -> SparseSubnetwork:
    return prune(model, capacity, structured=True)


@dataclass
class NestingReport:
    capacities: list[float]
    violations: list[dict]

    @property
    def ok(self) -> bool:
        return not self.violations


def verify_nesting(model: PrunableModel, capacities, masks: dict | None = None,
                   structured: bool = False, max_coords: int = 20) -> NestingReport:
    """Check ``mask(c_small) ⊆ mask(c_large)`` for every pair of capacities.

    ``masks`` maps capacity -> per-layer masks and overrides the model's own.
    """
    caps = sorted({float(c) for c in capacities})
    if len(caps) < 2:
        raise ValueError("need at least two capacities")
    masks = masks or {}
    got = {c: masks.get(c) or model.masks(c, structured=structured) for c in caps}
    violations = []
    for a, small in enumerate(caps):
        for large in caps[a + 1:]:
            for layer, (ms, ml) in enumerate(zip(got[small], got[large])):
                bad = np.argwhere(ms & ~ml)
                if len(bad):
                    violations.append({"small": small, "large": large, "layer": layer,
                                       "count": int(len(bad)),
                                       "coords": [tuple(int(v) for v in c) for c in bad[:max_coords]]})
    return NestingReport(caps, violations)


def theoretical_macs(sub: SparseSubnetwork, input_shape) -> int:
    """Multiply-accumulates per sample of the kept prunable connections."""
    shape = tuple(input_shape)  # (C, H, W)
    macs = 0
    layers = {l.index: l for l in sub.layers}
    for i, cfg in enumerate(sub.arch["backbone"]):
        if cfg["kind"] == "prunable_conv2d":
            ho = nx.conv_output_size(shape[1], cfg["k"], cfg["stride"], cfg["padding"])
            wo = nx.conv_output_size(shape[2], cfg["k"], cfg["stride"], cfg["padding"])
            n = layers[i].nnz
            macs += n * ho * wo
            shape = (cfg["out"], ho, wo)
        elif cfg["kind"] == "prunable_linear":
            macs += layers[i].nnz
            shape = (cfg["out"],)
        elif cfg["kind"] == "flatten":
            shape = (int(np.prod(shape)),)
    return macs


# ---- COO container ---------------------------------------------------------

def export_coo(sub: SparseSubnetwork, path) -> int:
    """Write ``sub`` to ``path``; returns the file size in bytes."""
    arrays, table = [], []
    for n, layer in enumerate(sub.layers):
        arrays += [(f"layer{n}.rows", layer.rows), (f"layer{n}.cols", layer.cols),
                   (f"layer{n}.values", layer.values)]
        table.append({"index": layer.index, "shape": list(layer.shape), "encoding": layer.encoding,
                      "nnz": layer.nnz})
    shared = sorted(sub.shared)
    arrays += [(f"shared.{name}", sub.shared[name]) for name in shared]
    for b, st in enumerate(sub.bn_stats):
        arrays += [(f"bn.{b}.mean", st.mean), (f"bn.{b}.var", st.var)]
    header = {"kind": "coo_subnetwork", "capacity": sub.capacity, "structured": sub.structured,
              "arch": sub.arch, "layers": table, "shared": shared, "bn_layers": len(sub.bn_stats)}
    return write_container(path, COO_MAGIC, COO_VERSION, header, arrays)


def _check_sorted(layer: SparseLayer, path) -> None:
    if layer.encoding == "kernel":
        if np.any(np.diff(layer.rows.astype(np.int64)) <= 0):
            raise FormatError(f"{path}: kernel indices not strictly increasing")
        return
    key = layer.rows.astype(np.int64) * (int(np.prod(layer.shape[1:])) + 1) + layer.cols
    if np.any(np.diff(key) <= 0):
        raise FormatError(f"{path}: COO indices not strictly sorted")
    fan_in = int(np.prod(layer.shape[1:]))
    if layer.rows.size and (layer.rows.max() >= layer.shape[0] or layer.cols.max() >= fan_in):
        raise FormatError(f"{path}: COO index out of range")


def import_coo(path) -> SparseSubnetwork:
    header, arrays = read_container(path, COO_MAGIC, COO_VERSION)
    if header.get("kind") != "coo_subnetwork":
        raise FormatError(f"{path}: not a COO subnetwork")
    try:
        layers = []
        for n, entry in enumerate(header["layers"]):
            layer = SparseLayer(entry["index"], tuple(entry["shape"]), entry["encoding"],
                                arrays[f"layer{n}.rows"], arrays[f"layer{n}.cols"],
                                arrays[f"layer{n}.values"])
            if layer.nnz != entry["nnz"]:
                raise FormatError(f"{path}: layer {n} nnz mismatch")
            _check_sorted(layer, path)
            layers.append(layer)
        shared = {name: arrays[f"shared.{name}"] for name in header["shared"]}
        stats = [RunningStats(arrays[f"bn.{b}.mean"], arrays[f"bn.{b}.var"])
                 for b in range(header["bn_layers"])]
    except KeyError as exc:
        raise FormatError(f"{path}: missing field {exc}") from None
    return SparseSubnetwork(float(header["capacity"]), bool(header["structured"]), header["arch"],
                            layers, shared, stats)


def subnetworks_equal(a: SparseSubnetwork, b: SparseSubnetwork) -> bool:
    """Bit-exact equality of two subnetworks."""
    if (a.capacity, a.structured, a.arch) != (b.capacity, b.structured, b.arch):
        return False
    if len(a.layers) != len(b.layers) or sorted(a.shared) != sorted(b.shared):
        return False
    for x, y in zip(a.layers, b.layers):
        if (x.index, tuple(x.shape), x.encoding) != (y.index, tuple(y.shape), y.encoding):
            return False
        for u, v in ((x.rows, y.rows), (x.cols, y.cols), (x.values, y.values)):
            if u.shape != v.shape or u.tobytes() != v.tobytes():
                return False
    for k in a.shared:
        if a.shared[k].tobytes() != b.shared[k].tobytes():
            return False
    if len(a.bn_stats) != len(b.bn_stats):
        return False
    return all(s.mean.tobytes() == t.mean.tobytes() and s.var.tobytes() == t.var.tobytes()
               for s, t in zip(a.bn_stats, b.bn_stats))
