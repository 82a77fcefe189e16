"""Conflict-aware integration of per-loss gradients.

Each loss contributes one gradient vector per parameter block. Within a
block, a gradient that conflicts with another (negative dot product) is
projected onto that gradient's normal plane; then the losses are combined
with weights ``cos(g_i, g_hat_i) ** alpha`` so that heavily conflicted
gradients count for less. Blocks are handled independently (one block per
conv kernel or per linear layer).

The hot loop over blocks runs in a compiled kernel when one is available
(``nestprune._kernels``) and otherwise in ``nestprune._kernels_py``. Set
``NESTPRUNE_PURE_PYTHON=1`` to force the fallback.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx

if os.environ.get("NESTPRUNE_PURE_PYTHON"):
    from . import _kernels_py as _backend
else:
    try:
        from . import _kernels as _backend
    except ImportError:  # extension not built
        from . import _kernels_py as _backend

BACKEND = _backend.BACKEND


@dataclass
class IntegrationConfig:
    alpha: float = 0.5
    shuffle_seed: int = 0
    zero_norm_epsilon: float = 1e-12
    # "original": weighted sum of the raw gradients; "projected": of the projected ones
    combine: str = "original"

    def __post_init__(self):
        if not math.isfinite(self.alpha) or self.alpha < 0:
            raise ValueError(f"alpha must be finite and >= 0, got {self.alpha}")
        if self.combine not in ("original", "projected"):
            raise ValueError(f"combine must be 'original' or 'projected', got {self.combine!r}")


@dataclass
class Block:
    name: str
    start: int
    length: int


@dataclass
class GradientBundle:
    """Per-loss gradients over a flat parameter vector split into blocks.

    ``matrix[i]`` is the full flattened gradient of loss ``i``; ``blocks``
    partition its columns.
    """

    blocks: list[Block]
    matrix: np.ndarray
    offsets: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] == 0:
            raise ValueError("bundle matrix must be (n_losses, n_params) with n_losses >= 1")
        pos = 0
        for b in self.blocks:
            if b.start != pos or b.length <= 0:
                raise ValueError(f"block {b.name!r} does not tile the parameter vector")
            pos += b.length
        if pos != self.matrix.shape[1]:
            raise ValueError(f"blocks cover {pos} entries, matrix has {self.matrix.shape[1]}")
        self.offsets = np.array([b.start for b in self.blocks] + [pos], dtype=np.int64)

    @classmethod
    def from_blocks(cls, per_loss: list[list[np.ndarray]], names=None) -> "GradientBundle":
        """Build from ``per_loss[i][b]`` flat vectors."""
        if not per_loss:
            raise ValueError("need at least one loss")
        n_blocks = len(per_loss[0])
        names = names or [f"block{b}" for b in range(n_blocks)]
        blocks, pos = [], 0
        for b in range(n_blocks):
            lengths = {np.asarray(g[b]).size for g in per_loss}
            if len(lengths) != 1 or any(len(g) != n_blocks for g in per_loss):
                raise ValueError(f"inconsistent gradient lengths in block {b}")
            length = lengths.pop()
            blocks.append(Block(names[b], pos, length))
            pos += length
        matrix = np.stack([np.concatenate([np.ravel(v) for v in g]) for g in per_loss])
        return cls(blocks, matrix)

    @property
    def n_losses(self) -> int:
        return self.matrix.shape[0]

    def block(self, b: int) -> np.ndarray:
        lo, hi = self.offsets[b], self.offsets[b + 1]
        return self.matrix[:, lo:hi]


def _check_vectors(grads) -> np.ndarray:
    g = np.asarray(grads, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] == 0:
        raise ValueError("expected a non-empty list of equal-length vectors")
    return np.ascontiguousarray(g)


def project(g_i, g_j, eps: float = nx.ZERO_NORM_EPS) -> np.ndarray:
    """Remove from ``g_i`` its component along ``g_j``."""
    g_i = nx.as_tensor(g_i).ravel()
    g_j = nx.as_tensor(g_j).ravel()
    if g_i.size != g_j.size:
        raise ValueError(f"length mismatch: {g_i.size} vs {g_j.size}")
    sq = float(g_j @ g_j)
    if math.sqrt(sq) < eps:
        return g_i.copy()
    h = g_i - (float(g_i @ g_j) / sq) * g_j
    # Projecting twice: when g_i is nearly parallel to g_j the first pass
    # leaves a rounding residual along g_j of order eps * |g_i|; the second
    # pass shrinks it to order eps * |h| (classical Gram-Schmidt fix).
    return h - (float(h @ g_j) / sq) * g_j


def shuffle_orders(n_losses: int, n_blocks: int, rng: np.random.Generator) -> np.ndarray:
    """Independent random visiting orders, shape ``(n_blocks, n_losses, n_losses)``."""
    base = np.broadcast_to(np.arange(n_losses, dtype=np.int64), (n_blocks, n_losses, n_losses))
    return np.ascontiguousarray(rng.permuted(base, axis=2))


def enumerate_project(grads, cfg: IntegrationConfig | None = None, orders=None) -> list[np.ndarray]:
    """Project each gradient away from every original gradient it conflicts with.

    For gradient ``i`` the originals are visited in ``orders[i]`` (a seeded
    shuffle by default); whenever the running result has a negative dot
    product with original ``g_j`` it is projected onto ``g_j``'s normal plane.
    """
    cfg = cfg or IntegrationConfig()
    g = _check_vectors(grads)
    n = g.shape[0]
    if orders is None:
        orders = shuffle_orders(n, 1, np.random.default_rng(cfg.shuffle_seed))[0]
    out = []
    for i in range(n):
        h = g[i].copy()
        for j in orders[i]:
            if float(h @ g[j]) < 0.0:
                h = project(h, g[j], cfg.zero_norm_epsilon)
        out.append(h)
    return out


def integration_weights(originals, projected, cfg: IntegrationConfig | None = None) -> np.ndarray:
    """``cos(g_i, g_hat_i) ** alpha`` with the cosine clamped to [0, 1].

    A gradient left untouched by the projection step has weight exactly 1.
    """
    cfg = cfg or IntegrationConfig()
    g = _check_vectors(originals)
    h = _check_vectors(projected)
    if g.shape != h.shape:
        raise ValueError("originals and projections differ in shape")
    gamma = np.ones(g.shape[0])
    if cfg.alpha == 0.0:
        return gamma
    for i in range(g.shape[0]):
        if np.array_equal(g[i], h[i]):
            continue
        cos = min(1.0, max(0.0, nx.cosine_similarity(g[i], h[i])))
        gamma[i] = cos ** cfg.alpha
    return gamma


def integrate(originals, projected, cfg: IntegrationConfig | None = None) -> np.ndarray:
    """Combine ``N + 1`` gradients into one: ``(N+1) * sum(w_i v_i) / sum(w_i)``.

    ``v_i`` is the original gradient, or its projection when
    ``cfg.combine == "projected"``.
    """
    cfg = cfg or IntegrationConfig()
    g = _check_vectors(originals)
    h = _check_vectors(projected)
    gamma = integration_weights(g, h, cfg)
    src = h if cfg.combine == "projected" else g
    total = gamma.sum()
    if total < cfg.zero_norm_epsilon:
        return src.sum(axis=0)
    return (gamma @ src) * (g.shape[0] / total)


def integrate_bundle(bundle: GradientBundle, cfg: IntegrationConfig | None = None,
                     step: int = 0) -> np.ndarray:
    """Integrate every block independently; returns the flat combined gradient.

    Visiting orders are drawn from ``(cfg.shuffle_seed, step)`` so each step
    gets a fresh, reproducible shuffle per block.
    """
    cfg = cfg or IntegrationConfig()
    rng = np.random.default_rng([cfg.shuffle_seed, step])
    orders = shuffle_orders(bundle.n_losses, len(bundle.blocks), rng)
    return _backend.integrate_blocks(bundle.matrix, bundle.offsets, orders, float(cfg.alpha),
                                     float(cfg.zero_norm_epsilon), cfg.combine == "projected")


def count_conflicts(bundle: GradientBundle) -> np.ndarray:
    """Unordered loss pairs with a negative dot product, per block."""
    return _backend.count_conflicts_blocks(bundle.matrix, bundle.offsets)


def write_conflict_log(stream, step: int, bundle: GradientBundle, counts=None) -> None:
    """Append one JSON line per block: ``{"step", "block", "count"}``."""
    counts = count_conflicts(bundle) if counts is None else counts
    for blk, c in zip(bundle.blocks, counts):
        stream.write(json.dumps({"step": step, "block": blk.name, "count": int(c)}) + "\n")
