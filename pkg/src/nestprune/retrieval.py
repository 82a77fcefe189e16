"""Self-test / cross-test retrieval evaluation.

Query and gallery embeddings may come from subnetworks of different
capacity. Ranking is by cosine similarity of L2-normalized embeddings, ties
broken by gallery index. When query and gallery are the same item set, an
item never retrieves itself.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .model import PrunableModel


@dataclass
class EmbeddingSet:
    matrix: np.ndarray
    labels: np.ndarray
    capacity: float = 1.0
    ids: np.ndarray | None = None  # item identities; equal ids are excluded from each other's ranking

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.matrix.ndim != 2 or len(self.matrix) != len(self.labels):
            raise ValueError("embedding matrix rows must match the label count")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("embeddings contain non-finite values")
        if self.ids is not None and len(self.ids) != len(self.labels):
            raise ValueError("ids must match the label count")


def extract_embeddings(model, capacity: float, images, labels, masks=None, stats=None,
                       ids=None) -> EmbeddingSet:
    """L2-normalized embeddings of ``images`` from the capacity-``c`` subnetwork.

    ``model`` is a :class:`PrunableModel` or anything with a compatible
    ``predict`` (e.g. a ``SparseSubnetwork``).
    """
    if len(images) == 0:
        raise ValueError("dataset is empty")
    if isinstance(model, PrunableModel):
        emb, _ = model.predict(images, capacity, masks=masks, stats=stats)
    else:
        emb, _ = model.predict(images)
    ids = np.arange(len(labels)) if ids is None else ids
    return EmbeddingSet(nx.l2_normalize_rows(emb), labels, capacity, ids)


def _ranked(query: EmbeddingSet, gallery: EmbeddingSet, chunk: int = 512):
    """Yield ``(relevant, valid)`` boolean matrices in rank order, per query chunk."""
    if query.matrix.shape[1] != gallery.matrix.shape[1]:
        raise ValueError("query and gallery embedding dimensions differ")
    for lo in range(0, len(query.labels), chunk):
        q = query.matrix[lo:lo + chunk]
        sim = q @ gallery.matrix.T
        order = np.argsort(-sim, axis=1, kind="stable")
        rel = gallery.labels[order] == query.labels[lo:lo + chunk, None]
        if query.ids is not None and gallery.ids is not None:
            valid = gallery.ids[order] != query.ids[lo:lo + chunk, None]
        else:
            valid = np.ones_like(rel)
        yield rel & valid, valid


def average_precisions(query: EmbeddingSet, gallery: EmbeddingSet) -> np.ndarray:
    """AP per query; NaN for queries without any positive."""
    out = []
    for rel, valid in _ranked(query, gallery):
        hits = np.cumsum(rel, axis=1)
        seen = np.maximum(np.cumsum(valid, axis=1), 1)
        npos = rel.sum(axis=1)
        ap = np.where(rel, hits / seen, 0.0).sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            out.append(np.where(npos > 0, ap / npos, np.nan))
    return np.concatenate(out)


def mean_average_precision(query: EmbeddingSet, gallery: EmbeddingSet) -> float:
    ap = average_precisions(query, gallery)
    ap = ap[~np.isnan(ap)]
    return float(ap.mean()) if ap.size else float("nan")


def recall_at_k(query: EmbeddingSet, gallery: EmbeddingSet, k: int = 1) -> float:
    """Fraction of queries (with at least one positive) whose top-k contains a positive."""
    if k < 1:
        raise ValueError("k must be >= 1")
    hit, counted = 0, 0
    for rel, valid in _ranked(query, gallery):
        rank = np.cumsum(valid, axis=1)
        top = rel & (rank <= k)
        has_pos = rel.any(axis=1)
        hit += int(top.any(axis=1)[has_pos].sum())
        counted += int(has_pos.sum())
    return hit / counted if counted else float("nan")


def metric_fn(name: str):
    """``"map"`` or ``"recall@k"``."""
    name = name.lower()
    if name == "map":
        return mean_average_precision
    if name.startswith("recall@"):
        k = int(name.split("@", 1)[1])
        return lambda q, g: recall_at_k(q, g, k)
    raise ValueError(f"unknown metric {name!r}; use 'map' or 'recall@k'")


@dataclass
class EvalMatrix:
    capacities: list[float]
    metric: str
    grid: np.ndarray  # grid[q][g]: query capacity q, gallery capacity g

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        n = len(self.capacities)
        if self.grid.shape != (n, n):
            raise ValueError(f"grid must be {n}x{n}")

    def self_test(self) -> np.ndarray:
        return np.diag(self.grid).copy()

    def to_dict(self) -> dict:
        return {"metric": self.metric, "capacities": list(self.capacities),
                "grid": self.grid.tolist(), "rows": "query", "cols": "gallery"}

    def write(self, path) -> None:
        """JSON, or CSV when ``path`` ends in ``.csv``."""
        path = Path(path)
        if path.suffix == ".csv":
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow([f"{self.metric} query\\gallery"] + [repr(c) for c in self.capacities])
                for c, row in zip(self.capacities, self.grid):
                    w.writerow([repr(c)] + [repr(float(v)) for v in row])
        else:
            path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def read(cls, path) -> "EvalMatrix":
        d = json.loads(Path(path).read_text())
        return cls(d["capacities"], d["metric"], d["grid"])


def cross_test_matrix(model, capacities, query_images, query_labels, gallery_images=None,
                      gallery_labels=None, metric: str = "map", stats_for=None) -> EvalMatrix:
    """Metric for every (query capacity, gallery capacity) pair.

    Without a separate gallery the query items double as gallery and
    self-matches are excluded. ``stats_for(c)`` may supply the BN statistics
    per capacity (default: the model's stored ones).
    """
    fn = metric_fn(metric)
    same = gallery_images is None
    caps = [float(c) for c in capacities]
    q_sets, g_sets = {}, {}
    for c in caps:
        stats = stats_for(c) if stats_for else None
        q_sets[c] = extract_embeddings(model, c, query_images, query_labels, stats=stats)
        if same:
            g_sets[c] = q_sets[c]
        else:
            g_sets[c] = extract_embeddings(model, c, gallery_images, gallery_labels, stats=stats,
                                           ids=-1 - np.arange(len(gallery_labels)))
    grid = [[fn(q_sets[cq], g_sets[cg]) for cg in caps] for cq in caps]
    return EvalMatrix(caps, metric, grid)
