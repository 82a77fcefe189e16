"""The prunable network: backbone of prunable/shared layers, embedding head, classifier.

Running batch-norm statistics live on the model, keyed by capacity, while
the affine parameters are shared by every subnetwork.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .gradients import Block
from .layers import (BatchNorm, Flatten, Linear, PrunableConv2d, PrunableLinear, ReLU,
                     RunningStats, build_mask, structured_mask)

DENSE = 1.0


def capacity_key(c: float) -> float:
    return round(float(c), 6)


@dataclass
class Forward:
    embedding: np.ndarray
    logits: np.ndarray
    caches: list
    # per batch-norm layer: (mean, var, elements per channel) of its input
    moments: list


class PrunableModel:
    def __init__(self, backbone: list, embedding_head: Linear | None, classifier: Linear):
        self.backbone = backbone
        self.embedding_head = embedding_head
        self.classifier = classifier
        self.bn_stats: dict[float, list[RunningStats]] = {
            DENSE: [bn.fresh_stats() for bn in self.bn_layers()]
        }

    # ---- structure -------------------------------------------------------

    def prunable_layers(self) -> list:
        return [l for l in self.backbone if l.prunable]

    def bn_layers(self) -> list[BatchNorm]:
        return [l for l in self.backbone if isinstance(l, BatchNorm)]

    def has_conv(self) -> bool:
        return any(isinstance(l, PrunableConv2d) for l in self.backbone)

    def arch(self) -> dict:
        return {
            "backbone": [l.config() for l in self.backbone],
            "embedding": self.embedding_head.config() if self.embedding_head else None,
            "classifier": self.classifier.config(),
        }

    @classmethod
    def from_arch(cls, arch: dict) -> "PrunableModel":
        rng = np.random.default_rng(0)
        layers = []
        for cfg in arch["backbone"]:
            kind = cfg["kind"]
            if kind == "prunable_linear":
                layers.append(PrunableLinear(cfg["in"], cfg["out"], rng, bias=cfg["bias"]))
            elif kind == "prunable_conv2d":
                layers.append(PrunableConv2d(cfg["in"], cfg["out"], cfg["k"], rng, stride=cfg["stride"],
                                             padding=cfg["padding"], bias=cfg["bias"]))
            elif kind == "batchnorm":
                layers.append(BatchNorm(cfg["channels"], eps=cfg["eps"], momentum=cfg["momentum"]))
            elif kind == "relu":
                layers.append(ReLU())
            elif kind == "flatten":
                layers.append(Flatten())
            else:
                raise ValueError(f"unknown layer kind {kind!r}")
        emb = arch["embedding"]
        head = Linear(emb["in"], emb["out"], rng) if emb else None
        clf = arch["classifier"]
        return cls(layers, head, Linear(clf["in"], clf["out"], rng))

    # ---- parameters ------------------------------------------------------

    def parameters(self) -> dict[str, np.ndarray]:
        """Every learnable array by name, in a fixed order. Arrays are live references."""
        params = {}
        for i, layer in enumerate(self.backbone):
            if layer.prunable:
                params[f"backbone.{i}.weight"] = layer.param.weight
                params[f"backbone.{i}.score"] = layer.param.score
                if layer.bias is not None:
                    params[f"backbone.{i}.bias"] = layer.bias
            elif isinstance(layer, BatchNorm):
                params[f"backbone.{i}.gamma"] = layer.gamma
                params[f"backbone.{i}.beta"] = layer.beta
        if self.embedding_head is not None:
            params["embedding.weight"] = self.embedding_head.weight
            params["embedding.bias"] = self.embedding_head.bias
        params["classifier.weight"] = self.classifier.weight
        params["classifier.bias"] = self.classifier.bias
        return params

    def set_parameters(self, values: dict[str, np.ndarray]) -> None:
        for name, arr in self.parameters().items():
            src = np.asarray(values[name], dtype=np.float64)
            if src.shape != arr.shape:
                raise ValueError(f"{name}: expected shape {arr.shape}, got {src.shape}")
            arr[...] = src

    def blocks(self) -> list[Block]:
        """Integration blocks: one per conv kernel, one per other array."""
        blocks, pos = [], 0
        for name, arr in self.parameters().items():
            if arr.ndim == 4 and (name.endswith(".weight") or name.endswith(".score")):
                per = arr[0].size
                for k in range(arr.shape[0]):
                    blocks.append(Block(f"{name}[{k}]", pos, per))
                    pos += per
            else:
                blocks.append(Block(name, pos, arr.size))
                pos += arr.size
        return blocks

    def flatten(self, grads: dict[str, np.ndarray]) -> np.ndarray:
        """Concatenate per-parameter arrays in parameter order; missing names are zero."""
        parts = []
        for name, arr in self.parameters().items():
            g = grads.get(name)
            parts.append(np.zeros(arr.size) if g is None else np.ravel(g))
        return np.concatenate(parts)

    def unflatten(self, vec: np.ndarray) -> dict[str, np.ndarray]:
        out, pos = {}, 0
        for name, arr in self.parameters().items():
            out[name] = vec[pos:pos + arr.size].reshape(arr.shape)
            pos += arr.size
        return out

    def n_params(self) -> int:
        return sum(a.size for a in self.parameters().values())

    # ---- masks -----------------------------------------------------------

    def masks(self, capacity: float, structured: bool = False, allowed=None) -> list[np.ndarray]:
        """One boolean mask per prunable layer.

        ``structured`` keeps whole conv kernels by mean score (linear layers
        stay element-wise). ``allowed`` optionally restricts each layer's
        candidates (a list aligned with :meth:`prunable_layers`).
        """
        out = []
        for n, layer in enumerate(self.prunable_layers()):
            if structured and isinstance(layer, PrunableConv2d):
                out.append(structured_mask(layer, capacity).bits)
            else:
                cand = None if allowed is None else allowed[n]
                out.append(build_mask(layer.param, capacity, allowed=cand).bits)
        return out

    def dense_masks(self) -> list[np.ndarray]:
        return [np.ones(l.param.weight.shape, dtype=bool) for l in self.prunable_layers()]

    def stats_for(self, capacity: float, warn: bool = True) -> list[RunningStats]:
        key = capacity_key(capacity)
        if key in self.bn_stats:
            return self.bn_stats[key]
        if warn and self.bn_layers():
            warnings.warn(f"no recalibrated batch-norm statistics for capacity {capacity}; "
                          "using the dense statistics", stacklevel=2)
        return self.bn_stats[DENSE]

    # ---- forward / backward ---------------------------------------------

    def forward(self, x: np.ndarray, masks: list[np.ndarray], stats: list[RunningStats] | None = None,
                keep_cache: bool = True) -> Forward:
        """Run the network with the given masks.

        ``stats=None`` normalizes with batch statistics (training mode).
        """
        caches, moments = [], []
        p = b = 0
        h = np.asarray(x, dtype=np.float64)
        for layer in self.backbone:
            if layer.prunable:
                h, cache = layer.forward(h, masks[p])
                p += 1
            elif isinstance(layer, BatchNorm):
                h, cache = layer.forward(h, None if stats is None else stats[b])
                moments.append((cache.extra["mean"], cache.extra["var"], h.size // h.shape[1]))
                b += 1
            else:
                h, cache = layer.forward(h)
            caches.append(cache if keep_cache else None)
        if self.embedding_head is not None:
            emb, cache = self.embedding_head.forward(h)
            caches.append(cache if keep_cache else None)
        else:
            emb = h
        logits, cache = self.classifier.forward(emb)
        caches.append(cache if keep_cache else None)
        return Forward(emb, logits, caches, moments)

    def backward(self, fwd: Forward, grad_logits: np.ndarray, filter_scores: bool = True,
                 grad_embedding: np.ndarray | None = None) -> dict[str, np.ndarray]:
        grads = {}
        caches = list(fwd.caches)
        g, dh = self.classifier.backward(caches.pop(), grad_logits)
        grads["classifier.weight"], grads["classifier.bias"] = g["weight"], g["bias"]
        if grad_embedding is not None:
            dh = dh + grad_embedding
        if self.embedding_head is not None:
            g, dh = self.embedding_head.backward(caches.pop(), dh)
            grads["embedding.weight"], grads["embedding.bias"] = g["weight"], g["bias"]
        for i in range(len(self.backbone) - 1, -1, -1):
            layer = self.backbone[i]
            if layer.prunable:
                g, dh = layer.backward(caches[i], dh, filter_scores=filter_scores)
            else:
                g, dh = layer.backward(caches[i], dh)
            for k, v in g.items():
                grads[f"backbone.{i}.{k}"] = v
        return grads

    def predict(self, x: np.ndarray, capacity: float = DENSE, masks=None, stats=None,
                batch_size: int = 1000) -> tuple[np.ndarray, np.ndarray]:
        """Inference-mode embeddings and logits."""
        masks = self.masks(capacity) if masks is None else masks
        stats = self.stats_for(capacity) if stats is None else stats
        embs, logits = [], []
        for lo in range(0, len(x), batch_size):
            f = self.forward(x[lo:lo + batch_size], masks, stats, keep_cache=False)
            embs.append(f.embedding)
            logits.append(f.logits)
        return np.concatenate(embs), np.concatenate(logits)


def build_mlp(in_dim: int = 784, hidden=(256, 128), embed_dim: int | None = 64, classes: int = 10,
              seed: int = 0, batchnorm: bool = True) -> PrunableModel:
    """Flatten -> [prunable linear -> BN -> ReLU]* -> embedding head -> classifier."""
    rng = np.random.default_rng(seed)
    layers: list = [Flatten()]
    prev = in_dim
    for h in hidden:
        layers.append(PrunableLinear(prev, h, rng, bias=not batchnorm))
        if batchnorm:
            layers.append(BatchNorm(h))
        layers.append(ReLU())
        prev = h
    head = None
    if embed_dim:
        head = Linear(prev, embed_dim, rng)
        prev = embed_dim
    return PrunableModel(layers, head, Linear(prev, classes, rng))


def build_convnet(in_channels: int = 1, image_size: int = 28, channels=(16, 32), fc: int = 64,
                  classes: int = 10, seed: int = 0) -> PrunableModel:
    """Small conv net: stride-2 4x4 convs with BN/ReLU, a prunable FC layer, a classifier."""
    rng = np.random.default_rng(seed)
    layers: list = []
    prev, size = in_channels, image_size
    for c in channels:
        layers += [PrunableConv2d(prev, c, 4, rng, stride=2, padding=1, bias=False), BatchNorm(c), ReLU()]
        prev, size = c, (size + 2 - 4) // 2 + 1
    layers += [Flatten(), PrunableLinear(prev * size * size, fc, rng, bias=False), BatchNorm(fc), ReLU()]
    return PrunableModel(layers, None, Linear(fc, classes, rng))
