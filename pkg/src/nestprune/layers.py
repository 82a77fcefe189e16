"""Layers for a network whose connections carry a weight and a score.

A prunable layer keeps its full dense weight plus a same-shaped score
tensor. A subnetwork at capacity ``c`` keeps the ``ceil(c * n)`` highest
scoring connections of each layer; everything else behaves as if the
weight were zero. Backward passes use the straight-through rule: the
selection function is treated as the identity when differentiating
w.r.t. the scores.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx


def kaiming_uniform(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class ScoredTensor:
    weight: np.ndarray
    score: np.ndarray

    def __post_init__(self):
        self.weight = nx.as_tensor(self.weight)
        self.score = nx.as_tensor(self.score)
        if self.weight.shape != self.score.shape:
            raise ValueError(f"weight {self.weight.shape} and score {self.score.shape} differ")


@dataclass
class CapacityMask:
    capacity: float
    bits: np.ndarray

    @property
    def popcount(self) -> int:
        return int(self.bits.sum())


def build_mask(layer: ScoredTensor, capacity: float, allowed=None) -> CapacityMask:
    if not 0.0 < capacity <= 1.0:
        raise ValueError(f"capacity must be in (0, 1], got {capacity}")
    if capacity == 1.0 and allowed is None:
        return CapacityMask(1.0, np.ones(layer.score.shape, dtype=bool))
    return CapacityMask(capacity, nx.topk_mask(layer.score, capacity, allowed=allowed))


def masked_weight(weight: np.ndarray, bits: np.ndarray) -> np.ndarray:
    # np.where rather than a product so pruned entries are +0.0, never -0.0
    return np.where(bits, weight, 0.0)


@dataclass
class ForwardCache:
    inputs: np.ndarray
    bits: np.ndarray
    pre_activation: np.ndarray | None = None
    extra: dict = field(default_factory=dict)


class PrunableLinear:
    kind = "prunable_linear"
    prunable = True

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        self.in_features = in_features
        self.out_features = out_features
        shape = (out_features, in_features)
        w = kaiming_uniform(shape, in_features, rng)
        s = np.abs(kaiming_uniform(shape, in_features, rng))
        self.param = ScoredTensor(w, s)
        self.bias = np.zeros(out_features) if bias else None

    @property
    def weight(self):
        return self.param.weight

    @property
    def score(self):
        return self.param.score

    def config(self) -> dict:
        return {"kind": self.kind, "in": self.in_features, "out": self.out_features,
                "bias": self.bias is not None}

    def forward(self, x, bits):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ValueError(f"expected (N, {self.in_features}) input, got {x.shape}")
        if bits.shape != self.weight.shape:
            raise ValueError("mask shape does not match the weight")
        out = x @ masked_weight(self.weight, bits).T
        if self.bias is not None:
            out = out + self.bias
        return out, ForwardCache(x, bits, out)

    def backward(self, cache: ForwardCache, grad_out, filter_scores: bool = True):
        """Return ``(grads, grad_input)`` with grads keyed weight/score/bias."""
        x, bits = cache.inputs, cache.bits
        if grad_out.shape != (x.shape[0], self.out_features):
            raise ValueError("gradient does not match the cached forward")
        full = grad_out.T @ x  # dL/dI * Z for every connection
        grads = {
            "weight": np.where(bits, full, 0.0),
            "score": full * self.weight,
        }
        if filter_scores:
            grads["score"] = np.where(bits, grads["score"], 0.0)
        if self.bias is not None:
            grads["bias"] = grad_out.sum(axis=0)
        grad_in = grad_out @ masked_weight(self.weight, bits)
        return grads, grad_in


class PrunableConv2d:
    kind = "prunable_conv2d"
    prunable = True

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, bias: bool = True):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        fan_in = in_channels * kernel_size * kernel_size
        w = kaiming_uniform(shape, fan_in, rng)
        s = np.abs(kaiming_uniform(shape, fan_in, rng))
        self.param = ScoredTensor(w, s)
        self.bias = np.zeros(out_channels) if bias else None

    @property
    def weight(self):
        return self.param.weight

    @property
    def score(self):
        return self.param.score

    def config(self) -> dict:
        return {"kind": self.kind, "in": self.in_channels, "out": self.out_channels,
                "k": self.kernel_size, "stride": self.stride, "padding": self.padding,
                "bias": self.bias is not None}

    def forward(self, x, bits):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"expected (N, {self.in_channels}, H, W) input, got {x.shape}")
        if bits.shape != self.weight.shape:
            raise ValueError("mask shape does not match the weight")
        k = self.kernel_size
        cols = nx.im2col(x, k, k, self.stride, self.padding)
        w_eff = masked_weight(self.weight, bits).reshape(self.out_channels, -1)
        out = cols @ w_eff.T  # (N, Ho, Wo, O)
        if self.bias is not None:
            out = out + self.bias
        out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
        return out, ForwardCache(x, bits, out, {"cols": cols})

    def backward(self, cache: ForwardCache, grad_out, filter_scores: bool = True):
        x, bits, cols = cache.inputs, cache.bits, cache.extra["cols"]
        if grad_out.shape[:2] != (x.shape[0], self.out_channels):
            raise ValueError("gradient does not match the cached forward")
        o = self.out_channels
        g = grad_out.transpose(0, 2, 3, 1).reshape(-1, o)  # (N*Ho*Wo, O)
        full = (g.T @ cols.reshape(g.shape[0], -1)).reshape(self.weight.shape)
        grads = {
            "weight": np.where(bits, full, 0.0),
            "score": full * self.weight,
        }
        if filter_scores:
            grads["score"] = np.where(bits, grads["score"], 0.0)
        if self.bias is not None:
            grads["bias"] = g.sum(axis=0)
        w_eff = masked_weight(self.weight, bits).reshape(o, -1)
        dcols = (g @ w_eff).reshape(cols.shape)
        k = self.kernel_size
        grad_in = nx.col2im(dcols, x.shape, k, k, self.stride, self.padding)
        return grads, grad_in


def structured_scores(layer) -> np.ndarray:
    """Mean score of every output kernel of a convolutional layer."""
    if getattr(layer, "kind", None) != "prunable_conv2d":
        raise ValueError("kernel-level scores are defined for convolutional layers only")
    return layer.score.reshape(layer.out_channels, -1).mean(axis=1)


def structured_mask(layer, capacity: float) -> CapacityMask:
    """Keep whole kernels: the top ``ceil(c * O)`` by mean score."""
    keep = nx.topk_mask(structured_scores(layer), capacity)
    bits = np.broadcast_to(keep[:, None, None, None], layer.weight.shape).copy()
    return CapacityMask(capacity, bits)


class Linear:
    """Dense, never-pruned linear layer (embedding head, classifier)."""

    kind = "linear"
    prunable = False

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = kaiming_uniform((out_features, in_features), in_features, rng)
        self.bias = np.zeros(out_features)

    def config(self) -> dict:
        return {"kind": self.kind, "in": self.in_features, "out": self.out_features}

    def forward(self, x):
        return x @ self.weight.T + self.bias, ForwardCache(x, None)

    def backward(self, cache: ForwardCache, grad_out):
        grads = {"weight": grad_out.T @ cache.inputs, "bias": grad_out.sum(axis=0)}
        return grads, grad_out @ self.weight


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray

    def copy(self) -> "RunningStats":
        return RunningStats(self.mean.copy(), self.var.copy())


class BatchNorm:
    """Batch norm with shared affine parameters.

    Running statistics are not stored here; the model keeps one set per
    capacity and passes the relevant one in.
    """

    kind = "batchnorm"
    prunable = False

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must be in (0, 1)")
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = np.ones(channels)
        self.beta = np.zeros(channels)

    def config(self) -> dict:
        return {"kind": self.kind, "channels": self.channels, "eps": self.eps,
                "momentum": self.momentum}

    def fresh_stats(self) -> RunningStats:
        return RunningStats(np.zeros(self.channels), np.ones(self.channels))

    def forward(self, x, stats: RunningStats | None):
        """Normalize with batch statistics when ``stats`` is None."""
        if stats is None:
            mean, var = nx.batch_moments(x)
        else:
            mean, var = stats.mean, stats.var
        y, x_hat, inv_std = nx.batchnorm_forward(x, self.gamma, self.beta, mean, var, self.eps)
        cache = ForwardCache(x, None, x, {"x_hat": x_hat, "inv_std": inv_std,
                                          "batch": stats is None, "mean": mean, "var": var})
        return y, cache

    def backward(self, cache: ForwardCache, grad_out):
        dx, dgamma, dbeta = nx.batchnorm_backward(
            grad_out, cache.extra["x_hat"], cache.extra["inv_std"], self.gamma,
            cache.extra["batch"])
        return {"gamma": dgamma, "beta": dbeta}, dx


class ReLU:
    kind = "relu"
    prunable = False

    def config(self) -> dict:
        return {"kind": self.kind}

    def forward(self, x):
        return nx.relu(x), ForwardCache(x, None)

    def backward(self, cache, grad_out):
        return {}, nx.relu_backward(grad_out, cache.inputs)


class Flatten:
    kind = "flatten"
    prunable = False

    def config(self) -> dict:
        return {"kind": self.kind}

    def forward(self, x):
        return x.reshape(x.shape[0], -1), ForwardCache(x, None)

    def backward(self, cache, grad_out):
        return {}, grad_out.reshape(cache.inputs.shape)


def forward_masked(layer, mask: CapacityMask, x):
    """Masked forward of a prunable layer: dense forward on ``weight * mask``."""
    return layer.forward(nx.as_tensor(x), mask.bits)


def backward_masked(layer, mask: CapacityMask, cache: ForwardCache, grad_out, filter_scores: bool = True):
    """Straight-through backward. Returns ``(grad_weight, grad_score, grad_input)``.

    The score gradient is ``dL/dI * w * Z`` for every connection, then (with
    ``filter_scores``) zeroed wherever the mask is 0.
    """
    if cache.bits is not mask.bits and not np.array_equal(cache.bits, mask.bits):
        raise ValueError("cache was produced with a different mask")
    grads, grad_in = layer.backward(cache, nx.as_tensor(grad_out), filter_scores=filter_scores)
    return grads["weight"], grads["score"], grad_in
