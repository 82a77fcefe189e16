"""Dense float64 array kernels used by the layers and the trainer.

Arrays are plain ``numpy.ndarray`` objects in row-major float64. Every
function here is pure: inputs are never written to.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ZERO_NORM_EPS = 1e-12
# slack for ceil(fraction * n) so that e.g. 0.7 * 10 keeps 7, not 8
_KEEP_SLACK = 1e-9


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


def matmul(a, b) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride != 0:
        raise ValueError(
            f"non-integral output extent: ({size} + 2*{padding} - {k}) / {stride} + 1"
        )
    return span // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Unfold ``x[N,C,H,W]`` into patches of shape ``(N, Ho, Wo, C*kh*kw)``.

    The last axis is ordered (channel, row, col), matching ``kernel.reshape(O, -1)``.
    """
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: (N, C, Ho, Wo, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho, wo, c * kh * kw)
    return np.ascontiguousarray(cols)


def col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch gradients back to the input."""
    n, c, h, w = x_shape
    ho, wo = cols.shape[1], cols.shape[2]
    patches = cols.reshape(n, ho, wo, c, kh, kw)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                patches[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(out)


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> np.ndarray:
    """2-D cross-correlation of ``x[N,C,H,W]`` with ``kernel[O,C,kh,kw]``."""
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError("conv2d expects 4-D input and kernel")
    if x.shape[1] != kernel.shape[1]:
        raise ValueError(f"channel mismatch: input {x.shape[1]}, kernel {kernel.shape[1]}")
    o, _, kh, kw = kernel.shape
    cols = im2col(x, kh, kw, stride, padding)
    out = cols @ kernel.reshape(o, -1).T  # (N, Ho, Wo, O)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.where(x > 0.0, grad_out, 0.0)


def _bn_axes(x: np.ndarray) -> tuple[int, ...]:
    if x.ndim == 2:
        return (0,)
    if x.ndim == 4:
        return (0, 2, 3)
    raise ValueError(f"batch norm expects (N,C) or (N,C,H,W), got {x.shape}")


def _bn_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape(1, -1) if ndim == 2 else v.reshape(1, -1, 1, 1)


def batch_moments(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and population variance (two-pass)."""
    axes = _bn_axes(x)
    mean = x.mean(axis=axes)
    var = ((x - _bn_view(mean, x.ndim)) ** 2).mean(axis=axes)
    return mean, var


def batchnorm_forward(x, gamma, beta, mean, var, eps):
    """Normalize with the given statistics. Returns ``(y, x_hat, inv_std)``."""
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - _bn_view(mean, x.ndim)) * _bn_view(inv_std, x.ndim)
    y = x_hat * _bn_view(gamma, x.ndim) + _bn_view(beta, x.ndim)
    return y, x_hat, inv_std


def batchnorm_backward(grad_out, x_hat, inv_std, gamma, batch_stats: bool):
    """Gradients ``(dx, dgamma, dbeta)``.

    With ``batch_stats`` the mean/variance are functions of the batch and are
    differentiated through; otherwise they are constants.
    """
    axes = _bn_axes(grad_out)
    nd = grad_out.ndim
    dgamma = (grad_out * x_hat).sum(axis=axes)
    dbeta = grad_out.sum(axis=axes)
    dxhat = grad_out * _bn_view(gamma, nd)
    if not batch_stats:
        return dxhat * _bn_view(inv_std, nd), dgamma, dbeta
    m = grad_out.size // grad_out.shape[1]
    s1 = _bn_view(dxhat.sum(axis=axes), nd)
    s2 = _bn_view((dxhat * x_hat).sum(axis=axes), nd)
    dx = _bn_view(inv_std, nd) / m * (m * dxhat - s1 - x_hat * s2)
    return dx, dgamma, dbeta


def softmax_cross_entropy(logits, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient w.r.t. the logits."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError("logits must be (N, K)")
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    labels = labels.astype(np.intp)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(n)
    loss = float(-log_p[rows, labels].mean())
    grad = np.exp(log_p)
    grad[rows, labels] -= 1.0
    grad /= n
    return loss, grad


def keep_count(n: int, keep_fraction: float) -> int:
    """Number of entries a fraction ``keep_fraction`` of ``n`` retains: ceil(f*n)."""
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep fraction must be in (0, 1], got {keep_fraction}")
    if n <= 0:
        raise ValueError("cannot select from an empty tensor")
    return min(n, max(1, math.ceil(keep_fraction * n - _KEEP_SLACK)))


def topk_order(scores) -> np.ndarray:
    """Flat indices sorted by descending score, ties by ascending index."""
    flat = as_tensor(scores).ravel()
    return np.argsort(-flat, kind="stable")


def topk_threshold(scores, keep_fraction: float) -> float:
    """Score of the last entry kept when retaining ``ceil(f*n)`` entries.

    Under ties more entries than that may reach the threshold; use
    :func:`topk_mask` for the exact index-tie-broken selection.
    """
    flat = as_tensor(scores).ravel()
    k = keep_count(flat.size, keep_fraction)
    return float(flat[topk_order(flat)[k - 1]])


def topk_mask(scores, keep_fraction: float, allowed=None) -> np.ndarray:
    """Boolean mask (shaped like ``scores``) of the ``ceil(f*n)`` top entries.

    ``allowed`` restricts the candidates; the count is still taken relative
    to the full tensor size.
    """
    s = as_tensor(scores)
    flat = s.ravel()
    k = keep_count(flat.size, keep_fraction)
    order = topk_order(flat)
    if allowed is not None:
        allowed_flat = np.asarray(allowed, dtype=bool).ravel()
        if allowed_flat.size != flat.size:
            raise ValueError("allowed mask must match the score shape")
        order = order[allowed_flat[order]]
        if order.size < k:
            raise ValueError(f"only {order.size} candidates allowed, need {k}")
    mask = np.zeros(flat.size, dtype=bool)
    mask[order[:k]] = True
    return mask.reshape(s.shape)


def cosine_similarity(a, b) -> float:
    a = as_tensor(a).ravel()
    b = as_tensor(b).ravel()
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    na = math.sqrt(float(a @ a))
    nb = math.sqrt(float(b @ b))
    if na < ZERO_NORM_EPS or nb < ZERO_NORM_EPS:
        return 0.0
    return max(-1.0, min(1.0, float(a @ b) / (na * nb)))


def l2_normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    return x / np.maximum(norms, ZERO_NORM_EPS)
