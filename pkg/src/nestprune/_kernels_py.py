"""Pure-numpy block kernels; the fallback when the compiled module is absent.

Both backends share one contract:

``integrate_blocks(G, offsets, perms, alpha, eps, use_projected)``
    ``G`` is ``(n_losses, P)`` float64, ``offsets`` is ``(n_blocks + 1,)``
    int64 block boundaries into the columns of ``G``, ``perms`` is
    ``(n_blocks, n_losses, n_losses)`` int64 visiting orders. Returns the
    integrated ``(P,)`` gradient.

``count_conflicts_blocks(G, offsets)``
    Number of unordered loss pairs with a negative dot product, per block.
"""
from __future__ import annotations

import numpy as np

BACKEND = "python"


def _project_block(g, perm, eps):
    n = g.shape[0]
    sq = np.einsum("ij,ij->i", g, g)
    out = g.copy()
    touched = np.zeros(n, dtype=bool)
    for i in range(n):
        h = out[i]
        for j in perm[i]:
            d = float(h @ g[j])
            if d < 0.0 and sq[j] >= eps * eps:
                h -= (d / sq[j]) * g[j]
                # second pass removes the rounding residual along g_j
                h -= (float(h @ g[j]) / sq[j]) * g[j]
                touched[i] = True
    return out, touched


def _weights(g, h, touched, alpha, eps):
    n = g.shape[0]
    gamma = np.ones(n)
    if alpha == 0.0:
        return gamma
    for i in range(n):
        if not touched[i]:
            continue
        ng = np.sqrt(g[i] @ g[i])
        nh = np.sqrt(h[i] @ h[i])
        if ng < eps or nh < eps:
            cos = 0.0
        else:
            cos = min(1.0, max(0.0, float(g[i] @ h[i]) / (ng * nh)))
        gamma[i] = cos ** alpha
    return gamma


def integrate_block(g, perm, alpha, eps, use_projected):
    h, touched = _project_block(g, perm, eps)
    gamma = _weights(g, h, touched, alpha, eps)
    src = h if use_projected else g
    total = gamma.sum()
    n = g.shape[0]
    if total < eps:
        return src.sum(axis=0)
    return (gamma @ src) * (n / total)


def integrate_blocks(G, offsets, perms, alpha, eps, use_projected):
    out = np.empty(G.shape[1])
    for b in range(len(offsets) - 1):
        lo, hi = offsets[b], offsets[b + 1]
        out[lo:hi] = integrate_block(G[:, lo:hi], perms[b], alpha, eps, use_projected)
    return out


def count_conflicts_blocks(G, offsets):
    n = G.shape[0]
    iu = np.triu_indices(n, k=1)
    counts = np.empty(len(offsets) - 1, dtype=np.int64)
    for b in range(len(offsets) - 1):
        g = G[:, offsets[b]:offsets[b + 1]]
        counts[b] = int(((g @ g.T)[iu] < 0.0).sum())
    return counts
