# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled block kernels. Same contract as ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, pow

cnp.import_array()

BACKEND = "cython"


cdef inline double _dot(const double* a, const double* b, Py_ssize_t n) nogil:
    cdef double s = 0.0
    cdef Py_ssize_t k
    for k in range(n):
        s += a[k] * b[k]
    return s


def integrate_blocks(const double[:, ::1] G, const long long[::1] offsets,
                     const long long[:, :, ::1] perms, double alpha, double eps,
                     bint use_projected):
    cdef Py_ssize_t n = G.shape[0]
    cdef Py_ssize_t P = G.shape[1]
    cdef Py_ssize_t nb = offsets.shape[0] - 1
    cdef double[::1] out = np.empty(P, dtype=np.float64)
    cdef double[:, ::1] H = np.empty((n, P), dtype=np.float64)
    cdef double[::1] sq = np.empty(n, dtype=np.float64)
    cdef double[::1] gamma = np.empty(n, dtype=np.float64)
    cdef Py_ssize_t b, i, jj, j, k, lo, L
    cdef double d, ng, nh, cos, total, scale
    cdef bint touched
    cdef const double* gi
    cdef double* hi

    with nogil:
        for b in range(nb):
            lo = offsets[b]
            L = offsets[b + 1] - lo
            for i in range(n):
                sq[i] = _dot(&G[i, lo], &G[i, lo], L)
            for i in range(n):
                gi = &G[i, lo]
                hi = &H[i, lo]
                for k in range(L):
                    hi[k] = gi[k]
                touched = False
                for jj in range(n):
                    j = perms[b, i, jj]
                    d = _dot(hi, &G[j, lo], L)
                    if d < 0.0 and sq[j] >= eps * eps:
                        scale = d / sq[j]
                        for k in range(L):
                            hi[k] -= scale * G[j, lo + k]
                        # second pass removes the rounding residual along g_j
                        scale = _dot(hi, &G[j, lo], L) / sq[j]
                        for k in range(L):
                            hi[k] -= scale * G[j, lo + k]
                        touched = True
                if alpha == 0.0 or not touched:
                    gamma[i] = 1.0
                else:
                    ng = sqrt(sq[i])
                    nh = sqrt(_dot(hi, hi, L))
                    if ng < eps or nh < eps:
                        cos = 0.0
                    else:
                        cos = _dot(gi, hi, L) / (ng * nh)
                        if cos > 1.0:
                            cos = 1.0
                        elif cos < 0.0:
                            cos = 0.0
                    gamma[i] = pow(cos, alpha)
            total = 0.0
            for i in range(n):
                total += gamma[i]
            for k in range(L):
                out[lo + k] = 0.0
            if total < eps:
                for i in range(n):
                    for k in range(L):
                        if use_projected:
                            out[lo + k] += H[i, lo + k]
                        else:
                            out[lo + k] += G[i, lo + k]
            else:
                for i in range(n):
                    scale = gamma[i]
                    for k in range(L):
                        if use_projected:
                            out[lo + k] += scale * H[i, lo + k]
                        else:
                            out[lo + k] += scale * G[i, lo + k]
                scale = n / total
                for k in range(L):
                    out[lo + k] *= scale
    return np.asarray(out)


def count_conflicts_blocks(const double[:, ::1] G, const long long[::1] offsets):
    cdef Py_ssize_t n = G.shape[0]
    cdef Py_ssize_t nb = offsets.shape[0] - 1
    cdef long long[::1] counts = np.zeros(nb, dtype=np.int64)
    cdef Py_ssize_t b, i, j, lo, L
    with nogil:
        for b in range(nb):
            lo = offsets[b]
            L = offsets[b + 1] - lo
            for i in range(n):
                for j in range(i + 1, n):
                    if _dot(&G[i, lo], &G[j, lo], L) < 0.0:
                        counts[b] += 1
    return np.asarray(counts)
