# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot-loop kernels: fused Adam update, row scatter-add, row-wise top-k.

Each function mirrors the numpy fallback in _kernels_py operation for
operation; the build disables floating-point contraction, so the two
backends produce bit-identical results.
"""

from libc.math cimport sqrt

import numpy as np

cimport numpy as cnp


def adam_update(double[::1] p, double[::1] g, double[::1] m, double[::1] v,
                double lr, double beta1, double beta2, double eps,
                double bc1, double bc2):
    """In-place Adam step on flat f64 views; bc1/bc2 are the 1 - beta**t factors."""
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double omb1 = 1.0 - beta1
    cdef double omb2 = 1.0 - beta2
    cdef double mi, vi
    with nogil:
        for i in range(n):
            mi = beta1 * m[i] + omb1 * g[i]
            vi = beta2 * v[i] + omb2 * (g[i] * g[i])
            m[i] = mi
            v[i] = vi
            p[i] = p[i] - lr * (mi / bc1) / (sqrt(vi / bc2) + eps)


def scatter_add_rows(double[:, ::1] out, cnp.int64_t[::1] ids, double[:, ::1] rows):
    """out[ids[i], :] += rows[i, :] accumulated in row order (np.add.at semantics)."""
    cdef Py_ssize_t i, j, n = ids.shape[0], w = out.shape[1]
    cdef Py_ssize_t r
    with nogil:
        for i in range(n):
            r = <Py_ssize_t> ids[i]
            for j in range(w):
                out[r, j] = out[r, j] + rows[i, j]


def topk_rows(double[:, ::1] x, Py_ssize_t k):
    """Per-row top-k of a 2-D array.

    Returns (indices, values) of shape (rows, k), ordered by descending value;
    exact ties break toward the lower column index.
    """
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1]
    idx_arr = np.empty((n, k), dtype=np.int64)
    val_arr = np.empty((n, k), dtype=np.float64)
    cdef cnp.int64_t[:, ::1] idx = idx_arr
    cdef double[:, ::1] val = val_arr
    cdef Py_ssize_t i, j, p, q, filled
    cdef double xv
    with nogil:
        for i in range(n):
            filled = 0
            for j in range(m):
                xv = x[i, j]
                # insertion position: strictly-greater values shift left,
                # equal values keep the earlier column first
                p = filled
                while p > 0 and xv > val[i, p - 1]:
                    p -= 1
                if p < k:
                    q = filled if filled < k else k - 1
                    while q > p:
                        val[i, q] = val[i, q - 1]
                        idx[i, q] = idx[i, q - 1]
                        q -= 1
                    val[i, p] = xv
                    idx[i, p] = j
                    if filled < k:
                        filled += 1
    return idx_arr, val_arr
