# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled numeric kernels.

Every reduction runs in ascending index order so results are bit-identical
to the pure-Python fallback (bimatch._kernels_py) for the non-transcendental
kernels, and reproducible run to run for all of them.
"""

import numpy as np

from libc.math cimport exp as c_exp, log as c_log

BCE_CLAMP = 1e-7


def matmul(double[:, ::1] a, double[:, ::1] b):
    """Matrix product with the inner-dimension summed in ascending order."""
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j, l
    cdef double s
    for i in range(m):
        for j in range(n):
            s = 0.0
            for l in range(k):
                s += a[i, l] * b[l, j]
            o[i, j] = s
    return out


def softmax_rows(double[:, ::1] z):
    """Row-wise softmax with per-row max subtraction."""
    cdef Py_ssize_t m = z.shape[0], n = z.shape[1]
    out = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    cdef double mx, s
    for i in range(m):
        mx = z[i, 0]
        for j in range(1, n):
            if z[i, j] > mx:
                mx = z[i, j]
        s = 0.0
        for j in range(n):
            o[i, j] = c_exp(z[i, j] - mx)
            s += o[i, j]
        for j in range(n):
            o[i, j] = o[i, j] / s
    return out


def row_sums(double[:, ::1] a):
    cdef Py_ssize_t m = a.shape[0], n = a.shape[1]
    out = np.zeros(m, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t i, j
    cdef double s
    for i in range(m):
        s = 0.0
        for j in range(n):
            s += a[i, j]
        o[i] = s
    return out


def col_sums(double[:, ::1] a):
    cdef Py_ssize_t m = a.shape[0], n = a.shape[1]
    out = np.zeros(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t i, j
    for i in range(m):
        for j in range(n):
            o[j] += a[i, j]
    return out


def flat_sum(double[::1] a):
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t i
    cdef double s = 0.0
    for i in range(n):
        s += a[i]
    return s


def mask_pair_costs(double[:, ::1] masks, double[:, ::1] gmasks,
                    double w_dice, double w_bce):
    """All-pairs mask matching cost: w_dice*dice + w_bce*mean-pixel BCE.

    masks: n_q x HW soft masks in [0,1]; gmasks: n_g x HW binary masks.
    Dice smoothing epsilon is 1.0; BCE clamps the soft mask to
    [BCE_CLAMP, 1-BCE_CLAMP]. The BCE accumulates the g-side and (1-g)-side
    sums separately (matching the fallback's two ordered matmuls).
    """
    cdef Py_ssize_t nq = masks.shape[0], hw = masks.shape[1]
    cdef Py_ssize_t ng = gmasks.shape[0]
    out = np.empty((nq, ng), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double[::1] sm = row_sums(masks)
    cdef double[::1] sg = row_sums(gmasks)
    cdef Py_ssize_t i, k, p
    cdef double inter, acc_pos, acc_neg, mp, g, dice, bce
    cdef double lo = BCE_CLAMP, hi = 1.0 - BCE_CLAMP
    for i in range(nq):
        for k in range(ng):
            inter = 0.0
            acc_pos = 0.0
            acc_neg = 0.0
            for p in range(hw):
                mp = masks[i, p]
                g = gmasks[k, p]
                inter += mp * g
                if mp < lo:
                    mp = lo
                elif mp > hi:
                    mp = hi
                acc_pos += g * c_log(mp)
                acc_neg += (1.0 - g) * c_log(1.0 - mp)
            dice = 1.0 - (2.0 * inter + 1.0) / (sm[i] + sg[k] + 1.0)
            bce = -(acc_pos + acc_neg) / hw
            o[i, k] = w_dice * dice + w_bce * bce
    return out
