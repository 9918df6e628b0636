"""Pure-Python (numpy) kernel fallback.

Mirrors bimatch._kernels with the same ascending summation order:
matmul accumulates rank-1 updates over the inner dimension, and sums use
cumsum (numpy's cumsum is a sequential left-to-right pass), so the
non-transcendental kernels are bit-identical to the compiled ones.
"""

import numpy as np

BCE_CLAMP = 1e-7


def matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float64)
    for l in range(k):
        out += np.multiply.outer(a[:, l], b[l, :])
    return out


def softmax_rows(z):
    shifted = z - np.max(z, axis=1, keepdims=True)
    e = np.exp(shifted)
    s = np.cumsum(e, axis=1)[:, -1:]
    return e / s


def row_sums(a):
    return np.cumsum(a, axis=1)[:, -1].copy()


def col_sums(a):
    return np.cumsum(a, axis=0)[-1, :].copy()


def flat_sum(a):
    if a.size == 0:
        return 0.0
    return float(np.cumsum(a)[-1])


def mask_pair_costs(masks, gmasks, w_dice, w_bce):
    hw = masks.shape[1]
    inter = matmul(masks, np.ascontiguousarray(gmasks.T))
    sm = row_sums(masks)
    sg = row_sums(gmasks)
    dice = 1.0 - (2.0 * inter + 1.0) / (sm[:, None] + sg[None, :] + 1.0)
    clamped = np.clip(masks, BCE_CLAMP, 1.0 - BCE_CLAMP)
    acc_pos = matmul(np.log(clamped), np.ascontiguousarray(gmasks.T))
    acc_neg = matmul(np.log(1.0 - clamped), np.ascontiguousarray((1.0 - gmasks).T))
    bce = -(acc_pos + acc_neg) / hw
    return w_dice * dice + w_bce * bce
