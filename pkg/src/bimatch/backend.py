"""Kernel backend selection.

The numeric core exists twice: a Cython extension (bimatch._kernels) and a
numpy fallback (bimatch._kernels_py) with matched summation-order semantics.
The compiled backend is preferred when importable; set BIMATCH_KERNELS=py or
BIMATCH_KERNELS=c to force a choice (forcing "c" raises if the extension is
missing rather than silently degrading).
"""

from __future__ import annotations

import logging
import os

import numpy as np

from .errors import ShapeError

log = logging.getLogger(__name__)


def _load():
    choice = os.environ.get("BIMATCH_KERNELS", "").strip().lower()
    if choice in ("py", "python"):
        from bimatch import _kernels_py

        return _kernels_py, "py"
    if choice in ("c", "cy", "compiled"):
        from bimatch import _kernels

        return _kernels, "c"
    if choice:
        raise ValueError(f"unknown BIMATCH_KERNELS value: {choice!r}")
    try:
        from bimatch import _kernels

        return _kernels, "c"
    except ImportError:
        from bimatch import _kernels_py

        log.warning("compiled kernels unavailable; using the numpy fallback")
        return _kernels_py, "py"


_impl, BACKEND = _load()

BCE_CLAMP = _impl.BCE_CLAMP


def as_matrix(a) -> np.ndarray:
    """Coerce to a C-contiguous float64 2-D array."""
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D array, got shape {arr.shape}")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    return _impl.matmul(a, b)


def softmax_rows(z: np.ndarray) -> np.ndarray:
    return _impl.softmax_rows(as_matrix(z))


def row_sums(a: np.ndarray) -> np.ndarray:
    return _impl.row_sums(as_matrix(a))


def col_sums(a: np.ndarray) -> np.ndarray:
    return _impl.col_sums(as_matrix(a))


def flat_sum(a: np.ndarray) -> float:
    arr = np.ascontiguousarray(a, dtype=np.float64).ravel()
    return float(_impl.flat_sum(arr))


def mask_pair_costs(masks: np.ndarray, gmasks: np.ndarray,
                    w_dice: float, w_bce: float) -> np.ndarray:
    masks = as_matrix(masks)
    gmasks = as_matrix(gmasks)
    if masks.shape[1] != gmasks.shape[1]:
        raise ShapeError(
            f"mask pixel counts disagree: {masks.shape} vs {gmasks.shape}")
    return _impl.mask_pair_costs(masks, gmasks, float(w_dice), float(w_bce))
