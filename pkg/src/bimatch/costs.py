"""Matching cost construction: class cost plus dice and BCE mask costs.

All functions here are plain float computations used to fill the assignment
cost matrix; nothing is recorded on a tape (matching runs in a no-gradient
regime, only the training losses differentiate).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backend
from .errors import ContractError, ShapeError

DICE_EPS = 1.0
BCE_CLAMP = backend.BCE_CLAMP

MODALITY_RGB = "r"
MODALITY_X = "x"


@dataclass
class CostWeights:
    w_cls: float = 1.0
    w_dice: float = 1.0
    w_bce: float = 1.0


@dataclass
class GroundTruthSet:
    """Unique class labels with binary masks on an H x W grid."""

    h: int
    w: int
    k: int
    items: list[tuple[int, np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        classes = [c for c, _ in self.items]
        if len(set(classes)) != len(classes):
            raise ContractError(f"ground-truth class ids must be distinct: {classes}")
        if len(self.items) > self.k:
            raise ContractError("more ground-truth items than classes")
        norm = []
        for c, mask in self.items:
            if not 1 <= c <= self.k:
                raise ContractError(f"class id {c} outside 1..{self.k}")
            m = np.asarray(mask, dtype=np.float64)
            if m.shape != (self.h, self.w):
                raise ShapeError(f"mask shape {m.shape} != ({self.h}, {self.w})")
            if not np.all((m == 0.0) | (m == 1.0)):
                raise ContractError("ground-truth masks must be 0/1 valued")
            norm.append((int(c), m))
        self.items = norm

    @property
    def u(self) -> int:
        return len(self.items)

    def class_of(self, index: int) -> int:
        return self.items[index][0]

    def mask_of(self, index: int) -> np.ndarray:
        return self.items[index][1]

    def flat_masks(self) -> np.ndarray:
        """U x (H*W) matrix of the binary masks."""
        if not self.items:
            return np.zeros((0, self.h * self.w))
        return np.stack([m.ravel() for _, m in self.items])


@dataclass
class PredictionSet:
    """Per-modality query outputs: class probability rows and soft masks."""

    modality: str
    class_scores: np.ndarray  # L x (K+1), row-stochastic, index 0 = None class
    masks: np.ndarray         # L x H x W in [0, 1]

    def __post_init__(self):
        if self.modality not in (MODALITY_RGB, MODALITY_X):
            raise ContractError(f"unknown modality tag {self.modality!r}")
        self.class_scores = np.asarray(self.class_scores, dtype=np.float64)
        self.masks = np.asarray(self.masks, dtype=np.float64)
        if self.class_scores.ndim != 2 or self.masks.ndim != 3:
            raise ShapeError("class_scores must be 2-D and masks 3-D")
        if self.class_scores.shape[0] != self.masks.shape[0]:
            raise ShapeError("query counts of scores and masks disagree")
        if np.any(self.class_scores < 0) or \
                np.max(np.abs(self.class_scores.sum(axis=1) - 1.0), initial=0.0) > 1e-9:
            raise ContractError("class score rows must be probability vectors")
        if np.any(self.masks < 0) or np.any(self.masks > 1):
            raise ContractError("mask entries must lie in [0, 1]")

    @property
    def l(self) -> int:
        return self.class_scores.shape[0]

    @property
    def k(self) -> int:
        return self.class_scores.shape[1] - 1

    def flat_masks(self) -> np.ndarray:
        return self.masks.reshape(self.l, -1)


def class_cost(p_row: np.ndarray, y_class: int) -> float:
    """Negative predicted probability of the target class."""
    if y_class == 0:
        raise ContractError("the None class is never a matching target")
    if not 1 <= y_class < len(p_row):
        raise ContractError(f"class id {y_class} outside 1..{len(p_row) - 1}")
    return -float(p_row[y_class])


def dice_cost(m: np.ndarray, g: np.ndarray) -> float:
    """1 - (2*sum(m*g)+eps) / (sum(m)+sum(g)+eps) with eps = 1."""
    m = np.asarray(m, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if m.shape != g.shape:
        raise ShapeError(f"mask shapes disagree: {m.shape} vs {g.shape}")
    inter = backend.flat_sum(m.ravel() * g.ravel())
    return 1.0 - (2.0 * inter + DICE_EPS) / (
        backend.flat_sum(m) + backend.flat_sum(g) + DICE_EPS)


def bce_cost(m: np.ndarray, g: np.ndarray) -> float:
    """Mean pixel binary cross-entropy, soft mask clamped to [1e-7, 1-1e-7]."""
    m = np.asarray(m, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if m.shape != g.shape:
        raise ShapeError(f"mask shapes disagree: {m.shape} vs {g.shape}")
    mc = np.clip(m, BCE_CLAMP, 1.0 - BCE_CLAMP)
    terms = -(g * np.log(mc) + (1.0 - g) * np.log(1.0 - mc))
    return backend.flat_sum(terms) / m.size


def build_cost_matrix(preds, gt: GroundTruthSet,
                      weights: CostWeights = CostWeights()) -> np.ndarray:
    """Stack per-query matching costs against every ground-truth label.

    preds is one PredictionSet or a sequence of them; with two sets the RGB
    rows come first. Returns an (n_queries x U) float64 matrix.
    """
    if isinstance(preds, PredictionSet):
        preds = [preds]
    preds = list(preds)
    if not preds:
        raise ContractError("need at least one prediction set")
    k = preds[0].k
    for p in preds:
        if p.k != k:
            raise ContractError(f"class counts disagree: {p.k} vs {k}")
        if p.masks.shape[1:] != preds[0].masks.shape[1:]:
            raise ContractError("mask grids disagree across prediction sets")
    if gt.k != k:
        raise ContractError(f"class counts disagree: gt {gt.k} vs preds {k}")
    if (gt.h, gt.w) != preds[0].masks.shape[1:]:
        raise ContractError("mask grid disagrees between predictions and gt")

    n_rows = sum(p.l for p in preds)
    if gt.u == 0:
        return np.zeros((n_rows, 0))

    gmasks = gt.flat_masks()
    class_ids = [c for c, _ in gt.items]
    blocks = []
    for p in preds:
        block = backend.mask_pair_costs(p.flat_masks(), gmasks,
                                        weights.w_dice, weights.w_bce)
        block = block + weights.w_cls * -p.class_scores[:, class_ids]
        blocks.append(block)
    return np.vstack(blocks)
