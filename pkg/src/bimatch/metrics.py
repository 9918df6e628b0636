"""Per-class IoU / mean IoU, modality-subset evaluation, and the
class-to-modality matching distribution analysis."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .costs import GroundTruthSet
from .errors import ConfigError
from .matching import Matching, SOURCE_MAM
from .synth import Scene

SUBSETS = ("r", "x", "rx")


@dataclass
class EvalReport:
    subset: str
    per_class_iou: dict[int, float]
    mean_iou: float


def render_gt_map(gt: GroundTruthSet) -> np.ndarray:
    """Class-id map of the ground truth (0 where no mask covers a pixel;
    generated scenes cover everything)."""
    out = np.zeros((gt.h, gt.w), dtype=np.int64)
    for c, mask in gt.items:
        out[mask > 0] = c
    return out


def iou_counts(pred_map: np.ndarray, gt: GroundTruthSet) -> dict[int, tuple[int, int]]:
    """Per-class (intersection, union) pixel counts for one scene."""
    if pred_map.shape != (gt.h, gt.w):
        raise ConfigError(
            f"prediction map shape {pred_map.shape} != ({gt.h}, {gt.w})")
    gt_map = render_gt_map(gt)
    counts = {}
    for c in range(1, gt.k + 1):
        pred_c = pred_map == c
        gt_c = gt_map == c
        union = int(np.count_nonzero(pred_c | gt_c))
        if union == 0:
            continue
        counts[c] = (int(np.count_nonzero(pred_c & gt_c)), union)
    return counts


class IoUAccumulator:
    """Global accumulation: intersections and unions summed across scenes
    before dividing. Classes never present in ground truth are excluded
    from the mean."""

    def __init__(self):
        self._inter: dict[int, int] = {}
        self._union: dict[int, int] = {}
        self._gt_classes: set[int] = set()

    def add(self, pred_map: np.ndarray, gt: GroundTruthSet):
        self._gt_classes.update(c for c, _ in gt.items)
        for c, (inter, union) in iou_counts(pred_map, gt).items():
            self._inter[c] = self._inter.get(c, 0) + inter
            self._union[c] = self._union.get(c, 0) + union

    def report(self, subset: str) -> EvalReport:
        per_class = {c: self._inter.get(c, 0) / self._union[c]
                     for c in sorted(self._gt_classes)}
        mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
        return EvalReport(subset, per_class, mean)


def miou(pred_map: np.ndarray, gt: GroundTruthSet) -> EvalReport:
    """Single-scene convenience wrapper around the accumulator."""
    acc = IoUAccumulator()
    acc.add(pred_map, gt)
    return acc.report("scene")


def subset_eval(params: dict[str, np.ndarray], scenes: list[Scene],
                subsets: list[str], cfg, per_image: bool = False,
                ) -> list[EvalReport]:
    """Evaluate over modality-presence subsets; absent modalities are
    zero-filled before the forward pass. Appends a "Mean" row averaging
    the subset means."""
    from .model import forward, fuse_and_segment, zero_fill

    reports = []
    for subset in subsets:
        if subset not in SUBSETS:
            raise ConfigError(f"unknown subset tag {subset!r}")
        if per_image:
            means = []
            for scene in scenes:
                acc = IoUAccumulator()
                filled = zero_fill(scene, subset)
                outputs = forward(params, filled)
                acc.add(fuse_and_segment(*outputs.prediction_sets()), scene.gt)
                means.append(acc.report(subset).mean_iou)
            reports.append(EvalReport(subset, {}, float(np.mean(means))))
        else:
            acc = IoUAccumulator()
            for scene in scenes:
                filled = zero_fill(scene, subset)
                outputs = forward(params, filled)
                acc.add(fuse_and_segment(*outputs.prediction_sets()), scene.gt)
            reports.append(acc.report(subset))
    mean_row = EvalReport("Mean", {},
                          float(np.mean([r.mean_iou for r in reports])))
    return reports + [mean_row]


def label_distribution(matchings: list[Matching],
                       gts: list[GroundTruthSet]) -> dict[int, tuple[float, float]]:
    """Fraction of each class's stage-1 ("mam") assignments landing in each
    modality across the dataset; (rgb_fraction, x_fraction) per class."""
    counts: dict[int, list[int]] = {}
    for matching, gt in zip(matchings, gts):
        l = matching.l
        for p in matching.pairs:
            if p.source != SOURCE_MAM:
                continue
            entry = counts.setdefault(p.class_id, [0, 0])
            entry[0 if p.query_index < l else 1] += 1
    out = {}
    for c, (n_r, n_x) in sorted(counts.items()):
        total = n_r + n_x
        out[c] = (n_r / total, n_x / total)
    return out


def report_to_json(reports: list[EvalReport]) -> list[dict]:
    return [{"subset": r.subset,
             "per_class_iou": {str(c): v for c, v in r.per_class_iou.items()},
             "mean_iou": r.mean_iou} for r in reports]


def report_table(reports: list[EvalReport]) -> str:
    """Aligned plain-text table of the subset reports."""
    classes = sorted({c for r in reports for c in r.per_class_iou})
    header = ["subset"] + [f"class {c}" for c in classes] + ["mean"]
    rows = [header]
    for r in reports:
        row = [r.subset]
        row += [f"{r.per_class_iou[c]:.4f}" if c in r.per_class_iou else "-"
                for c in classes]
        row.append(f"{r.mean_iou:.4f}")
        rows.append(row)
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row))
             for row in rows]
    return "\n".join(lines)


def distribution_csv(dist: dict[int, tuple[float, float]]) -> str:
    lines = ["class,frac_rgb,frac_x"]
    for c, (fr, fx) in sorted(dist.items()):
        lines.append(f"{c},{fr!r},{fx!r}")
    return "\n".join(lines) + "\n"
