"""Segmentation evaluation metrics.

Covers the plain Dice score, overlap statistics with a one-voxel border
tolerance, the undirected Hausdorff distance and the symmetric mean
nearest-neighbor distance, all over physical (mm) coordinates.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .codec import MultiLabelMask, decode
from .volume import BinaryMask, require_same_geometry

_BOX26 = np.ones((3, 3, 3), dtype=bool)


@dataclass(frozen=True)
class OverlapStats:
    """Voxel classification counts and the overlap scores derived from them.

    For tolerant statistics, ignored_FP holds false positives 26-adjacent
    to the ground truth and ignored_FN false negatives on the ground-truth
    border; both are excluded from every denominator. Scores with a zero
    denominator are NaN.
    """

    tp: int
    fp: int
    fn: int
    tn: int
    ignored_fp: int = 0
    ignored_fn: int = 0

    @staticmethod
    def _ratio(num: int, den: int) -> float:
        return num / den if den > 0 else math.nan

    @property
    def dice(self) -> float:
        return self._ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn)

    @property
    def sensitivity(self) -> float:
        return self._ratio(self.tp, self.tp + self.fn)

    @property
    def specificity(self) -> float:
        return self._ratio(self.tn, self.tn + self.fp)

    @property
    def precision(self) -> float:
        return self._ratio(self.tp, self.tp + self.fp)


@dataclass(frozen=True)
class ClassMetrics:
    """All metrics of one class, or absence flags instead of numbers."""

    class_name: str
    pred_missing: bool
    gt_missing: bool
    raw: Optional[OverlapStats] = None
    tolerant: Optional[OverlapStats] = None
    hausdorff_mm: Optional[float] = None
    mean_distance_mm: Optional[float] = None

    @property
    def scored(self) -> bool:
        return not (self.pred_missing or self.gt_missing)


@dataclass(frozen=True)
class MetricsReport:
    per_class: dict[str, ClassMetrics]

    def __getitem__(self, name: str) -> ClassMetrics:
        return self.per_class[name]


def dice(pred: BinaryMask, gt: BinaryMask) -> float:
    """2|A n B| / (|A| + |B|)."""
    require_same_geometry(pred, gt)
    na, nb = pred.count, gt.count
    if na == 0 and nb == 0:
        raise ValueError("undefined overlap")
    inter = int((pred.bits & gt.bits).sum())
    return 2.0 * inter / (na + nb)


def overlap_stats(pred: BinaryMask, gt: BinaryMask) -> OverlapStats:
    """Plain voxel classification counts without any tolerance."""
    require_same_geometry(pred, gt)
    tp = int((pred.bits & gt.bits).sum())
    fp = pred.count - tp
    fn = gt.count - tp
    tn = pred.geometry.voxel_count - tp - fp - fn
    return OverlapStats(tp=tp, fp=fp, fn=fn, tn=tn)


def tolerant_overlap(pred: BinaryMask, gt: BinaryMask) -> OverlapStats:
    """Overlap counts ignoring one-voxel mismatches at the gt border.

    False positives 26-adjacent to the ground truth and false negatives on
    the ground-truth border (gt voxels with a non-gt 26-neighbor, grid
    edges counting as outside) are ignored: excluded from both the error
    and the success counts.
    """
    require_same_geometry(pred, gt)
    if gt.is_empty:
        raise ValueError("empty ground truth")
    near_gt = ndimage.binary_dilation(gt.bits, structure=_BOX26)
    border = gt.bits & ~ndimage.binary_erosion(gt.bits, structure=_BOX26, border_value=0)

    tp = int((pred.bits & gt.bits).sum())
    fp_all = pred.bits & ~gt.bits
    fn_all = gt.bits & ~pred.bits
    ignored_fp = int((fp_all & near_gt).sum())
    ignored_fn = int((fn_all & border).sum())
    fp = int(fp_all.sum()) - ignored_fp
    fn = int(fn_all.sum()) - ignored_fn
    tn = int((~pred.bits & ~gt.bits).sum())
    return OverlapStats(tp=tp, fp=fp, fn=fn, tn=tn, ignored_fp=ignored_fp, ignored_fn=ignored_fn)


def _cropped_distance_fields(a: BinaryMask, b: BinaryMask):
    """Exact mm distance-to-a and distance-to-b over the joint bounding box.

    Every set voxel of either mask lies inside the box, so nearest-neighbor
    distances evaluated at those voxels are exact.
    """
    geometry = a.geometry
    coords = np.argwhere(a.bits | b.bits)
    lo = coords.min(axis=0)
    hi = coords.max(axis=0) + 1
    box = tuple(slice(int(l), int(h)) for l, h in zip(lo, hi))
    sub_a = a.bits[box]
    sub_b = b.bits[box]
    dist_to_a = ndimage.distance_transform_edt(~sub_a, sampling=geometry.spacing)
    dist_to_b = ndimage.distance_transform_edt(~sub_b, sampling=geometry.spacing)
    return sub_a, sub_b, dist_to_a, dist_to_b


def hausdorff(a: BinaryMask, b: BinaryMask) -> float:
    """Undirected Hausdorff distance in millimeters (exact, no chamfer)."""
    require_same_geometry(a, b)
    if a.is_empty or b.is_empty:
        raise ValueError("empty mask")
    sub_a, sub_b, dist_to_a, dist_to_b = _cropped_distance_fields(a, b)
    return float(max(dist_to_b[sub_a].max(), dist_to_a[sub_b].max()))


def mean_distance(a: BinaryMask, b: BinaryMask) -> float:
    """Symmetric mean nearest-neighbor distance in millimeters."""
    require_same_geometry(a, b)
    if a.is_empty or b.is_empty:
        raise ValueError("empty mask")
    sub_a, sub_b, dist_to_a, dist_to_b = _cropped_distance_fields(a, b)
    total = float(dist_to_b[sub_a].sum() + dist_to_a[sub_b].sum())
    return total / (a.count + b.count)


def _evaluate_class(name: str, pred: BinaryMask, gt: BinaryMask) -> ClassMetrics:
    pred_missing = pred.is_empty
    gt_missing = gt.is_empty
    if pred_missing or gt_missing:
        return ClassMetrics(name, pred_missing=pred_missing, gt_missing=gt_missing)
    return ClassMetrics(
        name,
        pred_missing=False,
        gt_missing=False,
        raw=overlap_stats(pred, gt),
        tolerant=tolerant_overlap(pred, gt),
        hausdorff_mm=hausdorff(pred, gt),
        mean_distance_mm=mean_distance(pred, gt),
    )


def evaluate(pred: MultiLabelMask, gt: MultiLabelMask, threads: int = 1) -> MetricsReport:
    """Per-class raw and tolerant overlap plus both distance metrics.

    Classes empty on either side are flagged, not scored.
    """
    require_same_geometry(pred, gt)
    if pred.registry != gt.registry:
        raise ValueError("registry mismatch between prediction and ground truth")
    names = pred.registry.names
    pairs = [(name, decode(pred, name), decode(gt, name)) for name in names]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(lambda args: _evaluate_class(*args), pairs))
    else:
        rows = [_evaluate_class(*args) for args in pairs]
    return MetricsReport(per_class={row.class_name: row for row in rows})


def _fmt(value: Optional[float]) -> str:
    if value is None:
        return "-"
    return "nan" if math.isnan(value) else f"{value:.4f}"


def report_to_text(report: MetricsReport) -> str:
    """Aligned plain-text metrics table."""
    headers = (
        "class",
        "dice",
        "tol_dice",
        "tol_sens",
        "tol_spec",
        "tol_prec",
        "hausdorff_mm",
        "mean_dist_mm",
        "status",
    )
    rows = [headers]
    for name, cm in report.per_class.items():
        if cm.scored:
            status = "scored"
            cells = (
                _fmt(cm.raw.dice),
                _fmt(cm.tolerant.dice),
                _fmt(cm.tolerant.sensitivity),
                _fmt(cm.tolerant.specificity),
                _fmt(cm.tolerant.precision),
                _fmt(cm.hausdorff_mm),
                _fmt(cm.mean_distance_mm),
            )
        else:
            flags = [s for s, on in (("no_pred", cm.pred_missing), ("no_gt", cm.gt_missing)) if on]
            status = "+".join(flags)
            cells = ("-",) * 7
        rows.append((name, *cells, status))
    widths = [max(len(row[i]) for row in rows) for i in range(len(headers))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    return "\n".join(lines) + "\n"


def report_to_csv(report: MetricsReport) -> str:
    """Machine-readable "class,metric,value" rows."""
    lines = ["class,metric,value"]
    for name, cm in report.per_class.items():
        if not cm.scored:
            status = "missing_pred" if cm.pred_missing else "missing_gt"
            if cm.pred_missing and cm.gt_missing:
                status = "missing_both"
            lines.append(f"{name},status,{status}")
            continue
        lines.append(f"{name},status,scored")
        values = {
            "dice": cm.raw.dice,
            "sensitivity": cm.raw.sensitivity,
            "specificity": cm.raw.specificity,
            "precision": cm.raw.precision,
            "tolerant_dice": cm.tolerant.dice,
            "tolerant_sensitivity": cm.tolerant.sensitivity,
            "tolerant_specificity": cm.tolerant.specificity,
            "tolerant_precision": cm.tolerant.precision,
            "hausdorff_mm": cm.hausdorff_mm,
            "mean_distance_mm": cm.mean_distance_mm,
        }
        for metric, value in values.items():
            lines.append(f"{name},{metric},{value:.9g}")
    return "\n".join(lines) + "\n"
