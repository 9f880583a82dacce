"""Dice overlap and 95th-percentile Hausdorff distance, per class and as a report table."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import ValidationError
from .volumes import CLASS_NAMES, NUM_CLASSES, LabelMap

FOREGROUND = tuple(range(1, NUM_CLASSES))
_SIX = ndimage.generate_binary_structure(3, 1)


def _as_array(labels) -> np.ndarray:
    return labels.data if isinstance(labels, LabelMap) else np.asarray(labels)


def dice_masks(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


def dice(pred, gt, c: int) -> float:
    """``2|P&G| / (|P|+|G|)`` for class ``c``; 1.0 when both masks are empty."""
    p, g = _as_array(pred), _as_array(gt)
    if p.shape != g.shape:
        raise ValidationError(f"shape mismatch {p.shape} vs {g.shape}")
    return dice_masks(p == c, g == c)


def surface_mask(mask: np.ndarray) -> np.ndarray:
    """Voxels of ``mask`` with a 6-neighbour outside the mask or beyond the grid edge."""
    mask = np.asarray(mask, bool)
    interior = ndimage.binary_erosion(mask, structure=_SIX, border_value=0)
    return mask & ~interior


@dataclass
class SurfaceSet:
    coords: np.ndarray  # (n, 3) voxel indices
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __len__(self):
        return len(self.coords)

    def points_mm(self) -> np.ndarray:
        return self.coords * np.asarray(self.spacing_mm, dtype=np.float64)


def extract_surface(labels, c: int, spacing_mm=None) -> SurfaceSet:
    arr = _as_array(labels)
    if spacing_mm is None:
        spacing_mm = labels.spacing_mm if isinstance(labels, LabelMap) else (1.0, 1.0, 1.0)
    return SurfaceSet(np.argwhere(surface_mask(arr == c)), tuple(spacing_mm))


def nearest_rank(values: np.ndarray, q: float = 95.0) -> float:
    """Smallest value whose rank is at least ``ceil(q/100 * n)``."""
    ordered = np.sort(np.asarray(values, dtype=np.float64))
    rank = max(1, math.ceil(q / 100.0 * len(ordered)))
    return float(ordered[rank - 1])


def _directed(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return cKDTree(b).query(a, k=1)[0]


def hd95(pred, gt, c: int, spacing_mm=(1.0, 1.0, 1.0), q: float = 95.0) -> float:
    """Symmetric nearest-rank percentile surface distance in mm; ``nan`` if either surface is empty."""
    p, g = _as_array(pred), _as_array(gt)
    if p.shape != g.shape:
        raise ValidationError(f"shape mismatch {p.shape} vs {g.shape}")
    for grid in (pred, gt):
        if isinstance(grid, LabelMap) and tuple(grid.spacing_mm) != tuple(float(s) for s in spacing_mm):
            raise ValidationError(f"spacing mismatch {grid.spacing_mm} vs {tuple(spacing_mm)}")
    sp = extract_surface(p, c, spacing_mm).points_mm()
    sg = extract_surface(g, c, spacing_mm).points_mm()
    if len(sp) == 0 or len(sg) == 0:
        return math.nan
    return max(nearest_rank(_directed(sp, sg), q), nearest_rank(_directed(sg, sp), q))


# --------------------------------------------------------------------------- #
# Reports
# --------------------------------------------------------------------------- #

@dataclass
class ClassMetrics:
    dice: float
    hd95: float
    hd95_cases: int


@dataclass
class MetricsReport:
    per_class: dict[str, ClassMetrics]
    overall_dice: float
    overall_hd95: float
    cases: list[dict] = field(default_factory=list)
    undefined_classes: list[str] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["case", "class", "dice", "hd95_mm", "hd95_defined"])
            for row in self.cases:
                defined = not math.isnan(row["hd95"])
                writer.writerow([row["case"], row["class"], repr(row["dice"]),
                                 repr(row["hd95"]) if defined else "nan", int(defined)])

    def table(self) -> str:
        lines = [f"{'':<14}{'Dice':>8}{'HD95 (mm)':>12}", "-" * 34]
        for name, m in self.per_class.items():
            hd = "n/a" if math.isnan(m.hd95) else f"{m.hd95:.3f}"
            lines.append(f"{name:<14}{m.dice:>8.3f}{hd:>12}")
        lines.append("-" * 34)
        hd = "n/a" if math.isnan(self.overall_hd95) else f"{self.overall_hd95:.3f}"
        lines.append(f"{'Overall':<14}{self.overall_dice:>8.3f}{hd:>12}")
        return "\n".join(lines)


def evaluate(preds: Mapping[str, LabelMap], gts: Mapping[str, LabelMap], spacing_mm=None) -> MetricsReport:
    """Per-case metrics averaged per class over cases, then an unweighted mean over the five classes.

    Cases where HD95 is undefined for a class are left out of that class mean;
    a class with no defined case is reported as ``nan`` and left out of the overall HD95.
    """
    if not gts:
        raise ValidationError("empty test set")
    if set(preds) != set(gts):
        raise ValidationError(f"prediction and ground-truth case ids differ: {sorted(set(preds) ^ set(gts))}")
    rows = []
    for case in sorted(gts):
        pred, gt = preds[case], gts[case]
        if pred.shape != gt.shape:
            raise ValidationError(f"{case}: shape mismatch {pred.shape} vs {gt.shape}")
        spacing = tuple(spacing_mm) if spacing_mm is not None else gt.spacing_mm
        for c in FOREGROUND:
            rows.append({"case": case, "class": CLASS_NAMES[c], "dice": dice(pred.data, gt.data, c),
                         "hd95": hd95(pred.data, gt.data, c, spacing)})
    per_class, undefined = {}, []
    for c in FOREGROUND:
        name = CLASS_NAMES[c]
        mine = [r for r in rows if r["class"] == name]
        hds = [r["hd95"] for r in mine if not math.isnan(r["hd95"])]
        if not hds:
            undefined.append(name)
        per_class[name] = ClassMetrics(float(np.mean([r["dice"] for r in mine])),
                                       float(np.mean(hds)) if hds else math.nan, len(hds))
    overall_dice = float(np.mean([m.dice for m in per_class.values()]))
    defined = [m.hd95 for m in per_class.values() if not math.isnan(m.hd95)]
    overall_hd = float(np.mean(defined)) if defined else math.nan
    return MetricsReport(per_class, overall_dice, overall_hd, rows, undefined)
