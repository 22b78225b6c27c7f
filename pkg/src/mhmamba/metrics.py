"""Region Dice and HD95 over the nested WT/TC/ET tumour regions."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

REGIONS = ("WT", "TC", "ET")
_REGION_CLASSES = {"WT": (1, 2, 3), "TC": (2, 3), "ET": (3,)}
UNDEFINED = float("nan")

_SIX = ndimage.generate_binary_structure(3, 1)


def regions_from_labels(labels: np.ndarray) -> dict[str, np.ndarray]:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 3):
        raise ValueError(f"labels must lie in {{0,1,2,3}}, found range [{labels.min()}, {labels.max()}]")
    return {r: np.isin(labels, cls) for r, cls in _REGION_CLASSES.items()}


def _check_pair(pred, gt):
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def dice_score(pred, gt) -> float:
    """Dice in percent; two empty masks count as perfect agreement."""
    pred, gt = _check_pair(pred, gt)
    denom = pred.sum() + gt.sum()
    if denom == 0:
        return 100.0
    return 100.0 * 2.0 * np.logical_and(pred, gt).sum() / denom


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a 6-connected background or out-of-volume neighbour."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_SIX, border_value=0)


def surface_distances(pred, gt, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Pooled distances from each boundary voxel of one mask to the other's boundary."""
    pred, gt = _check_pair(pred, gt)
    bp, bg = boundary(pred), boundary(gt)
    to_g = ndimage.distance_transform_edt(~bg, sampling=spacing)
    to_p = ndimage.distance_transform_edt(~bp, sampling=spacing)
    return np.concatenate([to_g[bp], to_p[bg]])


def hd95(pred, gt, spacing=(1.0, 1.0, 1.0)) -> float:
    """95th percentile (linear interpolation) of pooled surface distances, in mm.

    Returns NaN when either mask is empty.
    """
    pred, gt = _check_pair(pred, gt)
    if not pred.any() or not gt.any():
        return UNDEFINED
    return float(np.percentile(surface_distances(pred, gt, spacing), 95, method="linear"))


def hausdorff(pred, gt, spacing=(1.0, 1.0, 1.0)) -> float:
    pred, gt = _check_pair(pred, gt)
    if not pred.any() or not gt.any():
        return UNDEFINED
    return float(surface_distances(pred, gt, spacing).max())


@dataclass
class MetricsReport:
    dice: dict = field(default_factory=dict)
    hd95: dict = field(default_factory=dict)

    @property
    def mean_dice(self) -> float:
        return float(np.mean([self.dice[r] for r in REGIONS]))

    @property
    def mean_hd95(self) -> float:
        vals = [self.hd95[r] for r in REGIONS if not math.isnan(self.hd95[r])]
        return float(np.mean(vals)) if vals else UNDEFINED

    def rows(self) -> list[str]:
        out = ["region,dice,hd95"]
        for r in REGIONS:
            out.append(f"{r},{_fmt(self.dice[r])},{_fmt(self.hd95[r])}")
        out.append(f"Avg,{_fmt(self.mean_dice)},{_fmt(self.mean_hd95)}")
        return out

    def to_csv(self) -> str:
        return "\n".join(self.rows()) + "\n"


def _fmt(v: float) -> str:
    return "undefined" if math.isnan(v) else f"{v:.4f}"


def evaluate(pred_labels, gt_labels, spacing=(1.0, 1.0, 1.0)) -> MetricsReport:
    pr, gr = regions_from_labels(pred_labels), regions_from_labels(gt_labels)
    rep = MetricsReport()
    for r in REGIONS:
        rep.dice[r] = dice_score(pr[r], gr[r])
        rep.hd95[r] = hd95(pr[r], gr[r], spacing)
    return rep


def average_reports(reports) -> MetricsReport:
    """Case-averaged report; undefined HD95 entries are excluded per region."""
    out = MetricsReport()
    for r in REGIONS:
        out.dice[r] = float(np.mean([rep.dice[r] for rep in reports]))
        vals = [rep.hd95[r] for rep in reports if not math.isnan(rep.hd95[r])]
        out.hd95[r] = float(np.mean(vals)) if vals else UNDEFINED
    return out
