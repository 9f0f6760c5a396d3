"""Segmentation evaluation: Dice, Jaccard, 95% Hausdorff distance, and
average symmetric surface distance, per class and averaged over
foreground classes.

Conventions (fixed here so results are reproducible):

* surfaces are mask voxels with at least one six-connected background
  neighbor, counting the outside of the volume as background;
* distances are voxel-center Euclidean distances in voxel units;
* percentiles interpolate linearly between order statistics;
* hd95 is the max of the two directed 95th percentiles, asd the mean of
  all directed distances pooled from both directions;
* overlap of two empty masks scores (1, 1), of one empty mask (0, 0);
  surface distances require both masks nonempty.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import EmptyMask, InvalidParam

_SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


@dataclass
class ClassMetrics:
    dice: float
    jaccard: float
    hd95: float
    asd: float

    def as_dict(self) -> dict[str, float]:
        return {"dice": self.dice, "jaccard": self.jaccard,
                "hd95": self.hd95, "asd": self.asd}


@dataclass
class MetricReport:
    """Per-class metrics plus their mean over foreground classes."""

    per_class: dict[int, ClassMetrics]
    mean: ClassMetrics
    volume_id: str = ""

    def to_json_dict(self) -> dict:
        return {
            "volume_id": self.volume_id,
            "per_class": {str(c): m.as_dict() for c, m in self.per_class.items()},
            "mean": self.mean.as_dict(),
        }

    def csv_rows(self) -> list[dict]:
        rows = []
        for c, m in sorted(self.per_class.items()):
            rows.append({"volume_id": self.volume_id, "class": c, **m.as_dict()})
        return rows


def dice_jaccard(pred: np.ndarray, ref: np.ndarray) -> tuple[float, float]:
    """Overlap scores for two binary masks."""
    pred = np.asarray(pred, dtype=bool)
    ref = np.asarray(ref, dtype=bool)
    if pred.shape != ref.shape:
        raise InvalidParam(f"mask shapes differ: {pred.shape} vs {ref.shape}")
    a, b = int(pred.sum()), int(ref.sum())
    if a == 0 and b == 0:
        return 1.0, 1.0
    if a == 0 or b == 0:
        return 0.0, 0.0
    inter = int(np.logical_and(pred, ref).sum())
    dice = 2.0 * inter / (a + b)
    jaccard = inter / (a + b - inter)
    return dice, jaccard


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with a six-connected background neighbor (the volume
    border counts as background)."""
    mask = np.asarray(mask, dtype=bool)
    interior = ndimage.binary_erosion(mask, structure=_SIX_CONNECTED, border_value=0)
    return mask & ~interior


def _directed_distances(surf_from: np.ndarray, surf_to: np.ndarray) -> np.ndarray:
    """Euclidean distance from each voxel of one surface to the nearest
    voxel of the other, via an exact distance transform."""
    dt = ndimage.distance_transform_edt(~surf_to)
    return dt[surf_from]


def surface_distances(pred: np.ndarray, ref: np.ndarray) -> tuple[float, float]:
    """(hd95, asd) between the surfaces of two nonempty masks."""
    pred = np.asarray(pred, dtype=bool)
    ref = np.asarray(ref, dtype=bool)
    if pred.shape != ref.shape:
        raise InvalidParam(f"mask shapes differ: {pred.shape} vs {ref.shape}")
    if not pred.any() or not ref.any():
        raise EmptyMask("surface distances need both masks nonempty")
    surf_p = surface_voxels(pred)
    surf_r = surface_voxels(ref)
    d_pr = _directed_distances(surf_p, surf_r)
    d_rp = _directed_distances(surf_r, surf_p)
    hd95 = max(float(np.percentile(d_pr, 95)), float(np.percentile(d_rp, 95)))
    asd = float(np.concatenate([d_pr, d_rp]).mean())
    return hd95, asd


def evaluate_masks(pred: np.ndarray, ref: np.ndarray, classes: int,
                   volume_id: str = "") -> MetricReport:
    """Per-foreground-class metrics of a predicted label grid against a
    reference. Surface distances of classes empty on either side are
    reported as NaN (missing)."""
    pred = np.asarray(pred)
    ref = np.asarray(ref)
    if pred.shape != ref.shape:
        raise InvalidParam(f"label shapes differ: {pred.shape} vs {ref.shape}")
    per_class: dict[int, ClassMetrics] = {}
    for c in range(1, classes):
        p, r = pred == c, ref == c
        dice, jac = dice_jaccard(p, r)
        try:
            hd95, asd = surface_distances(p, r)
        except EmptyMask:
            hd95, asd = math.nan, math.nan
        per_class[c] = ClassMetrics(dice=dice, jaccard=jac, hd95=hd95, asd=asd)
    mean = _mean_metrics(list(per_class.values()))
    return MetricReport(per_class=per_class, mean=mean, volume_id=volume_id)


def _mean_metrics(items: list[ClassMetrics]) -> ClassMetrics:
    def nanmean(values: list[float]) -> float:
        vals = [v for v in values if not math.isnan(v)]
        return sum(vals) / len(vals) if vals else math.nan

    return ClassMetrics(
        dice=nanmean([m.dice for m in items]),
        jaccard=nanmean([m.jaccard for m in items]),
        hd95=nanmean([m.hd95 for m in items]),
        asd=nanmean([m.asd for m in items]),
    )


def aggregate_reports(reports: list[MetricReport]) -> MetricReport:
    """Average a list of per-volume reports: per-class fields averaged
    class by class (NaN-aware), mean fields likewise."""
    if not reports:
        raise InvalidParam("cannot aggregate zero reports")
    class_ids = sorted({c for r in reports for c in r.per_class})
    per_class = {}
    for c in class_ids:
        items = [r.per_class[c] for r in reports if c in r.per_class]
        per_class[c] = ClassMetrics(
            dice=_nanmean_f([m.dice for m in items]),
            jaccard=_nanmean_f([m.jaccard for m in items]),
            hd95=_nanmean_f([m.hd95 for m in items]),
            asd=_nanmean_f([m.asd for m in items]),
        )
    mean = ClassMetrics(
        dice=_nanmean_f([r.mean.dice for r in reports]),
        jaccard=_nanmean_f([r.mean.jaccard for r in reports]),
        hd95=_nanmean_f([r.mean.hd95 for r in reports]),
        asd=_nanmean_f([r.mean.asd for r in reports]),
    )
    return MetricReport(per_class=per_class, mean=mean, volume_id="aggregate")


def _nanmean_f(values: list[float]) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return sum(vals) / len(vals) if vals else math.nan
