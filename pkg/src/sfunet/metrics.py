"""Segmentation evaluation metrics: Dice coefficient, IoU, and the 95th
percentile Hausdorff boundary distance, with per-class reporting.

Conventions pinned for determinism: both-empty masks score perfectly
(dsc = iou = 1, hd95 = 0); exactly one empty mask scores hd95 as the image
diagonal. Boundaries use 4-connectivity with the image border counting as
background; the percentile interpolates linearly between order statistics.
Per-image metrics are averaged over images (not pooled over pixels).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DataError, ShapeError
from .tensor import RealTensor4


def _as_binary(mask) -> np.ndarray:
    return np.asarray(mask).astype(bool)


def _check_pair(pred, gt):
    p, g = _as_binary(pred), _as_binary(gt)
    if p.shape != g.shape:
        raise ShapeError(f"mask dims differ: {p.shape} vs {g.shape}")
    return p, g


def dsc(pred, gt) -> float:
    """Dice similarity coefficient 2|P&G| / (|P|+|G|); both-empty -> 1."""
    p, g = _check_pair(pred, gt)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / total


def iou(pred, gt) -> float:
    """Intersection over union |P&G| / |P|G|; both-empty -> 1."""
    p, g = _check_pair(pred, gt)
    union = int(np.logical_or(p, g).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(p, g).sum()) / union


def boundary(mask) -> np.ndarray:
    """Foreground pixels with at least one background 4-neighbor.

    The image border counts as background, so foreground touching the edge
    is always boundary.
    """
    m = _as_binary(mask)
    padded = np.pad(m, 1)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return m & ~interior


def hd95(pred, gt) -> float:
    """95th percentile of symmetric boundary-to-boundary Euclidean distances.

    Distances are gathered from both directions (pred boundary to gt
    boundary and vice versa) into one multiset before taking the percentile.
    """
    p, g = _check_pair(pred, gt)
    p_any, g_any = bool(p.any()), bool(g.any())
    if not p_any and not g_any:
        return 0.0
    if p_any != g_any:
        h, w = p.shape
        return float(np.hypot(h, w))
    pb, gb = boundary(p), boundary(g)
    # exact Euclidean distance field to the nearest boundary pixel
    dist_to_g = ndimage.distance_transform_edt(~gb)
    dist_to_p = ndimage.distance_transform_edt(~pb)
    dists = np.concatenate((dist_to_g[pb], dist_to_p[gb]))
    return float(np.percentile(dists, 95.0, method="linear"))


@dataclass
class MetricReport:
    """Per-foreground-class metrics plus their arithmetic means."""

    class_ids: list[int]
    dsc: list[float]
    iou: list[float]
    hd95: list[float]

    @property
    def mean_dsc(self) -> float:
        return float(np.mean(self.dsc))

    @property
    def mean_iou(self) -> float:
        return float(np.mean(self.iou))

    @property
    def mean_hd95(self) -> float:
        return float(np.mean(self.hd95))

    def to_tsv(self) -> str:
        lines = ["class\tdsc\tiou\thd95"]
        for k, d, i, h in zip(self.class_ids, self.dsc, self.iou, self.hd95):
            lines.append(f"{k}\t{d:.6f}\t{i:.6f}\t{h:.6f}")
        lines.append(f"mean\t{self.mean_dsc:.6f}\t{self.mean_iou:.6f}\t{self.mean_hd95:.6f}")
        return "\n".join(lines) + "\n"

    def to_kv(self) -> str:
        lines = []
        for k, d, i, h in zip(self.class_ids, self.dsc, self.iou, self.hd95):
            lines.append(f"dsc_class{k}: {d:.6f}")
            lines.append(f"iou_class{k}: {i:.6f}")
            lines.append(f"hd95_class{k}: {h:.6f}")
        lines.append(f"mean_dsc: {self.mean_dsc:.6f}")
        lines.append(f"mean_iou: {self.mean_iou:.6f}")
        lines.append(f"mean_hd95: {self.mean_hd95:.6f}")
        return "\n".join(lines) + "\n"


def report_from_masks(preds: list[np.ndarray], gts: list[np.ndarray], n_classes: int) -> MetricReport:
    """Per-image binary metrics averaged per foreground class (1..K-1)."""
    if not preds:
        raise DataError("cannot evaluate an empty split")
    class_ids = list(range(1, n_classes))
    per_dsc, per_iou, per_hd = [], [], []
    for k in class_ids:
        dk, ik, hk = [], [], []
        for pred, gt in zip(preds, gts):
            pk, gk = pred == k, gt == k
            dk.append(dsc(pk, gk))
            ik.append(iou(pk, gk))
            hk.append(hd95(pk, gk))
        per_dsc.append(float(np.mean(dk)))
        per_iou.append(float(np.mean(ik)))
        per_hd.append(float(np.mean(hk)))
    return MetricReport(class_ids, per_dsc, per_iou, per_hd)


def evaluate(model, samples, n_classes: int, batch_size: int = 8) -> MetricReport:
    """Run the frozen model over a split and report per-class metrics.

    Metrics are computed per image for classes 1..K-1 (background excluded)
    and averaged over images; means average over foreground classes.
    """
    if not samples:
        raise DataError("cannot evaluate an empty split")
    dtype = model.config.dtype
    preds, gts = [], []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        batch = np.concatenate([s.image.data for s in chunk], axis=0).astype(dtype)
        labels = model.predict_classes(RealTensor4(batch, copy=False))
        for j, sample in enumerate(chunk):
            preds.append(labels[j])
            gts.append(sample.label)
    return report_from_masks(preds, gts, n_classes)
