"""Depth-map and point-cloud error metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .fusion import PointCloud


@dataclass
class DepthMetrics:
    thresholds: tuple[float, ...]
    precision: tuple[float, ...]  # fraction of masked pixels with |err| < threshold
    mae: float

    def as_dict(self) -> dict[str, float]:
        out = {f"prec@{t:g}": p for t, p in zip(self.thresholds, self.precision)}
        out["mae"] = self.mae
        return out


def eval_depth(d_est: np.ndarray, d_gt: np.ndarray, mask: np.ndarray,
               thresholds=(0.125, 0.25)) -> DepthMetrics:
    if np.shape(d_est) != np.shape(d_gt) or np.shape(mask) != np.shape(d_gt):
        raise ValueError(f"resolution mismatch {np.shape(d_est)} / {np.shape(d_gt)} / {np.shape(mask)}")
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty evaluation mask")
    err = np.abs(np.asarray(d_est, dtype=np.float64) - d_gt)[mask]
    thresholds = tuple(float(t) for t in thresholds)
    return DepthMetrics(thresholds, tuple(float((err < t).mean()) for t in thresholds), float(err.mean()))


@dataclass
class CloudMetrics:
    accuracy: float
    completeness: float
    overall: float
    dist_thresh: float


def point_spacing(points: np.ndarray) -> float:
    """Median nearest-neighbor distance within ``points``."""
    if len(points) < 2:
        return 0.0
    d, _ = cKDTree(points).query(points, k=2)
    return float(np.median(d[:, 1]))


def _directed(src: np.ndarray, dst: np.ndarray, thresh: float) -> float:
    d, _ = cKDTree(dst).query(src, k=1)
    kept = d[d <= thresh]
    return float(kept.mean()) if kept.size else float("nan")


def eval_cloud(est: PointCloud, gt: PointCloud, dist_thresh: float | None = None) -> CloudMetrics:
    """Accuracy (est -> gt), completeness (gt -> est) and their mean.

    Nearest-neighbor distances beyond ``dist_thresh`` are left out of each
    mean; the default threshold is 20 times the GT point spacing.
    """
    if len(est) == 0 or len(gt) == 0:
        raise ValueError("eval_cloud needs two non-empty clouds")
    if dist_thresh is None:
        dist_thresh = 20.0 * point_spacing(gt.points)
    acc = _directed(est.points, gt.points, dist_thresh)
    comp = _directed(gt.points, est.points, dist_thresh)
    return CloudMetrics(acc, comp, (acc + comp) / 2, float(dist_thresh))
