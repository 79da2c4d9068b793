"""Accuracy metrics between a re-simulated scan and its ground truth.

Range errors are computed on rays returned in both scans (matched by beam
grid position); rays dropped in exactly one contribute to the drop IoU only.
Errors are tracked in meters and reported in centimeters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Obb
from .scan import Scan

__all__ = [
    "RangeMetrics",
    "chamfer",
    "compute_metrics",
    "drop_iou",
    "ecdf",
    "medae_dyn",
    "range_errors",
]


@dataclass
class RangeMetrics:
    mae_cm: float
    medae_cm: float
    chamfer_cm: float
    medae_dyn_cm: float | None
    intensity_rmse: float
    drop_iou: float
    ecdf: np.ndarray  # (K, 2): error_cm, cumulative fraction

    def rows(self, scene_id: str = "", method_id: str = ""):
        rows = [
            ("mae", self.mae_cm, "cm"),
            ("medae", self.medae_cm, "cm"),
            ("chamfer", self.chamfer_cm, "cm"),
        ]
        if self.medae_dyn_cm is not None:
            rows.append(("medae_dyn", self.medae_dyn_cm, "cm"))
        rows += [
            ("intensity_rmse", self.intensity_rmse, ""),
            ("drop_iou", self.drop_iou, ""),
        ]
        return [(name, value, unit, scene_id, method_id)
                for name, value, unit in rows]


def _check_grids(gt: Scan, est: Scan):
    if (gt.n_beams, gt.n_azimuths) != (est.n_beams, est.n_azimuths):
        raise ValueError(
            f"beam grids differ: {gt.n_beams}x{gt.n_azimuths} vs "
            f"{est.n_beams}x{est.n_azimuths}")
    if (np.any(gt.beam_idx != est.beam_idx)
            or np.any(gt.azimuth_idx != est.azimuth_idx)):
        raise ValueError("scans are not in the same beam order")


def range_errors(gt: Scan, est: Scan):
    """Per-ray |range| errors (m) on rays returned in both scans.

    Returns (errors, matched_mask).
    """
    _check_grids(gt, est)
    matched = ~gt.dropped & ~est.dropped
    return np.abs(est.ranges[matched] - gt.ranges[matched]), matched


def chamfer(points_a, points_b, chunk: int = 2048) -> float:
    """Symmetric mean nearest-neighbor distance, in centimeters."""
    a = np.asarray(points_a, dtype=np.float64)
    b = np.asarray(points_b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("chamfer distance of an empty cloud")

    def one_way(x, y):
        mins = np.empty(x.shape[0])
        for lo in range(0, x.shape[0], chunk):
            hi = min(lo + chunk, x.shape[0])
            d2 = ((x[lo:hi, None, :] - y[None, :, :]) ** 2).sum(-1)
            mins[lo:hi] = np.sqrt(d2.min(axis=1))
        return mins.mean()

    return 100.0 * 0.5 * (one_way(a, b) + one_way(b, a))


def _dynamic_mask(gt: Scan, boxes) -> np.ndarray:
    """Rays whose ground-truth hit lies inside any dynamic box."""
    mask = np.zeros(len(gt), dtype=bool)
    returned = ~gt.dropped
    pts = gt.origins[returned] + gt.ranges[returned, None] * gt.directions[returned]
    inside = np.zeros(pts.shape[0], dtype=bool)
    for box in boxes:
        inside |= box.contains(pts, tol=1e-6)
    mask[np.nonzero(returned)[0][inside]] = True
    return mask


def medae_dyn(gt: Scan, est: Scan, boxes) -> float | None:
    """Median range error (cm) restricted to dynamic-object rays.

    ``boxes`` holds the world-frame Obbs at the scan time; returns None when
    no matched ray hits a dynamic box.
    """
    _check_grids(gt, est)
    dyn = _dynamic_mask(gt, boxes)
    matched = ~gt.dropped & ~est.dropped & dyn
    if not np.any(matched):
        return None
    return 100.0 * float(np.median(
        np.abs(est.ranges[matched] - gt.ranges[matched])))


def drop_iou(gt: Scan, est: Scan) -> float:
    """Intersection over union of the dropped-ray masks (1.0 if both empty)."""
    _check_grids(gt, est)
    inter = np.sum(gt.dropped & est.dropped)
    union = np.sum(gt.dropped | est.dropped)
    return 1.0 if union == 0 else float(inter / union)


def ecdf(errors) -> np.ndarray:
    """Sorted (error, cumulative fraction) pairs; empty input -> empty table."""
    e = np.sort(np.asarray(errors, dtype=np.float64).reshape(-1))
    if e.size == 0:
        return np.empty((0, 2))
    frac = np.arange(1, e.size + 1) / e.size
    return np.stack([e, frac], axis=1)


def compute_metrics(gt_scans, est_scans, boxes_per_scan=None) -> RangeMetrics:
    """Aggregate metrics over matched scan pairs.

    ``boxes_per_scan`` optionally holds, per scan, the world-frame dynamic
    Obbs at that scan's time (enables the dynamic-ray median).
    """
    if len(gt_scans) != len(est_scans):
        raise ValueError("scan list length mismatch")
    errors = []
    dyn_errors = []
    inten_sq = []
    inter = 0
    union = 0
    cd_vals = []
    for i, (gt, est) in enumerate(zip(gt_scans, est_scans)):
        err, matched = range_errors(gt, est)
        errors.append(err)
        inten_sq.append(
            (est.intensities[matched] - gt.intensities[matched]) ** 2)
        inter += np.sum(gt.dropped & est.dropped)
        union += np.sum(gt.dropped | est.dropped)
        if gt.points().size and est.points().size:
            cd_vals.append(chamfer(gt.points(), est.points()))
        if boxes_per_scan is not None:
            dyn = _dynamic_mask(gt, boxes_per_scan[i])
            m = matched & dyn
            if np.any(m):
                dyn_errors.append(np.abs(est.ranges[m] - gt.ranges[m]))
    errors = np.concatenate(errors) if errors else np.empty(0)
    inten_sq = np.concatenate(inten_sq) if inten_sq else np.empty(0)
    dyn_err = np.concatenate(dyn_errors) if dyn_errors else None
    return RangeMetrics(
        mae_cm=100.0 * float(errors.mean()) if errors.size else 0.0,
        medae_cm=100.0 * float(np.median(errors)) if errors.size else 0.0,
        chamfer_cm=float(np.mean(cd_vals)) if cd_vals else 0.0,
        medae_dyn_cm=(100.0 * float(np.median(dyn_err))
                      if dyn_err is not None and dyn_err.size else None),
        intensity_rmse=float(np.sqrt(inten_sq.mean())) if inten_sq.size else 0.0,
        drop_iou=1.0 if union == 0 else float(inter / union),
        ecdf=ecdf(100.0 * errors),
    )
