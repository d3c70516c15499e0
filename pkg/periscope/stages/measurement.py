"""
Metric measurement from depth maps: pinhole back-projection, pupil
diameter by plane + circle fitting, and region-wise depth error.
"""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

from periscope.errors import MeasurementError, ShapeError
from periscope.models.camera import CameraIntrinsics
from periscope.models.pipeline import PupilMeasurement, RegionError

logger = logging.getLogger(__name__)

MIN_PUPIL_PIXELS = 20
MAX_PUPIL_MM = 12.0

_NEIGHBOURS_4 = ((0, 1), (0, -1), (1, 0), (-1, 0))


# ── Pinhole geometry ──────────────────────────────────────────


def back_project_coords(
    xs: np.ndarray, ys: np.ndarray, depths: np.ndarray, intrinsics: CameraIntrinsics
) -> np.ndarray:
    """(X, Y, Z) = ((x - cx) s D / fx, (y - cy) s D / fy, s D) for every sample."""
    xs, ys, depths = (np.asarray(a, dtype=np.float64) for a in (xs, ys, depths))
    scaled = intrinsics.s * depths
    return np.stack([
        (xs - intrinsics.cx) * scaled / intrinsics.fx,
        (ys - intrinsics.cy) * scaled / intrinsics.fy,
        scaled,
    ], axis=-1)


def project(intrinsics: CameraIntrinsics, points: np.ndarray) -> np.ndarray:
    """Camera-frame points (..., 3) in mm to pixel coordinates (..., 2)."""
    points = np.asarray(points, dtype=np.float64)
    z = points[..., 2]
    return np.stack([
        intrinsics.fx * points[..., 0] / z + intrinsics.cx,
        intrinsics.fy * points[..., 1] / z + intrinsics.cy,
    ], axis=-1)


def back_project(
    depth: np.ndarray,
    intrinsics: CameraIntrinsics,
    pixels: Sequence[tuple[float, float]],
) -> tuple[np.ndarray, np.ndarray]:
    """
    Back-project pixel centres using the depth map value at each pixel.
    Returns (points, valid); invalid rows (non-positive depth) are NaN.
    """
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    h, w = depth.shape
    cols = np.rint(px[:, 0]).astype(np.int64)
    rows = np.rint(px[:, 1]).astype(np.int64)
    if np.any((cols < 0) | (cols >= w) | (rows < 0) | (rows >= h)):
        raise ShapeError(f"pixel outside the {w}x{h} depth map")
    d = depth[rows, cols].astype(np.float64)
    valid = np.isfinite(d) & (d > 0)
    points = back_project_coords(px[:, 0], px[:, 1], d, intrinsics)
    points[~valid] = np.nan
    if not valid.all():
        logger.warning("%d of %d pixels have non-positive depth", int((~valid).sum()), len(valid))
    return points, valid


# ── Pupil boundary ────────────────────────────────────────────


def _shift(mask: np.ndarray, dy: int, dx: int, fill: bool) -> np.ndarray:
    """out[y, x] = mask[y + dy, x + dx], `fill` outside the image."""
    h, w = mask.shape
    padded = np.pad(mask, 1, constant_values=fill)
    return padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]


def boundary_mask(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with at least one 8-neighbour outside the mask."""
    interior = mask.copy()
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            interior &= _shift(mask, dy, dx, fill=False)
    return mask & ~interior


def edge_points(depth: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Sub-pixel edge samples: one per (boundary pixel, outside 4-neighbour)
    pair, at the midpoint between the two pixel centres. Depth is the mean of
    both pixels, or the inside pixel alone when the neighbour has none.
    """
    h, w = mask.shape
    boundary = boundary_mask(mask)
    ys, xs, ds = [], [], []
    for dy, dx in _NEIGHBOURS_4:
        outside = boundary & ~_shift(mask, dy, dx, fill=False)
        rows, cols = np.nonzero(outside)
        n_rows, n_cols = rows + dy, cols + dx
        inside_depth = depth[rows, cols]
        in_bounds = (n_rows >= 0) & (n_rows < h) & (n_cols >= 0) & (n_cols < w)
        neighbour_depth = np.where(
            in_bounds, depth[np.clip(n_rows, 0, h - 1), np.clip(n_cols, 0, w - 1)], np.nan
        )
        usable = np.isfinite(neighbour_depth) & (neighbour_depth > 0)
        ys.append(rows + dy / 2)
        xs.append(cols + dx / 2)
        ds.append(np.where(usable, (inside_depth + neighbour_depth) / 2, inside_depth))
    return np.concatenate(xs), np.concatenate(ys), np.concatenate(ds)


# ── Fitting ───────────────────────────────────────────────────


def fit_plane(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares plane: returns (centroid, 2x3 in-plane basis)."""
    if len(points) < 3:
        raise MeasurementError(f"need at least 3 boundary points, got {len(points)}")
    centroid = points.mean(axis=0)
    _, sing, vt = np.linalg.svd(points - centroid, full_matrices=False)
    if sing[1] <= 1e-9 * max(sing[0], 1e-300):
        raise MeasurementError("pupil boundary points are collinear")
    return centroid, vt[:2]


def fit_circle(xy: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Algebraic (Kasa) circle fit: returns (centre, radius, RMS radial residual)."""
    x, y = xy[:, 0], xy[:, 1]
    design = np.column_stack([2 * x, 2 * y, np.ones_like(x)])
    (a, b, c), *_ = np.linalg.lstsq(design, x * x + y * y, rcond=None)
    r2 = c + a * a + b * b
    if r2 <= 0:
        raise MeasurementError("circle fit failed (non-positive radius)")
    radius = float(np.sqrt(r2))
    residual = np.hypot(x - a, y - b) - radius
    return np.array([a, b]), radius, float(np.sqrt(np.mean(residual ** 2)))


def measure_pupil(depth: np.ndarray, pupil_mask: np.ndarray, intrinsics: CameraIntrinsics) -> PupilMeasurement:
    """Metric pupil diameter from a depth map and a binary pupil mask."""
    mask = np.asarray(pupil_mask, dtype=bool)
    if mask.shape != depth.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match depth {depth.shape}")
    if mask.sum() < MIN_PUPIL_PIXELS:
        raise MeasurementError(f"pupil mask has {int(mask.sum())} pixels, need {MIN_PUPIL_PIXELS}")

    xs, ys, ds = edge_points(np.asarray(depth, dtype=np.float64), mask)
    keep = np.isfinite(ds) & (ds > 0)
    points = back_project_coords(xs[keep], ys[keep], ds[keep], intrinsics)
    centroid, basis = fit_plane(points)
    in_plane = (points - centroid) @ basis.T
    _, radius, rms = fit_circle(in_plane)

    diameter = 2 * radius
    if not 0 < diameter < MAX_PUPIL_MM:
        raise MeasurementError(f"fitted pupil diameter {diameter:.3f} mm outside (0, {MAX_PUPIL_MM})")
    logger.info("Pupil: %.3f mm from %d edge points (rms %.4f mm)", diameter, len(points), rms)
    return PupilMeasurement(diameter_mm=diameter, fit_rms_mm=rms, n_boundary_points=len(points))


# ── Region error ──────────────────────────────────────────────


def region_mae(pred_mm: np.ndarray, gt_mm: np.ndarray, masks: dict[str, np.ndarray]) -> dict[str, RegionError]:
    """Mean and spread of absolute depth error inside each named mask."""
    if pred_mm.shape != gt_mm.shape:
        raise ShapeError(f"prediction shape {pred_mm.shape} does not match ground truth {gt_mm.shape}")
    out: dict[str, RegionError] = {}
    for name, mask in masks.items():
        sel = np.asarray(mask, dtype=bool) & (gt_mm > 0)
        if not sel.any():
            continue
        err = np.abs(pred_mm[sel] - gt_mm[sel])
        out[name] = RegionError(mean_mm=float(err.mean()), std_mm=float(err.std()), n_pixels=int(sel.sum()))
    return out
