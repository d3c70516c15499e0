"""
Robust per-pixel fusion of several depth maps of the same view.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from periscope.errors import AggregationError
from periscope.models.pipeline import GateConfig

logger = logging.getLogger(__name__)

MAD_SCALE = 0.6745
MIN_MAPS = 3


@dataclass
class AggregateResult:
    depth: np.ndarray
    n_maps: int
    n_outliers_excluded: int
    kept: np.ndarray          # (k, H, W) bool, which samples survived


def _mad_keep(stack: np.ndarray, cutoff: float) -> np.ndarray:
    median = np.median(stack, axis=0)
    dev = np.abs(stack - median)
    mad = np.median(dev, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = MAD_SCALE * dev / mad
    # zero MAD: only values equal to the median survive
    return np.where(mad > 0, z <= cutoff, dev == 0)


def _two_sigma_keep(stack: np.ndarray) -> np.ndarray:
    mean = stack.mean(axis=0)
    std = stack.std(axis=0)
    return np.abs(stack - mean) <= 2.0 * std


def aggregate_depths(maps: Sequence[np.ndarray], config: GateConfig) -> AggregateResult:
    """Exclude per-pixel outliers (modified z-score or two-sigma), then average the survivors."""
    if len(maps) < MIN_MAPS:
        raise AggregationError(f"aggregation needs at least {MIN_MAPS} maps, got {len(maps)}")
    shapes = {np.shape(m) for m in maps}
    if len(shapes) != 1:
        raise AggregationError(f"depth maps differ in shape: {sorted(shapes)}")

    stack = np.stack([np.asarray(m, dtype=np.float64) for m in maps])
    if config.outlier_mode == "mad":
        keep = _mad_keep(stack, config.mad_cutoff)
    else:
        keep = _two_sigma_keep(stack)

    depth = (stack * keep).sum(axis=0) / keep.sum(axis=0)
    excluded = int((~keep).sum())
    logger.info("Aggregated %d maps (%s): %d samples excluded", len(maps), config.outlier_mode, excluded)
    return AggregateResult(depth=depth, n_maps=len(maps), n_outliers_excluded=excluded, kept=keep)
