"""
Pydantic models for gating, aggregation and metric measurement.
"""

from __future__ import annotations

from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field


class GateConfig(BaseModel):
    gaze_epsilon_deg: float = Field(default=5.0, gt=0)
    openness_tolerance: float = Field(default=0.95, gt=0, le=1)
    capacity: int = Field(default=8, ge=3)
    mad_cutoff: float = Field(default=3.5, gt=0)
    outlier_mode: Literal["mad", "two-sigma"] = "mad"
    calibration_seconds: float = Field(default=6.0, gt=0)
    straight_axis: tuple[float, float, float] = (0.0, 0.0, -1.0)


class Collection(BaseModel):
    """Frames gathered for one prediction round, in stream order."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    frames: list[np.ndarray] = Field(default_factory=list)
    indices: list[int] = Field(default_factory=list)
    complete: bool = False
    rejected_closed: int = 0
    rejected_gaze: int = 0


class PupilMeasurement(BaseModel):
    diameter_mm: float = Field(gt=0, lt=12)
    fit_rms_mm: float = Field(ge=0)
    n_boundary_points: int


class RegionError(BaseModel):
    mean_mm: float
    std_mm: float
    n_pixels: int


class MeasurementReport(BaseModel):
    diameter_mm: float
    fit_rms_mm: float
    n_boundary_points: int
    n_maps_used: int
    n_outliers_excluded: int
    threshold_px: Optional[float] = None
    per_region_mae: Optional[dict[str, RegionError]] = None
    format_version: int = 1


class RefractionRow(BaseModel):
    angle_deg: float
    actual_mm: float
    observed_mm: float
    error_pct: float
