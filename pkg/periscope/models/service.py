"""
Pydantic models for the HTTP service.
"""

from __future__ import annotations

from typing import Optional

from pydantic import BaseModel, Field

from .camera import CameraIntrinsics
from .pipeline import RefractionRow
from .training import MetricsReport


# ── Refraction ────────────────────────────────────────────────


class RefractionRequest(BaseModel):
    angles_deg: list[float] = Field(default_factory=lambda: [0, 10, 20, 30, 40, 50, 60], min_length=1)
    radius_mm: float = Field(default=8.0, gt=0)
    chamber_depth_mm: float = Field(default=2.7, gt=0)
    index: float = Field(default=1.35, ge=1.0)
    pupil_mm: float = Field(default=4.0, gt=0)


class RefractionResponse(BaseModel):
    rows: list[RefractionRow]


# ── Back-projection ───────────────────────────────────────────


class BackProjectRequest(BaseModel):
    """Pixel coordinates with their depth values, read off a depth map by the caller."""

    intrinsics: CameraIntrinsics
    pixels: list[tuple[float, float]] = Field(..., min_length=1)
    depths: list[float] = Field(..., min_length=1)


class BackProjectResponse(BaseModel):
    points_mm: list[Optional[tuple[float, float, float]]]
    n_invalid: int = 0


# ── Evaluation ────────────────────────────────────────────────


class EvaluateRequest(BaseModel):
    """Predicted and ground-truth depth in millimetres, any matching shape."""

    pred_mm: list = Field(..., description="nested list, same shape as gt_mm")
    gt_mm: list


class EvaluateResponse(BaseModel):
    metrics: MetricsReport


class ErrorResponse(BaseModel):
    error: str
    message: str
