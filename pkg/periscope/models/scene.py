"""
Pydantic models for synthetic periocular scenes and rendered samples.
All lengths are millimetres in the scene frame: X right, Y down, Z away
from the camera.
"""

from __future__ import annotations

import math
from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .camera import CameraIntrinsics, CameraPose

D_MIN_MM = 20.0
D_MAX_MM = 90.0
FORMAT_VERSION = 1


# ── Scene parts ───────────────────────────────────────────────

class EyeballSpec(BaseModel):
    center_mm: tuple[float, float, float] = (0.0, 0.0, 51.0)
    radius_mm: float = Field(default=12.0, gt=5, le=15)
    iris_diameter_mm: float = Field(default=11.0, gt=0, le=13)


class PupilSpec(BaseModel):
    diameter_mm: float = Field(default=4.0, ge=2.0, le=8.0)
    gaze: tuple[float, float, float] = (0.0, 0.0, -1.0)   # unit vector, towards the camera

    @field_validator("gaze")
    @classmethod
    def _normalize_gaze(cls, v: tuple[float, float, float]) -> tuple[float, float, float]:
        norm = math.sqrt(sum(c * c for c in v))
        if norm == 0.0:
            raise ValueError("gaze vector must be non-zero")
        gx, gy, gz = (c / norm for c in v)
        if gz >= 0:
            raise ValueError("gaze must point towards the camera (negative Z)")
        return (gx, gy, gz)


class EyelidSpec(BaseModel):
    """Lids are parabolas in eye-centred X/Y: top = -a/2 + kX², bottom = a/2 - kX²."""
    aperture_mm: float = Field(default=10.0, ge=0.0, le=16.0)
    curvature_per_mm: float = Field(default=0.03, gt=0)
    thickness_mm: float = Field(default=1.0, ge=0)


class SkinSpec(BaseModel):
    """Heightfield Z = base + k(X² + Y²) - brow ridge - cheekbone ridge."""
    base_depth_mm: float = 46.0
    curvature_per_mm: float = Field(default=0.005, ge=0, le=0.008)
    brow_amplitude_mm: float = Field(default=4.0, ge=0)
    brow_center_y_mm: float = -16.0
    brow_width_mm: float = Field(default=6.0, gt=0)
    cheek_amplitude_mm: float = Field(default=3.0, ge=0)
    cheek_center_y_mm: float = 17.0
    cheek_width_mm: float = Field(default=8.0, gt=0)


class SceneSpec(BaseModel):
    """Full parameter set of one synthetic periocular scene."""
    seed: int = 0
    eyeball: EyeballSpec = Field(default_factory=EyeballSpec)
    pupil: PupilSpec = Field(default_factory=PupilSpec)
    eyelids: EyelidSpec = Field(default_factory=EyelidSpec)
    skin: SkinSpec = Field(default_factory=SkinSpec)
    theta_light: float = Field(default=4.0e5, ge=0)
    theta_noise: float = Field(default=2.0, ge=0)
    light_position_mm: tuple[float, float, float] = (0.0, -6.0, 0.0)
    albedo: float = Field(default=0.6, ge=0.2, le=0.9)
    camera: CameraIntrinsics = Field(default_factory=CameraIntrinsics.default)
    pose: CameraPose = Field(default_factory=CameraPose)

    @model_validator(mode="after")
    def _depths_in_range(self) -> "SceneSpec":
        # Cheap analytic bounds; render() re-checks the exact per-pixel depths.
        front = self.eyeball.center_mm[2] - self.eyeball.radius_mm - self.eyelids.thickness_mm
        nearest_skin = (
            self.skin.base_depth_mm - self.skin.brow_amplitude_mm - self.skin.cheek_amplitude_mm
        )
        z_cam = self.pose.translation_mm[2]
        if min(front, nearest_skin) - z_cam < D_MIN_MM:
            raise ValueError(f"scene comes closer than {D_MIN_MM} mm to the camera")
        if self.skin.base_depth_mm - z_cam > D_MAX_MM:
            raise ValueError(f"skin base lies beyond {D_MAX_MM} mm")
        return self


# ── Rendered outputs ──────────────────────────────────────────

class SamplePair(BaseModel):
    """One rendered (image, depth) pair with its scene and intrinsics."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    image: np.ndarray                 # (R, R) uint8, red channel
    depth: np.ndarray                 # (R, R) float64 millimetres
    spec: SceneSpec
    intrinsics: CameraIntrinsics

    def meta(self) -> dict[str, Any]:
        """Sidecar JSON contents."""
        return {
            "format_version": FORMAT_VERSION,
            "resolution": int(self.image.shape[0]),
            "intrinsics": {
                k: getattr(self.intrinsics, k) for k in ("fx", "fy", "cx", "cy", "s")
            },
            "d_min": D_MIN_MM,
            "d_max": D_MAX_MM,
            "scene": self.spec.model_dump(mode="json"),
        }


class GroundTruthSegmentation(BaseModel):
    """Segmentation a headset API would report, computed from the scene itself."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    pupil_mask: np.ndarray                       # (R, R) bool
    eyeball_mask: np.ndarray                     # (R, R) bool, exposed eyeball
    top_lid: list[tuple[float, float]]           # image (x, y) samples
    bottom_lid: list[tuple[float, float]]
    gaze: tuple[float, float, float]
    region_masks: dict[str, np.ndarray] = Field(default_factory=dict)


class StreamFrame(BaseModel):
    index: int
    spec: SceneSpec
    blink: bool = False
    gaze_angle_deg: float = 0.0


class StreamManifest(BaseModel):
    format_version: int = FORMAT_VERSION
    fps: int = Field(gt=0)
    resolution: int
    n_frames: int
    seed: int
    frames: list[StreamFrame] = Field(default_factory=list)
