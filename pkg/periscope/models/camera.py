"""
Pinhole camera model shared by the renderer, back-projection and
measurement stages. Pixel indices are pixel centres.
"""

from __future__ import annotations

import math

from pydantic import BaseModel, ConfigDict, Field, model_validator

REFERENCE_RESOLUTION = 256


class CameraIntrinsics(BaseModel):
    """fx, fy, cx, cy in pixels; s converts depth-map units to millimetres."""

    model_config = ConfigDict(frozen=True)

    fx: float = Field(gt=0)
    fy: float = Field(gt=0)
    cx: float
    cy: float
    s: float = Field(default=1.0, gt=0)
    width: int = Field(default=REFERENCE_RESOLUTION, gt=0)
    height: int = Field(default=REFERENCE_RESOLUTION, gt=0)

    @model_validator(mode="after")
    def _principal_point_inside(self) -> "CameraIntrinsics":
        if not (0 <= self.cx <= self.width - 1 and 0 <= self.cy <= self.height - 1):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )
        return self

    @classmethod
    def default(cls, resolution: int = REFERENCE_RESOLUTION) -> "CameraIntrinsics":
        """Square sensor with a 53 degree field of view and a centred principal point."""
        return cls(
            fx=float(resolution), fy=float(resolution),
            cx=resolution / 2 - 0.5, cy=resolution / 2 - 0.5,
            width=resolution, height=resolution,
        )

    def scaled(self, resolution: int) -> "CameraIntrinsics":
        """Same optics sampled on a square `resolution` grid."""
        kx = resolution / self.width
        ky = resolution / self.height
        return self.model_copy(update={
            "fx": self.fx * kx, "fy": self.fy * ky,
            "cx": (self.cx + 0.5) * kx - 0.5, "cy": (self.cy + 0.5) * ky - 0.5,
            "width": resolution, "height": resolution,
        })

    def footprint_mm(self, depth: float) -> float:
        """Metric size of one pixel at the given map depth."""
        return self.s * depth / min(self.fx, self.fy)


class CameraPose(BaseModel):
    """Camera placement in the scene frame (X right, Y down, Z forward, mm)."""

    model_config = ConfigDict(frozen=True)

    translation_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)
    yaw_deg: float = Field(default=0.0, ge=-30, le=30)
    pitch_deg: float = Field(default=0.0, ge=-30, le=30)

    def rotation(self) -> list[list[float]]:
        """Camera-to-scene rotation: yaw about Y after pitch about X."""
        cy, sy = math.cos(math.radians(self.yaw_deg)), math.sin(math.radians(self.yaw_deg))
        cp, sp = math.cos(math.radians(self.pitch_deg)), math.sin(math.radians(self.pitch_deg))
        return [
            [cy, sy * sp, sy * cp],
            [0.0, cp, -sp],
            [-sy, cy * sp, cy * cp],
        ]
