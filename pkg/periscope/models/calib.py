"""
Pydantic models for scene-parameter calibration.
"""

from __future__ import annotations

from pydantic import BaseModel, Field

from .scene import SceneSpec

PIXEL_RANGE = 255.0


class CalibConfig(BaseModel):
    block_grid: int = Field(default=8, ge=1)
    alpha: float = Field(default=0.02, gt=0)
    mae_threshold: float = Field(default=0.005 * PIXEL_RANGE, gt=0)   # 1.275 pixel units
    max_steps: int = Field(default=100, ge=1)
    fd_step: float = Field(default=0.01, gt=0)       # finite-difference step as a fraction of parameter scale
    divergence_steps: int = Field(default=10, ge=1)


class CalibStep(BaseModel):
    step: int
    theta_noise: float
    theta_light: float
    mae_total: float


class CalibResult(BaseModel):
    spec: SceneSpec
    trace: list[CalibStep]
    converged: bool
    diverged: bool = False
    mae_total: float
    max_block_error: float

    @property
    def mae_pct(self) -> float:
        return 100.0 * self.mae_total / PIXEL_RANGE

    @property
    def max_block_pct(self) -> float:
        return 100.0 * self.max_block_error / PIXEL_RANGE
