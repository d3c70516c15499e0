"""
Pydantic models for the depth network architecture and checkpoints.
"""

from __future__ import annotations

from typing import Any, Optional

from pydantic import BaseModel, Field, field_validator


class D5Skips(BaseModel):
    """Weights applied to the sources concatenated into decoder level 5."""
    e3: float = 0.1
    e4: float = 0.8
    e5: float = 1.0
    bn: float = 1.0


class D4Skips(BaseModel):
    """Weights applied to the sources concatenated into decoder level 4."""
    e3: float = 0.2
    e4: float = 0.5
    bn: float = 0.8
    d5: float = 1.0


class SkipWeights(BaseModel):
    d5: D5Skips = Field(default_factory=D5Skips)
    d4: D4Skips = Field(default_factory=D4Skips)


class NetworkConfig(BaseModel):
    base_channels: int = Field(default=8, ge=1)
    input_resolution: int = 64
    dropout_p: float = Field(default=0.5, ge=0.0, lt=1.0)
    skip_weights: SkipWeights = Field(default_factory=SkipWeights)

    @field_validator("input_resolution")
    @classmethod
    def _power_of_two(cls, v: int) -> int:
        if v < 64 or v & (v - 1):
            raise ValueError(f"input_resolution must be a power of two >= 64, got {v}")
        return v

    def channels(self) -> list[int]:
        """Encoder widths E1..E5 followed by the bottleneck width."""
        return [self.base_channels * 2 ** i for i in range(6)]


class ParamEntry(BaseModel):
    name: str
    shape: list[int]


class CheckpointHeader(BaseModel):
    """JSON header stored between the magic/version prefix and the float blob."""
    network: NetworkConfig
    training: dict[str, Any] = Field(default_factory=dict)
    params: list[ParamEntry] = Field(default_factory=list)
    buffers: list[ParamEntry] = Field(default_factory=list)
    depth_range_mm: tuple[float, float] = (20.0, 90.0)
    note: Optional[str] = None
