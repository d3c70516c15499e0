"""
Pydantic models for training configuration, history and evaluation reports.
"""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field, model_validator


class TrainConfig(BaseModel):
    lr: float = Field(default=1e-4, gt=0)
    max_epochs: int = Field(default=150, ge=1)
    patience: int = Field(default=20, ge=0)          # 0 disables early stopping
    batch_size: int = Field(default=4, ge=1)
    berhu_fraction: float = Field(default=0.24, gt=0, le=1)
    split: tuple[float, float, float] = (0.70, 0.15, 0.15)
    seed: int = 0
    optimizer: Literal["adam", "sgd"] = "adam"
    target_train_loss: Optional[float] = Field(default=None, gt=0)

    @model_validator(mode="after")
    def _check(self) -> "TrainConfig":
        if abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise ValueError(f"split must be non-negative and sum to 1.0, got {self.split}")
        if self.patience >= self.max_epochs:
            raise ValueError("patience must be smaller than max_epochs")
        return self


class EpochRecord(BaseModel):
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


class MetricsReport(BaseModel):
    """Depth metrics with the usual AbsRel/SqRel/RMSE/RMSElog/δ naming."""
    abs_rel: float = Field(ge=0)
    sq_rel: float = Field(ge=0)
    rmse: float = Field(ge=0)
    rmse_log: float = Field(ge=0)
    delta1: float = Field(ge=0, le=1)
    delta2: float = Field(ge=0, le=1)
    delta3: float = Field(ge=0, le=1)
    n_pixels: int = 0
    n_excluded: int = 0


class TrainingSummary(BaseModel):
    epochs_run: int
    best_epoch: int
    best_val_loss: float
    stopped_early: bool
    stop_reason: Literal["patience", "max_epochs", "target_loss"]
    n_train: int
    n_val: int
    n_test: int
