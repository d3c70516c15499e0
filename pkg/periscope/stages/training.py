"""
Training: BerHu loss, optimizer, dataset splitting, the epoch loop with
early stopping, and depth evaluation metrics.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from periscope.errors import DatasetError, GradientError, ShapeError
from periscope.models.scene import D_MAX_MM, D_MIN_MM
from periscope.models.training import EpochRecord, MetricsReport, TrainConfig, TrainingSummary
from periscope.stages.network import DepthNet
from periscope.tools.tensor_core import Function, Tensor

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


# ── Depth normalisation ───────────────────────────────────────


def normalize_depth(depth_mm: np.ndarray) -> np.ndarray:
    return np.clip((depth_mm - D_MIN_MM) / (D_MAX_MM - D_MIN_MM), 0.0, 1.0)


def denormalize_depth(depth_norm: np.ndarray) -> np.ndarray:
    return D_MIN_MM + np.asarray(depth_norm) * (D_MAX_MM - D_MIN_MM)


def normalize_image(image: np.ndarray) -> np.ndarray:
    return np.asarray(image, dtype=np.float64) / 255.0


# ── BerHu loss ────────────────────────────────────────────────


class BerHu(Function):
    """Reverse Huber loss, mean over elements; the threshold c is a constant."""

    def forward(self, pred, target, fraction: float, c: Optional[float]):
        x = pred - target
        ax = np.abs(x)
        self.count = x.size
        peak = float(ax.max()) if x.size else 0.0
        if c is None:
            c = fraction * peak
        if peak == 0.0:
            self.slope = np.zeros_like(x)
            return np.asarray(0.0)
        if c <= 0:
            raise ShapeError(f"BerHu threshold must be positive, got {c}")
        self.c = c
        inside = ax <= c
        self.slope = np.where(inside, np.sign(x), x / c)
        return np.asarray(np.where(inside, ax, (x * x + c * c) / (2 * c)).mean())

    def backward(self, grad):
        g = grad * self.slope / self.count
        return g, -g


def berhu_loss(pred: Tensor, target: Tensor, fraction: float = 0.24, c: Optional[float] = None) -> Tensor:
    """BerHu with c = fraction * max|pred - target| unless `c` is pinned."""
    if pred.shape != target.shape:
        raise ShapeError(f"berhu_loss shape mismatch: {pred.shape} vs {target.shape}")
    if not 0 < fraction <= 1:
        raise ShapeError(f"berhu fraction must be in (0, 1], got {fraction}")
    return BerHu.apply(pred, target, fraction=fraction, c=c)


# ── Optimizer ─────────────────────────────────────────────────


@dataclass
class OptimizerState:
    mode: str = "adam"
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def optimizer_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: OptimizerState,
    lr: float,
) -> None:
    """One in-place update; Adam (0.9/0.999/1e-8) or plain gradient descent."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise ShapeError(f"gradient shape {np.shape(g)} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise GradientError("non-finite gradient encountered")

    if state.mode == "sgd":
        for p, g in zip(params, grads):
            p.data = p.data - lr * g
        return

    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    bias1 = 1.0 - ADAM_BETA1 ** state.step
    bias2 = 1.0 - ADAM_BETA2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g
        m_hat = state.m[i] / bias1
        v_hat = state.v[i] / bias2
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


# ── Dataset ───────────────────────────────────────────────────


def split_counts(n: int, split: Sequence[float] = (0.70, 0.15, 0.15)) -> tuple[int, int, int]:
    """floor for train and val, remainder to test (10 -> 7/1/2)."""
    n_train = math.floor(split[0] * n + 1e-9)
    n_val = math.floor(split[1] * n + 1e-9)
    return n_train, n_val, n - n_train - n_val


def split_indices(n: int, seed: int, split: Sequence[float] = (0.70, 0.15, 0.15)) -> dict[str, list[int]]:
    order = np.random.default_rng(seed).permutation(n)
    n_train, n_val, _ = split_counts(n, split)
    return {
        "train": sorted(int(i) for i in order[:n_train]),
        "val": sorted(int(i) for i in order[n_train:n_train + n_val]),
        "test": sorted(int(i) for i in order[n_train + n_val:]),
    }


@dataclass
class DepthDataset:
    """Normalised images and depths, with named partitions."""

    images: np.ndarray                   # (n, R, R) float in [0, 1]
    depths: np.ndarray                   # (n, R, R) normalised depth
    ids: list[str]
    partitions: dict[str, list[int]]

    def subset(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.partitions.get(name, [])
        return self.images[idx], self.depths[idx]


# ── Training loop ─────────────────────────────────────────────


def _batches(n: int, batch_size: int, order: np.ndarray):
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def validation_loss(model: DepthNet, images: np.ndarray, depths: np.ndarray, config: TrainConfig) -> float:
    total, count = 0.0, 0
    for idx in _batches(len(images), config.batch_size, np.arange(len(images))):
        pred = model.forward(Tensor(images[idx, None]), training=False)
        loss = berhu_loss(pred, Tensor(depths[idx, None]), config.berhu_fraction)
        total += loss.item() * len(idx)
        count += len(idx)
    return total / count


def train(
    model: DepthNet,
    dataset: DepthDataset,
    config: TrainConfig,
    history_path: Optional[Path] = None,
) -> tuple[list[EpochRecord], TrainingSummary]:
    """
    Fit `model` on the train partition, early-stopping on validation BerHu.
    On return the model holds the best-validation weights.
    """
    x_train, y_train = dataset.subset("train")
    x_val, y_val = dataset.subset("val")
    n_test = len(dataset.partitions.get("test", []))
    if len(x_train) == 0 or len(x_val) == 0:
        raise DatasetError(f"empty partition: train={len(x_train)}, val={len(x_val)}")

    rng = np.random.default_rng(config.seed)
    opt = OptimizerState(mode=config.optimizer)
    params = model.parameters()
    history: list[EpochRecord] = []
    best_val, best_epoch, best_state = math.inf, 0, model.state()
    waited = 0
    stop_reason = "max_epochs"
    started = time.time()

    if history_path is not None:
        history_path = Path(history_path)
        history_path.parent.mkdir(parents=True, exist_ok=True)
        history_path.write_text("")

    logger.info("=== TRAINING: %d train / %d val / %d test ===", len(x_train), len(x_val), n_test)
    for epoch in range(1, config.max_epochs + 1):
        losses: list[float] = []
        for idx in _batches(len(x_train), config.batch_size, rng.permutation(len(x_train))):
            pred = model.forward(Tensor(x_train[idx, None]), training=True, rng=rng)
            loss = berhu_loss(pred, Tensor(y_train[idx, None]), config.berhu_fraction)
            model.zero_grad()
            loss.backward()
            try:
                optimizer_step(params, [p.grad for p in params], opt, config.lr)
            except GradientError as exc:
                logger.error("Epoch %d aborted after %d batches: %s", epoch, len(losses), exc)
                break
            losses.append(loss.item())

        train_loss = float(np.mean(losses)) if losses else math.nan
        val_loss = validation_loss(model, x_val, y_val, config)
        record = EpochRecord(epoch=epoch, train_loss=train_loss, val_loss=val_loss, lr=config.lr)
        history.append(record)
        if history_path is not None:
            with history_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(record.model_dump()) + "\n")
        logger.info("Epoch %d: train=%.6f val=%.6f", epoch, train_loss, val_loss)

        if val_loss < best_val:
            best_val, best_epoch, best_state = val_loss, epoch, model.state()
            waited = 0
        else:
            waited += 1

        if config.target_train_loss is not None and train_loss < config.target_train_loss:
            stop_reason = "target_loss"
            break
        if config.patience > 0 and waited >= config.patience:
            stop_reason = "patience"
            break

    model.load_state(best_state)
    summary = TrainingSummary(
        epochs_run=len(history),
        best_epoch=best_epoch,
        best_val_loss=best_val,
        stopped_early=stop_reason != "max_epochs",
        stop_reason=stop_reason,
        n_train=len(x_train),
        n_val=len(x_val),
        n_test=n_test,
    )
    logger.info(
        "Training complete in %.1fs: %d epochs, best val %.6f at epoch %d (%s)",
        time.time() - started, summary.epochs_run, best_val, best_epoch, stop_reason,
    )
    return history, summary


# ── Evaluation ────────────────────────────────────────────────


def evaluate(pred_maps: np.ndarray, gt_maps: np.ndarray) -> MetricsReport:
    """AbsRel, SqRel, RMSE, RMSElog and δ<1.25^k over pixels with positive ground truth."""
    pred = np.asarray(pred_maps, dtype=np.float64)
    gt = np.asarray(gt_maps, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    valid = np.isfinite(gt) & (gt > 0)
    n_excluded = int(gt.size - valid.sum())
    if not valid.any():
        raise ShapeError("no pixel with positive ground truth to evaluate")
    p = np.maximum(pred[valid], 1e-9)
    g = gt[valid]

    thresh = np.maximum(p / g, g / p)
    diff = p - g
    report = MetricsReport(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff ** 2 / g)),
        rmse=float(np.sqrt(np.mean(diff ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        delta1=float(np.mean(thresh < 1.25)),
        delta2=float(np.mean(thresh < 1.25 ** 2)),
        delta3=float(np.mean(thresh < 1.25 ** 3)),
        n_pixels=int(valid.sum()),
        n_excluded=n_excluded,
    )
    if n_excluded:
        logger.warning("Excluded %d pixels with non-positive ground truth", n_excluded)
    return report
