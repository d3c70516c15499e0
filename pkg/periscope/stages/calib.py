"""
Scene-parameter calibration.

Images are compared by block-averaged intensity, which cancels most
per-pixel noise. (theta_noise, theta_light) are tuned by gradient descent
on that score, with the gradient taken by central finite differences of
the renderer. The noise pattern is frozen to the spec's seed so the score
is a deterministic function of the parameters.
"""

from __future__ import annotations

import csv
import logging
import time
from pathlib import Path

import numpy as np

from periscope.errors import CalibrationError, ShapeError
from periscope.models.calib import CalibConfig, CalibResult, CalibStep
from periscope.models.scene import SceneSpec
from periscope.stages.synthgen import quantize, shade, trace

logger = logging.getLogger(__name__)


# ── Block scores ──────────────────────────────────────────────


def block_averages(image: np.ndarray, n: int) -> np.ndarray:
    """Mean of each cell of an n x n grid, row-major."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeError(f"block_averages expects a 2-D image, got shape {img.shape}")
    h, w = img.shape
    if n < 1 or h % n or w % n:
        raise ShapeError(f"image {h}x{w} is not divisible into a {n}x{n} grid")
    return img.reshape(n, h // n, n, w // n).mean(axis=(1, 3)).ravel()


def block_errors(real: np.ndarray, synth: np.ndarray, n: int) -> np.ndarray:
    if np.shape(real) != np.shape(synth):
        raise ShapeError(f"image shapes differ: {np.shape(real)} vs {np.shape(synth)}")
    return np.abs(block_averages(real, n) - block_averages(synth, n))


def mae_total(real: np.ndarray, synth: np.ndarray, n: int) -> float:
    """Mean absolute difference of block averages, in pixel-value units."""
    return float(block_errors(real, synth, n).mean())


# ── Calibration ───────────────────────────────────────────────


class _FrozenRenderer:
    """Re-renders one scene for new (theta_noise, theta_light) without re-tracing geometry."""

    def __init__(self, spec: SceneSpec, resolution: int):
        self.seed = spec.seed
        hits = trace(spec, resolution)
        self.unit_signal = shade(spec.model_copy(update={"theta_light": 1.0}), hits)

    def image(self, theta_noise: float, theta_light: float) -> np.ndarray:
        return quantize(self.unit_signal * theta_light, theta_noise, self.seed)


def calibrate(target: np.ndarray, spec0: SceneSpec, config: CalibConfig) -> CalibResult:
    """
    Descend on L(θ) = mae_total(target, render(θ)) in scale-normalised
    coordinates. α halves whenever a step raises L; `divergence_steps`
    consecutive rises stop the run. The best parameters seen are returned.
    """
    target = np.asarray(target, dtype=np.float64)
    if target.ndim != 2 or target.shape[0] != target.shape[1]:
        raise ShapeError(f"calibration target must be a square 2-D image, got {target.shape}")
    block_averages(target, config.block_grid)

    resolution = target.shape[0]
    renderer = _FrozenRenderer(spec0, resolution)
    scale = np.array([max(spec0.theta_noise, 1.0), max(spec0.theta_light, 1.0)])
    loss_norm = max(float(target.mean()), 1.0)

    def loss(phi: np.ndarray) -> float:
        noise, light = np.maximum(phi * scale, 0.0)
        return mae_total(target, renderer.image(noise, light), config.block_grid)

    phi = np.array([spec0.theta_noise, spec0.theta_light]) / scale
    alpha = config.alpha
    h = config.fd_step
    trace_steps: list[CalibStep] = []
    best_loss, best_phi = np.inf, phi.copy()
    previous = None
    rises = 0
    converged = diverged = False
    started = time.time()

    logger.info("=== CALIBRATION: %dx%d target, %d blocks ===", resolution, resolution, config.block_grid ** 2)
    for step in range(config.max_steps):
        current = loss(phi)
        noise, light = phi * scale
        trace_steps.append(CalibStep(step=step, theta_noise=noise, theta_light=light, mae_total=current))
        if current < best_loss:
            best_loss, best_phi = current, phi.copy()
        if previous is not None and current > previous:
            rises += 1
            alpha /= 2
        else:
            rises = 0
        if current < config.mae_threshold:
            converged = True
            break
        if rises >= config.divergence_steps:
            diverged = True
            logger.warning("Calibration diverged: loss rose for %d consecutive steps", rises)
            break

        grad = np.zeros(2)
        for i in range(2):
            step = np.zeros(2)
            step[i] = h
            grad[i] = (loss(phi + step) - loss(phi - step)) / (2 * h) / loss_norm
        if not np.all(np.isfinite(grad)):
            raise CalibrationError(f"non-finite calibration gradient at step {step}")
        phi = np.maximum(phi - alpha * grad, 0.0)
        previous = current

    noise, light = best_phi * scale
    spec = spec0.model_copy(update={"theta_noise": float(noise), "theta_light": float(light)})
    errors = block_errors(target, renderer.image(noise, light), config.block_grid)
    logger.info(
        "Calibration %s after %d steps in %.1fs: mae_total=%.4f theta_noise=%.4f theta_light=%.1f",
        "converged" if converged else ("diverged" if diverged else "stopped"),
        len(trace_steps), time.time() - started, best_loss, noise, light,
    )
    return CalibResult(
        spec=spec,
        trace=trace_steps,
        converged=converged,
        diverged=diverged,
        mae_total=float(errors.mean()),
        max_block_error=float(errors.max()),
    )


def write_trace_csv(path: Path, trace_steps: list[CalibStep]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "theta_noise", "theta_light", "mae_total"])
        for s in trace_steps:
            writer.writerow([s.step, repr(s.theta_noise), repr(s.theta_light), repr(s.mae_total)])
