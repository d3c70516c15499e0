"""
Measurement orchestrator: gate a frame stream, predict depth for the
collected frames, fuse the maps and measure the pupil in millimetres.

Stages run in order, each logged with a banner. There is no fallback
output: a failed stage is logged and re-raised.
"""

from __future__ import annotations

import logging
import time
from typing import Callable, Optional, Sequence

import numpy as np

from periscope.errors import GateError
from periscope.models.camera import CameraIntrinsics
from periscope.models.pipeline import GateConfig, MeasurementReport
from periscope.models.scene import FORMAT_VERSION
from periscope.stages.aggregation import aggregate_depths
from periscope.stages.gating import FrameStream, SegmentationProvider, determine_threshold, iter_collections
from periscope.stages.measurement import measure_pupil, region_mae
from periscope.stages.training import denormalize_depth, normalize_image

logger = logging.getLogger(__name__)

# (uint8 frames (n, R, R), stream indices) -> depth in mm (n, R, R)
PredictFn = Callable[[np.ndarray, Sequence[int]], np.ndarray]


def model_predictor(model, batch_size: int = 4) -> PredictFn:
    """Wrap a DepthNet as a frames-to-millimetres predictor."""

    def predict(frames: np.ndarray, indices: Sequence[int]) -> np.ndarray:
        return denormalize_depth(model.predict(normalize_image(frames), batch_size=batch_size))

    return predict


def run_measurement(
    stream: FrameStream,
    provider: SegmentationProvider,
    intrinsics: CameraIntrinsics,
    predict_fn: PredictFn,
    config: Optional[GateConfig] = None,
    gt_depths: Optional[Callable[[Sequence[int]], list[np.ndarray]]] = None,
    region_masks: Optional[Callable[[int], dict[str, np.ndarray]]] = None,
) -> MeasurementReport:
    """
    Threshold, then collect-predict-aggregate over every full batch of the
    stream; the last full batch's aggregate is measured. `gt_depths` maps
    frame indices to ground-truth depth and enables per-region error.
    """
    config = config or GateConfig()
    started = time.time()

    logger.info("=== STAGE 1: Threshold ===")
    threshold = determine_threshold(stream, provider, config)

    logger.info("=== STAGE 2: Collect / Predict / Aggregate ===")
    window = int(round(config.calibration_seconds * stream.fps))
    last = None
    rounds = 0
    for collection in iter_collections(stream, provider, threshold, config, start=window):
        if not collection.complete:
            break
        rounds += 1
        predicted = predict_fn(np.stack(collection.frames), collection.indices)
        fused = aggregate_depths(list(predicted), config)
        logger.info(
            "Round %d: frames %s, %d outlier samples excluded",
            rounds, collection.indices, fused.n_outliers_excluded,
        )
        last = (collection, fused)
    if last is None:
        raise GateError(
            f"no complete collection of {config.capacity} frames after the {window}-frame calibration window"
        )
    collection, fused = last

    logger.info("=== STAGE 3: Measure ===")
    anchor = collection.indices[-1]
    mask = provider.pupil_mask(anchor, stream.frames[anchor])
    try:
        pupil = measure_pupil(fused.depth, mask, intrinsics)
    except Exception as exc:
        logger.error("Pupil measurement failed on frame %d: %s", anchor, exc, exc_info=True)
        raise

    per_region = None
    if gt_depths is not None:
        gt = np.mean(np.stack(gt_depths(collection.indices)), axis=0)
        masks = region_masks(anchor) if region_masks is not None else {}
        per_region = region_mae(fused.depth, gt, masks)

    report = MeasurementReport(
        diameter_mm=pupil.diameter_mm,
        fit_rms_mm=pupil.fit_rms_mm,
        n_boundary_points=pupil.n_boundary_points,
        n_maps_used=fused.n_maps,
        n_outliers_excluded=fused.n_outliers_excluded,
        threshold_px=threshold,
        per_region_mae=per_region,
        format_version=FORMAT_VERSION,
    )
    logger.info(
        "Measurement complete in %.1fs: diameter=%.3f mm over %d rounds",
        time.time() - started, report.diameter_mm, rounds,
    )
    return report
