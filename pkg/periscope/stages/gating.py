"""
Frame gating: decide which frames of a stream are usable for depth
prediction. A frame passes when the eye is open at least as wide as a
threshold learned from the first seconds of the stream and the gaze points
along the camera axis.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterator, Optional, Protocol, Sequence

import numpy as np

from periscope.errors import GateError
from periscope.models.pipeline import Collection, GateConfig

logger = logging.getLogger(__name__)

MIN_CURVE_POINTS = 5

Point = tuple[float, float]


class SegmentationProvider(Protocol):
    """Eye-feature segmentation for a frame, as a headset SDK would report it."""

    def eyelid_outline(self, index: int, frame: Optional[np.ndarray] = None) -> tuple[list[Point], list[Point]]: ...

    def gaze(self, index: int, frame: Optional[np.ndarray] = None) -> tuple[float, float, float]: ...

    def pupil_mask(self, index: int, frame: Optional[np.ndarray] = None) -> np.ndarray: ...


@dataclass
class FrameStream:
    frames: list[np.ndarray]
    fps: int

    def __len__(self) -> int:
        return len(self.frames)


# ── Predicates ────────────────────────────────────────────────


def curve_midpoint_y(points: Sequence[Point]) -> float:
    """Quadratic least-squares fit of y(x), evaluated at the middle of the sampled x range."""
    if len(points) < MIN_CURVE_POINTS:
        raise GateError(f"eyelid curve needs at least {MIN_CURVE_POINTS} points, got {len(points)}")
    pts = np.asarray(points, dtype=np.float64)
    x, y = pts[:, 0], pts[:, 1]
    degree = min(2, len(np.unique(x)) - 1)
    if degree < 1:
        return float(y.mean())
    coeffs = np.polyfit(x, y, degree)
    return float(np.polyval(coeffs, (x.min() + x.max()) / 2))


def openness(top: Sequence[Point], bottom: Sequence[Point]) -> float:
    """Vertical lid separation in pixels; y grows downward so an open eye is positive."""
    return curve_midpoint_y(bottom) - curve_midpoint_y(top)


def gaze_angle_deg(gaze: Sequence[float], axis: Sequence[float]) -> float:
    g = np.asarray(gaze, dtype=np.float64)
    a = np.asarray(axis, dtype=np.float64)
    if abs(np.linalg.norm(g) - 1.0) > 1e-6:
        raise GateError(f"gaze vector is not normalised (|g| = {np.linalg.norm(g):.9f})")
    cos = float(np.clip(g @ a / np.linalg.norm(a), -1.0, 1.0))
    return math.degrees(math.acos(cos))


def is_gaze_straight(gaze: Sequence[float], config: GateConfig) -> bool:
    return gaze_angle_deg(gaze, config.straight_axis) <= config.gaze_epsilon_deg


def frame_openness(provider: SegmentationProvider, stream: FrameStream, index: int) -> float:
    top, bottom = provider.eyelid_outline(index, stream.frames[index])
    return openness(top, bottom)


# ── Operations ────────────────────────────────────────────────


def determine_threshold(stream: FrameStream, provider: SegmentationProvider, config: GateConfig) -> float:
    """τ times the widest opening seen with straight gaze during the calibration window."""
    window = int(round(config.calibration_seconds * stream.fps))
    if len(stream) < window:
        raise GateError(f"stream has {len(stream)} frames, threshold needs {window} ({config.calibration_seconds}s)")
    values = [
        frame_openness(provider, stream, i)
        for i in range(window)
        if is_gaze_straight(provider.gaze(i, stream.frames[i]), config)
    ]
    if not values:
        raise GateError("no frame with straight gaze in the calibration window")
    threshold = config.openness_tolerance * max(values)
    logger.info(
        "Threshold %.3f px from %d straight-gaze frames (max openness %.3f, tau %.2f)",
        threshold, len(values), max(values), config.openness_tolerance,
    )
    return threshold


def frame_passes(
    stream: FrameStream, provider: SegmentationProvider, index: int, threshold: float, config: GateConfig
) -> tuple[bool, bool]:
    """(eye open, gaze straight) for one frame."""
    frame = stream.frames[index]
    is_open = frame_openness(provider, stream, index) >= threshold
    straight = is_gaze_straight(provider.gaze(index, frame), config)
    return is_open, straight


def iter_collections(
    stream: FrameStream,
    provider: SegmentationProvider,
    threshold: float,
    config: GateConfig,
    start: int = 0,
) -> Iterator[Collection]:
    """Yield every full batch of passing frames in stream order; a trailing partial batch is flagged."""
    current = Collection()
    for i in range(start, len(stream)):
        is_open, straight = frame_passes(stream, provider, i, threshold, config)
        if not is_open:
            current.rejected_closed += 1
            continue
        if not straight:
            current.rejected_gaze += 1
            continue
        current.indices.append(i)
        current.frames.append(stream.frames[i])
        if len(current.indices) == config.capacity:
            current.complete = True
            yield current
            current = Collection()
    if current.indices or current.rejected_closed or current.rejected_gaze:
        logger.warning("Stream exhausted with %d of %d frames collected", len(current.indices), config.capacity)
        yield current


def gate_and_collect(
    stream: FrameStream, provider: SegmentationProvider, threshold: float, config: GateConfig
) -> Collection:
    """First collection of `capacity` passing frames; partial with complete=False if the stream runs out."""
    for collection in iter_collections(stream, provider, threshold, config):
        logger.info(
            "Collected %d frames (complete=%s, closed=%d, averted=%d)",
            len(collection.indices), collection.complete,
            collection.rejected_closed, collection.rejected_gaze,
        )
        return collection
    return Collection()
