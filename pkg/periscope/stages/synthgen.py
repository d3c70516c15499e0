"""
Procedural periocular scene renderer.

Each pixel casts a pinhole ray against three surfaces and keeps the nearest:
  - the eyeball sphere, visible only inside the eyelid opening;
  - the eyelid shell, a slightly larger sphere visible only outside it;
  - a smooth skin heightfield with brow and cheekbone ridges.
The pupil is a spherical cap on the eyeball whose rim has the specified
metric diameter. Shading is Lambertian from a single point light with
inverse-square falloff, quantised to 8 bits, plus seeded Gaussian noise.

Rays use unnormalised directions with unit camera-Z component, so the ray
parameter at a hit equals the camera-frame depth.
"""

from __future__ import annotations

import logging
import math
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from periscope.errors import DatasetError, RenderError
from periscope.models.camera import CameraIntrinsics
from periscope.models.scene import (
    D_MAX_MM,
    D_MIN_MM,
    EyeballSpec,
    EyelidSpec,
    GroundTruthSegmentation,
    PupilSpec,
    SamplePair,
    SceneSpec,
    SkinSpec,
    StreamFrame,
)
from periscope.stages.measurement import project
from periscope.stages.training import split_indices
from periscope.tools import dataset_io

logger = logging.getLogger(__name__)

SKIN, LID, EYEBALL = 0, 1, 2

SCLERA_ALBEDO = 0.85
IRIS_ALBEDO = 0.35
PUPIL_ALBEDO = 0.04

SKIN_ITERATIONS = 30
LID_SAMPLES = 9


# ── Ray casting ───────────────────────────────────────────────


@dataclass
class SceneHits:
    depth: np.ndarray        # (R, R) mm
    surface: np.ndarray      # (R, R) SKIN / LID / EYEBALL
    points: np.ndarray       # (R, R, 3) hit points, scene frame
    pupil: np.ndarray        # (R, R) bool
    iris: np.ndarray         # (R, R) bool
    eye_rel: np.ndarray      # (R, R, 2) hit X/Y relative to the eye centre
    origin: np.ndarray
    rotation: np.ndarray
    intrinsics: CameraIntrinsics


def camera_rays(intrinsics: CameraIntrinsics, rotation: np.ndarray) -> np.ndarray:
    """Scene-frame ray directions (H, W, 3) with unit camera-Z component."""
    xs = (np.arange(intrinsics.width, dtype=np.float64) - intrinsics.cx) / intrinsics.fx
    ys = (np.arange(intrinsics.height, dtype=np.float64) - intrinsics.cy) / intrinsics.fy
    d_cam = np.stack(np.broadcast_arrays(xs[None, :], ys[:, None], np.ones((1, 1))), axis=-1)
    return d_cam @ rotation.T


def sphere_hit(origin: np.ndarray, dirs: np.ndarray, center: np.ndarray, radius: float) -> np.ndarray:
    """Nearest ray parameter of the sphere intersection, NaN on a miss."""
    oc = origin - center
    a = np.einsum("...k,...k->...", dirs, dirs)
    b = 2.0 * (dirs @ oc)
    c = float(oc @ oc) - radius * radius
    disc = b * b - 4.0 * a * c
    t = (-b - np.sqrt(np.maximum(disc, 0.0))) / (2.0 * a)
    return np.where((disc >= 0) & (t > 0), t, np.nan)


def skin_height(skin: SkinSpec, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    brow = skin.brow_amplitude_mm * np.exp(-((y - skin.brow_center_y_mm) ** 2) / (2 * skin.brow_width_mm ** 2))
    cheek = skin.cheek_amplitude_mm * np.exp(-((y - skin.cheek_center_y_mm) ** 2) / (2 * skin.cheek_width_mm ** 2))
    return skin.base_depth_mm + skin.curvature_per_mm * (x * x + y * y) - brow - cheek


def skin_gradient(skin: SkinSpec, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    brow = skin.brow_amplitude_mm * np.exp(-((y - skin.brow_center_y_mm) ** 2) / (2 * skin.brow_width_mm ** 2))
    cheek = skin.cheek_amplitude_mm * np.exp(-((y - skin.cheek_center_y_mm) ** 2) / (2 * skin.cheek_width_mm ** 2))
    hx = 2 * skin.curvature_per_mm * x
    hy = (
        2 * skin.curvature_per_mm * y
        + brow * (y - skin.brow_center_y_mm) / skin.brow_width_mm ** 2
        + cheek * (y - skin.cheek_center_y_mm) / skin.cheek_width_mm ** 2
    )
    return hx, hy


def _skin_hit(skin: SkinSpec, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    # fixed point of t = (h(o + tD) - o_z) / D_z
    t = (skin.base_depth_mm - origin[2]) / dirs[..., 2]
    for _ in range(SKIN_ITERATIONS):
        px = origin[0] + t * dirs[..., 0]
        py = origin[1] + t * dirs[..., 1]
        t = (skin_height(skin, px, py) - origin[2]) / dirs[..., 2]
    px = origin[0] + t * dirs[..., 0]
    py = origin[1] + t * dirs[..., 1]
    residual = np.abs(origin[2] + t * dirs[..., 2] - skin_height(skin, px, py))
    if not np.all(np.isfinite(t)) or residual.max() > 1e-6:
        raise RenderError("skin heightfield has no stable intersection for every ray; reduce its curvature")
    return t


def lid_opening(eyelids: EyelidSpec, x_rel: np.ndarray, y_rel: np.ndarray) -> np.ndarray:
    half = eyelids.aperture_mm / 2
    k = eyelids.curvature_per_mm
    return (y_rel > -half + k * x_rel ** 2) & (y_rel < half - k * x_rel ** 2)


def trace(spec: SceneSpec, resolution: int) -> SceneHits:
    """Geometry pass: depth, surface labels and pupil/iris regions per pixel."""
    intr = spec.camera.scaled(resolution)
    rotation = np.array(spec.pose.rotation())
    origin = np.array(spec.pose.translation_mm, dtype=np.float64)
    dirs = camera_rays(intr, rotation)
    center = np.array(spec.eyeball.center_mm, dtype=np.float64)
    radius = spec.eyeball.radius_mm

    def rel(t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        pts = origin + t[..., None] * dirs
        return pts[..., 0] - center[0], pts[..., 1] - center[1]

    t_eye = sphere_hit(origin, dirs, center, radius)
    eye_visible = np.isfinite(t_eye) & lid_opening(spec.eyelids, *rel(np.nan_to_num(t_eye)))
    t_eye = np.where(eye_visible, t_eye, np.inf)

    t_lid = np.full(dirs.shape[:2], np.inf)
    if spec.eyelids.thickness_mm > 0:
        t_shell = sphere_hit(origin, dirs, center, radius + spec.eyelids.thickness_mm)
        shell_visible = np.isfinite(t_shell) & ~lid_opening(spec.eyelids, *rel(np.nan_to_num(t_shell)))
        t_lid = np.where(shell_visible, t_shell, np.inf)

    t_skin = _skin_hit(spec.skin, origin, dirs)

    stacked = np.stack([t_skin, t_lid, t_eye])
    surface = np.argmin(stacked, axis=0)
    depth = np.take_along_axis(stacked, surface[None], axis=0)[0]
    if depth.min() < D_MIN_MM or depth.max() > D_MAX_MM:
        raise RenderError(
            f"scene depths span [{depth.min():.2f}, {depth.max():.2f}] mm, outside [{D_MIN_MM}, {D_MAX_MM}]"
        )

    points = origin + depth[..., None] * dirs
    on_eye = surface == EYEBALL
    unit = (points - center) / radius
    cos_gaze = unit @ np.array(spec.pupil.gaze)
    pupil_cos = math.cos(math.asin(min(1.0, spec.pupil.diameter_mm / (2 * radius))))
    iris_cos = math.cos(math.asin(min(1.0, spec.eyeball.iris_diameter_mm / (2 * radius))))
    eye_rel = np.stack([points[..., 0] - center[0], points[..., 1] - center[1]], axis=-1)
    return SceneHits(
        depth=depth,
        surface=surface,
        points=points,
        pupil=on_eye & (cos_gaze >= pupil_cos),
        iris=on_eye & (cos_gaze >= iris_cos),
        eye_rel=eye_rel,
        origin=origin,
        rotation=rotation,
        intrinsics=intr,
    )


# ── Shading ───────────────────────────────────────────────────


def shade(spec: SceneSpec, hits: SceneHits) -> np.ndarray:
    """Noiseless radiance before quantisation."""
    center = np.array(spec.eyeball.center_mm)
    pts = hits.points
    normals = np.empty_like(pts)

    on_skin = hits.surface == SKIN
    hx, hy = skin_gradient(spec.skin, pts[..., 0], pts[..., 1])
    skin_n = np.stack([hx, hy, -np.ones_like(hx)], axis=-1)
    normals[on_skin] = skin_n[on_skin]
    on_sphere = ~on_skin
    normals[on_sphere] = pts[on_sphere] - center
    normals /= np.linalg.norm(normals, axis=-1, keepdims=True)

    albedo = np.full(hits.depth.shape, spec.albedo)
    albedo[hits.surface == EYEBALL] = SCLERA_ALBEDO
    albedo[hits.iris] = IRIS_ALBEDO
    albedo[hits.pupil] = PUPIL_ALBEDO

    to_light = np.array(spec.light_position_mm) - pts
    dist2 = np.einsum("...k,...k->...", to_light, to_light)
    lambert = np.maximum(0.0, np.einsum("...k,...k->...", normals, to_light) / np.sqrt(dist2))
    return albedo * lambert / dist2 * spec.theta_light


def quantize(signal: np.ndarray, theta_noise: float, seed: int) -> np.ndarray:
    """8-bit quantisation, then seeded Gaussian noise, clamped to [0, 255]."""
    q = np.clip(np.rint(signal), 0, 255)
    noise = np.random.default_rng(seed).standard_normal(signal.shape)
    return np.clip(np.rint(q + theta_noise * noise), 0, 255).astype(np.uint8)


def render(spec: SceneSpec, resolution: int = 256) -> SamplePair:
    """Render the red-channel image and millimetre depth map of one scene."""
    hits = trace(spec, resolution)
    image = quantize(shade(spec, hits), spec.theta_noise, spec.seed)
    return SamplePair(image=image, depth=hits.depth, spec=spec, intrinsics=hits.intrinsics)


# ── Ground-truth segmentation ─────────────────────────────────


def _project_scene(hits: SceneHits, points: np.ndarray) -> np.ndarray:
    cam = (points - hits.origin) @ hits.rotation
    return project(hits.intrinsics, cam)


def lid_curves(spec: SceneSpec, hits: SceneHits) -> tuple[list[tuple[float, float]], list[tuple[float, float]]]:
    """Top and bottom lid margins sampled across the eye, in image coordinates."""
    center = np.array(spec.eyeball.center_mm)
    r = spec.eyeball.radius_mm
    half = spec.eyelids.aperture_mm / 2
    k = spec.eyelids.curvature_per_mm
    xs = np.linspace(-0.75 * r, 0.75 * r, LID_SAMPLES)
    # margins meet at eye-centre height where the parabolas cross
    top_y = np.minimum(-half + k * xs ** 2, 0.0)
    bottom_y = np.maximum(half - k * xs ** 2, 0.0)

    def on_sphere(ys: np.ndarray) -> np.ndarray:
        z = -np.sqrt(np.maximum(r * r - xs ** 2 - ys ** 2, 0.0))
        return center + np.stack([xs, ys, z], axis=-1)

    top = _project_scene(hits, on_sphere(top_y))
    bottom = _project_scene(hits, on_sphere(bottom_y))
    return [tuple(map(float, p)) for p in top], [tuple(map(float, p)) for p in bottom]


def region_masks(spec: SceneSpec, hits: SceneHits) -> dict[str, np.ndarray]:
    """Exposed eyeball, infraorbital margin and zygomatic masks for region-wise error reports."""
    x_rel, y_rel = hits.eye_rel[..., 0], hits.eye_rel[..., 1]
    half = spec.eyelids.aperture_mm / 2
    r = spec.eyeball.radius_mm
    not_eye = hits.surface != EYEBALL
    return {
        "exposed_eyeball": hits.surface == EYEBALL,
        "infraorbital_margin": not_eye & (y_rel >= half) & (y_rel < half + 8) & (np.abs(x_rel) < r + 2),
        "zygomatic": not_eye & (y_rel >= half + 8) & (y_rel < half + 20) & (np.abs(x_rel) < r + 8),
    }


def ground_truth_segmentation(spec: SceneSpec, resolution: int = 256) -> GroundTruthSegmentation:
    hits = trace(spec, resolution)
    top, bottom = lid_curves(spec, hits)
    return GroundTruthSegmentation(
        pupil_mask=hits.pupil,
        eyeball_mask=hits.surface == EYEBALL,
        top_lid=top,
        bottom_lid=bottom,
        gaze=spec.pupil.gaze,
        region_masks=region_masks(spec, hits),
    )


# ── Scene sampling and datasets ───────────────────────────────


def gaze_vector(yaw_deg: float, pitch_deg: float) -> tuple[float, float, float]:
    """Unit gaze towards the camera, rotated by yaw (about Y) and pitch (about X)."""
    yaw, pitch = math.radians(yaw_deg), math.radians(pitch_deg)
    return (math.sin(yaw) * math.cos(pitch), math.sin(pitch), -math.cos(yaw) * math.cos(pitch))


def sample_scene(seed: int) -> SceneSpec:
    """Random scene within the generator's anatomical and photometric ranges."""
    rng = np.random.default_rng(seed)

    def u(lo: float, hi: float) -> float:
        return float(rng.uniform(lo, hi))

    return SceneSpec(
        seed=int(seed),
        eyeball=EyeballSpec(center_mm=(u(-2, 2), u(-2, 2), u(49, 53)), radius_mm=u(11.5, 12.5)),
        pupil=PupilSpec(diameter_mm=u(2.5, 7.0), gaze=gaze_vector(u(-8, 8), u(-8, 8))),
        eyelids=EyelidSpec(aperture_mm=u(6, 12), curvature_per_mm=u(0.025, 0.04)),
        skin=SkinSpec(
            base_depth_mm=u(44, 50),
            curvature_per_mm=u(0.003, 0.006),
            brow_amplitude_mm=u(2, 5),
            brow_center_y_mm=u(-18, -14),
            cheek_amplitude_mm=u(1.5, 4),
            cheek_center_y_mm=u(15, 19),
        ),
        theta_light=u(3.0e5, 5.0e5),
        theta_noise=u(0.0, 4.0),
        albedo=u(0.2, 0.9),
    )


def generate_dataset(n: int, seed: int, resolution: int, out_dir: Path) -> dict:
    """Render `n` random scenes and write them with a split manifest."""
    if n < 10:
        raise DatasetError(f"a dataset needs at least 10 samples, got {n}")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create dataset directory {out_dir}: {exc}") from exc

    started = time.time()
    sample_seeds = np.random.default_rng(seed).integers(0, 2 ** 31 - 1, size=n)
    splits = split_indices(n, seed)
    split_of = {i: name for name, idx in splits.items() for i in idx}
    samples = []
    for i, sample_seed in enumerate(sample_seeds):
        sample_id = f"{i:05d}"
        pair = render(sample_scene(int(sample_seed)), resolution)
        dataset_io.write_sample(out_dir, sample_id, pair)
        samples.append({"id": sample_id, "seed": int(sample_seed), "split": split_of[i]})

    manifest = {
        "format_version": dataset_io.FORMAT_VERSION,
        "n": n,
        "seed": seed,
        "resolution": resolution,
        "samples": samples,
        "splits": {name: [f"{i:05d}" for i in idx] for name, idx in splits.items()},
    }
    dataset_io.write_manifest(out_dir, manifest)
    logger.info(
        "Generated %d samples at %dpx in %.1fs (%d/%d/%d)",
        n, resolution, time.time() - started,
        len(splits["train"]), len(splits["val"]), len(splits["test"]),
    )
    return manifest


# ── Frame streams ─────────────────────────────────────────────


BLINK_PROFILE = (0.5, 0.1, 0.0, 0.1, 0.5)


def synthesize_stream(
    base: SceneSpec,
    n_frames: int,
    fps: int,
    seed: int = 0,
    blink_every_s: float = 2.5,
    gaze_sweep_deg: float = 10.0,
    sweep_period_s: float = 4.0,
) -> list[StreamFrame]:
    """Frame specs with a sinusoidal horizontal gaze sweep and periodic blinks."""
    frames = []
    blink_every = max(1, int(round(blink_every_s * fps)))
    for i in range(n_frames):
        angle = gaze_sweep_deg * math.sin(2 * math.pi * i / (sweep_period_s * fps))
        phase = i % blink_every - (blink_every - len(BLINK_PROFILE))
        blink = 0 <= phase < len(BLINK_PROFILE)
        aperture = base.eyelids.aperture_mm * (BLINK_PROFILE[phase] if blink else 1.0)
        spec = base.model_copy(update={
            "seed": seed + i,
            "pupil": base.pupil.model_copy(update={"gaze": gaze_vector(angle, 0.0)}),
            "eyelids": base.eyelids.model_copy(update={"aperture_mm": aperture}),
        })
        frames.append(StreamFrame(index=i, spec=spec, blink=blink, gaze_angle_deg=angle))
    return frames


class SyntheticProvider:
    """Segmentation provider answering from the scene spec behind each frame."""

    def __init__(self, frames: list[StreamFrame], resolution: int):
        self._specs = {f.index: f.spec for f in frames}
        self.resolution = resolution
        self._cache: dict[int, GroundTruthSegmentation] = {}
        self._lock = threading.Lock()

    def _segmentation(self, index: int) -> GroundTruthSegmentation:
        with self._lock:
            cached = self._cache.get(index)
        if cached is not None:
            return cached
        seg = ground_truth_segmentation(self._specs[index], self.resolution)
        with self._lock:
            self._cache[index] = seg
        return seg

    def eyelid_outline(self, index: int, frame: Optional[np.ndarray] = None):
        seg = self._segmentation(index)
        return seg.top_lid, seg.bottom_lid

    def gaze(self, index: int, frame: Optional[np.ndarray] = None) -> tuple[float, float, float]:
        return self._specs[index].pupil.gaze

    def pupil_mask(self, index: int, frame: Optional[np.ndarray] = None) -> np.ndarray:
        return self._segmentation(index).pupil_mask

    def region_masks(self, index: int) -> dict[str, np.ndarray]:
        return self._segmentation(index).region_masks

    def spec(self, index: int) -> SceneSpec:
        return self._specs[index]
