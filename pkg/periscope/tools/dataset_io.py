"""
On-disk dataset and frame-stream layout.

Dataset directory:
    {id}_img.png      8-bit grayscale (red channel)
    {id}_depth.f32    float32 LE millimetres, row-major
    {id}_meta.json    intrinsics, depth range, full scene spec
    manifest.json     ids, per-sample seeds, split assignment

Stream directory: the same per-frame files plus stream.json.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Optional

import numpy as np
from pydantic import ValidationError

from periscope.errors import DatasetError
from periscope.models.camera import CameraIntrinsics
from periscope.models.scene import FORMAT_VERSION, SamplePair, StreamManifest
from periscope.stages.training import DepthDataset, normalize_depth, normalize_image
from periscope.tools.imaging import downscale, read_f32, read_png, write_f32, write_png

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
STREAM_MANIFEST = "stream.json"


def write_json(path: Path, payload: Any) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path: Path) -> Any:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc


# ── Samples ───────────────────────────────────────────────────


def write_sample(out_dir: Path, sample_id: str, pair: SamplePair) -> None:
    out_dir = Path(out_dir)
    try:
        write_png(out_dir / f"{sample_id}_img.png", pair.image)
        write_f32(out_dir / f"{sample_id}_depth.f32", pair.depth)
        write_json(out_dir / f"{sample_id}_meta.json", pair.meta())
    except OSError as exc:
        raise DatasetError(f"cannot write sample {sample_id} to {out_dir}: {exc}") from exc


def read_sample(data_dir: Path, sample_id: str) -> tuple[np.ndarray, np.ndarray, dict]:
    data_dir = Path(data_dir)
    meta = read_json(data_dir / f"{sample_id}_meta.json")
    if meta.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"sample {sample_id}: unsupported format_version {meta.get('format_version')}")
    image = read_png(data_dir / f"{sample_id}_img.png")
    depth = read_f32(data_dir / f"{sample_id}_depth.f32", image.shape)
    return image, depth, meta


def intrinsics_from_meta(meta: dict) -> CameraIntrinsics:
    res = int(meta["resolution"])
    return CameraIntrinsics(**meta["intrinsics"], width=res, height=res)


def write_manifest(out_dir: Path, manifest: dict) -> None:
    write_json(Path(out_dir) / MANIFEST, manifest)


def read_manifest(data_dir: Path) -> dict:
    manifest = read_json(Path(data_dir) / MANIFEST)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"unsupported manifest format_version {manifest.get('format_version')}")
    return manifest


def load_raw(data_dir: Path, split: Optional[str] = None) -> tuple[list[str], np.ndarray, np.ndarray]:
    """(ids, uint8 images, depths in mm) for the whole dataset or one split."""
    manifest = read_manifest(data_dir)
    ids = manifest["splits"][split] if split else [s["id"] for s in manifest["samples"]]
    if not ids:
        raise DatasetError(f"split {split!r} of {data_dir} is empty")
    images, depths = [], []
    for sample_id in ids:
        image, depth, _ = read_sample(data_dir, sample_id)
        images.append(image)
        depths.append(depth)
    return ids, np.stack(images), np.stack(depths)


def load_dataset(data_dir: Path, resolution: Optional[int] = None) -> DepthDataset:
    """Normalised images/depths with the manifest's partitions, optionally block-downscaled."""
    manifest = read_manifest(data_dir)
    ids, images, depths = load_raw(data_dir)
    images = images.astype(np.float64)
    if resolution is not None and resolution != images.shape[1]:
        images = np.stack([downscale(im, resolution) for im in images])
        depths = np.stack([downscale(d, resolution) for d in depths])
    position = {sample_id: i for i, sample_id in enumerate(ids)}
    partitions = {
        name: [position[sample_id] for sample_id in members]
        for name, members in manifest["splits"].items()
    }
    logger.info("Loaded %d samples from %s at %dpx", len(ids), data_dir, images.shape[1])
    return DepthDataset(
        images=normalize_image(images),
        depths=normalize_depth(depths),
        ids=ids,
        partitions=partitions,
    )


# ── Streams ───────────────────────────────────────────────────


def write_stream(out_dir: Path, manifest: StreamManifest, pairs: list[SamplePair]) -> None:
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create stream directory {out_dir}: {exc}") from exc
    for frame, pair in zip(manifest.frames, pairs):
        write_sample(out_dir, f"{frame.index:05d}", pair)
    write_json(out_dir / STREAM_MANIFEST, manifest.model_dump(mode="json"))


def read_stream(stream_dir: Path) -> tuple[StreamManifest, list[np.ndarray], CameraIntrinsics]:
    stream_dir = Path(stream_dir)
    try:
        manifest = StreamManifest.model_validate(read_json(stream_dir / STREAM_MANIFEST))
    except ValidationError as exc:
        raise DatasetError(f"invalid stream manifest in {stream_dir}: {exc}") from exc
    frames, intrinsics = [], None
    for frame in manifest.frames:
        image, _, meta = read_sample(stream_dir, f"{frame.index:05d}")
        frames.append(image)
        intrinsics = intrinsics or intrinsics_from_meta(meta)
    if intrinsics is None:
        raise DatasetError(f"stream {stream_dir} has no frames")
    return manifest, frames, intrinsics


def read_stream_depths(stream_dir: Path, indices: list[int], shape: tuple[int, int]) -> list[np.ndarray]:
    return [read_f32(Path(stream_dir) / f"{i:05d}_depth.f32", shape) for i in indices]
