"""
Image and raw depth file I/O.
PNG through Pillow; depth maps as raw little-endian float32, row-major.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from periscope.errors import DatasetError
from periscope.models.scene import D_MAX_MM, D_MIN_MM


def write_png(path: Path, image: np.ndarray) -> None:
    arr = np.asarray(image)
    if arr.dtype != np.uint8 or arr.ndim != 2:
        raise DatasetError(f"PNG output expects a 2-D uint8 array, got {arr.dtype} {arr.shape}")
    Image.fromarray(arr).save(Path(path), format="PNG")


def read_png(path: Path) -> np.ndarray:
    """Grayscale PNG as uint8; colour images contribute their red channel only."""
    try:
        with Image.open(Path(path)) as img:
            if img.mode in ("RGB", "RGBA"):
                img = img.getchannel("R")
            elif img.mode != "L":
                img = img.convert("L")
            return np.array(img, dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc


def write_f32(path: Path, depth: np.ndarray) -> None:
    np.ascontiguousarray(depth, dtype="<f4").tofile(Path(path))


def read_f32(path: Path, shape: tuple[int, int]) -> np.ndarray:
    try:
        raw = np.fromfile(Path(path), dtype="<f4")
    except OSError as exc:
        raise DatasetError(f"cannot read depth map {path}: {exc}") from exc
    if raw.size != shape[0] * shape[1]:
        raise DatasetError(f"depth map {path} holds {raw.size} values, expected {shape[0]}x{shape[1]}")
    return raw.astype(np.float64).reshape(shape)


def depth_to_png(depth_mm: np.ndarray) -> np.ndarray:
    """8-bit visualisation, linear over the working range, near = bright."""
    scaled = (D_MAX_MM - np.asarray(depth_mm, dtype=np.float64)) / (D_MAX_MM - D_MIN_MM)
    return np.clip(np.rint(255 * scaled), 0, 255).astype(np.uint8)


def downscale(array: np.ndarray, resolution: int) -> np.ndarray:
    """Block-mean downscale of a square 2-D array by an integer factor."""
    h, w = array.shape
    if h % resolution or w % resolution:
        raise DatasetError(f"cannot downscale {h}x{w} to {resolution}x{resolution}")
    fh, fw = h // resolution, w // resolution
    return np.asarray(array, dtype=np.float64).reshape(resolution, fh, resolution, fw).mean(axis=(1, 3))
