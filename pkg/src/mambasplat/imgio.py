"""Image files: 8-bit PNG for viewing, raw float32 for loss-level exactness.

Raw format: 16-byte header (magic, height, width, channels as little-endian
u32) followed by H*W*C float32 values in row-major order.
"""

from __future__ import annotations

import struct

import numpy as np
from PIL import Image

from .errors import DataError

IMAGE_MAGIC = b"IMGF"


def write_png(path, image: np.ndarray) -> None:
    """Save [H, W], [H, W, 3] or [H, W, 4] floats in [0, 1] as 8-bit PNG."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    u8 = (arr * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(u8).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    """Load a PNG as float32 in [0, 1] (grayscale stays 2-D)."""
    with Image.open(path) as img:
        arr = np.asarray(img)
    return arr.astype(np.float32) / 255.0


def write_raw_image(path, image: np.ndarray) -> None:
    arr = np.asarray(image, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3:
        raise DataError(f"raw images are [H, W, C], got shape {arr.shape}")
    with open(path, "wb") as f:
        f.write(IMAGE_MAGIC)
        f.write(struct.pack("<III", arr.shape[0], arr.shape[1], arr.shape[2]))
        f.write(np.ascontiguousarray(arr).tobytes())


def read_raw_image(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16 or blob[:4] != IMAGE_MAGIC:
        raise DataError(f"{path}: not a raw image (bad magic at offset 0)")
    h, w, c = struct.unpack("<III", blob[4:16])
    expected = 16 + 4 * h * w * c
    if len(blob) != expected:
        raise DataError(f"{path}: truncated payload at offset {len(blob)} "
                        f"(expected {expected} bytes)")
    arr = np.frombuffer(blob, dtype="<f4", offset=16).reshape(h, w, c)
    return arr.copy() if c > 1 else arr[..., 0].copy()
