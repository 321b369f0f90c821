"""The splat set: N Gaussians of 23 parameters each.

Per splat: position (3, in [-1,1]), opacity (1, in [0,1]), first-order SH
color (12 = 3 channels x 4 coefficients, channel-major), scale (3, positive),
rotation quaternion (4, unit norm). The export file is a 12-byte header
(magic, version, N) followed by N x 23 little-endian float32 records in that
field order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError, NumericalError

GAUSSIAN_MAGIC = b"GSPL"
GAUSSIAN_FORMAT_VERSION = 1
PARAMS_PER_SPLAT = 23

# Real spherical harmonics, degree <= 1. Coefficient 0 is the DC term.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199


@dataclass
class GaussianSet:
    position: Tensor   # [N, 3]
    opacity: Tensor    # [N]
    sh: Tensor         # [N, 12]
    scale: Tensor      # [N, 3]
    quat: Tensor       # [N, 4]

    @property
    def count(self) -> int:
        return self.position.data.shape[0]

    def to_array(self) -> np.ndarray:
        """Flatten to [N, 23] in the canonical field order."""
        return np.concatenate([
            self.position.data,
            self.opacity.data.reshape(-1, 1),
            self.sh.data,
            self.scale.data,
            self.quat.data,
        ], axis=1)

    def validate(self, max_scale: float = 0.5) -> None:
        """Raise NumericalError if any invariant is violated."""
        arr = self.to_array()
        if arr.shape[1] != PARAMS_PER_SPLAT:
            raise NumericalError(f"splat records carry {arr.shape[1]} values, expected 23")
        if not np.isfinite(arr).all():
            raise NumericalError("splat parameters contain non-finite values")
        if np.abs(self.position.data).max(initial=0.0) > 1.0 + 1e-6:
            raise NumericalError("splat positions leave [-1, 1]")
        o = self.opacity.data
        if o.min(initial=0.0) < -1e-6 or o.max(initial=0.0) > 1.0 + 1e-6:
            raise NumericalError("opacities leave [0, 1]")
        s = self.scale.data
        if s.min(initial=max_scale) <= 0.0 or s.max(initial=0.0) > max_scale + 1e-6:
            raise NumericalError(f"scales leave (0, {max_scale}]")
        qn = np.linalg.norm(self.quat.data, axis=1)
        if self.count and np.abs(qn - 1.0).max() > 1e-5:
            raise NumericalError("quaternions are not unit length within 1e-5")


def from_array(arr: np.ndarray) -> GaussianSet:
    arr = np.asarray(arr, dtype=ad.default_dtype())
    if arr.ndim != 2 or arr.shape[1] != PARAMS_PER_SPLAT:
        raise DataError(f"expected [N, 23] splat records, got {arr.shape}")
    return GaussianSet(
        position=ad.tensor(arr[:, 0:3]),
        opacity=ad.tensor(arr[:, 3]),
        sh=ad.tensor(arr[:, 4:16]),
        scale=ad.tensor(arr[:, 16:19]),
        quat=ad.tensor(arr[:, 19:23]),
    )


def save_gaussians(path, gaussians: GaussianSet) -> None:
    arr = np.ascontiguousarray(gaussians.to_array().astype("<f4"))
    with open(path, "wb") as f:
        f.write(GAUSSIAN_MAGIC)
        f.write(struct.pack("<II", GAUSSIAN_FORMAT_VERSION, arr.shape[0]))
        f.write(arr.tobytes())


def load_gaussians(path) -> GaussianSet:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12 or blob[:4] != GAUSSIAN_MAGIC:
        raise DataError(f"{path}: not a splat file (bad magic at offset 0)")
    version, count = struct.unpack("<II", blob[4:12])
    if version != GAUSSIAN_FORMAT_VERSION:
        raise DataError(f"{path}: unsupported splat format version {version}")
    expected = 12 + 4 * count * PARAMS_PER_SPLAT
    if len(blob) != expected:
        raise DataError(f"{path}: truncated payload at offset {len(blob)} "
                        f"(expected {expected} bytes)")
    arr = np.frombuffer(blob, dtype="<f4", offset=12).reshape(count, PARAMS_PER_SPLAT)
    return from_array(arr.copy())
