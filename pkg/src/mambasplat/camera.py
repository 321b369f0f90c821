"""Pinhole camera: 12 extrinsic + 4 intrinsic parameters plus resolution.

Convention: world-to-camera ``x_cam = R @ x_world + t`` with x right, y down,
z forward (a point in front of the camera has z > 0); pixel coordinates
``u = fx * x/z + cx``, ``v = fy * y/z + cy``.

The camera file format is one camera per line, 18 whitespace-separated
decimals: 9 rotation entries (row-major), 3 translation, fx fy cx cy,
width height.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class Camera:
    rotation: np.ndarray      # (3, 3) world-to-camera, row-major
    translation: np.ndarray   # (3,)
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-4:
            raise DataError("camera rotation is not orthonormal within 1e-4")
        if not (self.fx > 0 and self.fy > 0):
            raise DataError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise DataError("principal point lies outside the image")

    @property
    def position(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def raw_vector(self) -> np.ndarray:
        """The 16 raw conditioning inputs: 12 extrinsics + normalized intrinsics."""
        return np.concatenate([
            self.rotation.reshape(9),
            self.translation,
            [self.fx / self.width, self.fy / self.height,
             self.cx / self.width, self.cy / self.height],
        ]).astype(np.float64)

    def to_line(self) -> str:
        vals = list(self.rotation.reshape(9)) + list(self.translation) + \
            [self.fx, self.fy, self.cx, self.cy, float(self.width), float(self.height)]
        return " ".join(f"{v:.17g}" for v in vals)

    @classmethod
    def from_values(cls, vals) -> "Camera":
        vals = [float(v) for v in vals]
        if len(vals) != 18:
            raise DataError(f"camera line needs 18 values, got {len(vals)}")
        return cls(
            rotation=np.array(vals[:9]).reshape(3, 3),
            translation=np.array(vals[9:12]),
            fx=vals[12], fy=vals[13], cx=vals[14], cy=vals[15],
            width=int(round(vals[16])), height=int(round(vals[17])),
        )


def look_at(eye, target, up=(0.0, 1.0, 0.0), *, fx, fy, cx, cy, width, height) -> Camera:
    """Camera at ``eye`` whose optical axis passes through ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward = forward / np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    if abs(float(forward @ up)) > 0.99 * np.linalg.norm(up):
        up = np.array([1.0, 0.0, 0.0])
    side = np.cross(forward, up)
    side /= np.linalg.norm(side)
    upv = np.cross(side, forward)
    rot = np.stack([side, -upv, forward])  # y points down in image space
    return Camera(rotation=rot, translation=-rot @ eye,
                  fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height)


def normalized_camera(resolution: int, distance: float = 2.0,
                      focal_factor: float = 0.625) -> Camera:
    """The assumed reference pose at inference: on the -z axis looking at the origin."""
    f = focal_factor * resolution
    return look_at(eye=(0.0, 0.0, -distance), target=(0.0, 0.0, 0.0),
                   fx=f, fy=f, cx=resolution / 2.0, cy=resolution / 2.0,
                   width=resolution, height=resolution)


def fibonacci_directions(n: int) -> np.ndarray:
    """n roughly uniform unit vectors on the sphere (Fibonacci lattice)."""
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = i * math.pi * (3.0 - math.sqrt(5.0))
    return np.stack([r * np.cos(phi), z, r * np.sin(phi)], axis=1)


def anchor_cameras(n_views: int, resolution: int, distance: float = 2.0,
                   focal_factor: float = 0.625) -> list[Camera]:
    """Anchor viewpoints on a sphere around the origin, all looking inward."""
    f = focal_factor * resolution
    cams = []
    for d in fibonacci_directions(n_views):
        cams.append(look_at(eye=distance * d, target=(0.0, 0.0, 0.0),
                            fx=f, fy=f, cx=resolution / 2.0, cy=resolution / 2.0,
                            width=resolution, height=resolution))
    return cams


def save_cameras(path, cameras) -> None:
    with open(path, "w") as f:
        for cam in cameras:
            f.write(cam.to_line() + "\n")


def load_cameras(path) -> list[Camera]:
    cams = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                cams.append(Camera.from_values(line.split()))
            except (ValueError, DataError) as e:
                raise DataError(f"{path}: line {lineno}: {e}") from None
    return cams
