"""Synthetic dataset generation and loading.

Each object is a random mixture of 8-64 splats (one large, fairly opaque
core splat near the origin guarantees a nonempty silhouette from every
view) rendered by the shared splat renderer from anchor cameras on a view
sphere. Per view the generator writes:

  images/view_###.raw   float32 RGBA: premultiplied rgb over black + alpha
  images/view_###.png   8-bit preview composited over white
  masks/view_###.png    binary silhouette (alpha > 0.5)

plus cameras.txt (one camera per line), the ground-truth splat file, and a
JSON manifest at the dataset root. Everything is a pure function of the
seed, so regenerating yields byte-identical files.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .camera import Camera, anchor_cameras, load_cameras, save_cameras
from .errors import DataError
from .gaussians import SH_C0, GaussianSet, save_gaussians
from .imgio import read_png, read_raw_image, write_png, write_raw_image
from .renderer import render_arrays

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


def random_object(rng: np.random.Generator, n_min: int = 8, n_max: int = 64) -> GaussianSet:
    """A random splat mixture inside [-1, 1]^3 satisfying all set invariants."""
    n = int(rng.integers(n_min, n_max + 1))
    pos = rng.uniform(-0.5, 0.5, size=(n, 3))
    scale = np.exp(rng.uniform(np.log(0.05), np.log(0.2), size=(n, 3)))
    opacity = rng.uniform(0.55, 0.95, size=n)
    # core splat: anchors the silhouette so every mask is nonempty
    pos[0] = rng.uniform(-0.08, 0.08, size=3)
    scale[0] = rng.uniform(0.12, 0.2, size=3)
    opacity[0] = rng.uniform(0.9, 0.97)
    quat = rng.normal(0.0, 1.0, size=(n, 4))
    quat /= np.linalg.norm(quat, axis=1, keepdims=True)
    sh = rng.normal(0.0, 0.04, size=(n, 12))
    sh[:, 0::4] = rng.uniform(0.15, 0.95, size=(n, 3)) / SH_C0
    dt = ad.default_dtype()
    return GaussianSet(
        position=ad.tensor(pos.astype(dt)),
        opacity=ad.tensor(opacity.astype(dt)),
        sh=ad.tensor(sh.astype(dt)),
        scale=ad.tensor(scale.astype(dt)),
        quat=ad.tensor(quat.astype(dt)),
    )


def gen_synthetic_dataset(out_dir, n_objects: int = 1, views_per_object: int = 48,
                          resolution: int = 64, seed: int = 0,
                          camera_distance: float = 2.0,
                          focal_factor: float = 0.625) -> str:
    """Write a reproducible dataset; returns the manifest path."""
    rng = np.random.default_rng(seed)
    cams = anchor_cameras(views_per_object, resolution,
                          distance=camera_distance, focal_factor=focal_factor)
    os.makedirs(out_dir, exist_ok=True)
    object_ids = []
    for oi in range(n_objects):
        oid = f"object_{oi:04d}"
        object_ids.append(oid)
        odir = os.path.join(out_dir, oid)
        os.makedirs(os.path.join(odir, "images"), exist_ok=True)
        os.makedirs(os.path.join(odir, "masks"), exist_ok=True)
        obj = random_object(rng)
        obj.validate()
        save_gaussians(os.path.join(odir, "splats.gs"), obj)
        save_cameras(os.path.join(odir, "cameras.txt"), cams)
        for vi, cam in enumerate(cams):
            rgb, alpha = render_arrays(obj, cam, background=(0.0, 0.0, 0.0))
            mask = alpha > 0.5
            if not mask.any():
                raise DataError(f"{oid} view {vi}: empty mask; generator invariant broken")
            rgba = np.concatenate([rgb, alpha[..., None]], axis=2).astype(np.float32)
            write_raw_image(os.path.join(odir, "images", f"view_{vi:03d}.raw"), rgba)
            write_png(os.path.join(odir, "images", f"view_{vi:03d}.png"),
                      rgb + (1.0 - alpha[..., None]))
            write_png(os.path.join(odir, "masks", f"view_{vi:03d}.png"),
                      mask.astype(np.float64))
    manifest = {
        "format_version": MANIFEST_VERSION,
        "seed": seed,
        "resolution": resolution,
        "views_per_object": views_per_object,
        "camera_distance": camera_distance,
        "focal_factor": focal_factor,
        "objects": object_ids,
    }
    path = os.path.join(out_dir, MANIFEST_NAME)
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


@dataclass
class View:
    rgb: np.ndarray      # [H, W, 3] premultiplied over black
    alpha: np.ndarray    # [H, W] continuous coverage
    mask: np.ndarray     # [H, W] bool silhouette
    camera: Camera

    @property
    def mask_area(self) -> int:
        return int(self.mask.sum())


@dataclass
class ObjectSample:
    object_id: str
    views: list

    def __post_init__(self):
        if not self.views:
            raise DataError(f"{self.object_id}: no supervision views")
        for i, v in enumerate(self.views):
            if not v.mask.any():
                raise DataError(f"{self.object_id}: view {i} has an empty mask")


def select_reference_view(sample: ObjectSample) -> int:
    """Deterministic stand-in for a semantic filter: largest silhouette wins,
    ties resolved toward the lowest index."""
    areas = [v.mask_area for v in sample.views]
    return int(np.argmax(areas))


class Dataset:
    """Lazy directory-backed dataset with a tiny object cache."""

    def __init__(self, root):
        self.root = str(root)
        path = os.path.join(self.root, MANIFEST_NAME)
        if not os.path.exists(path):
            raise DataError(f"no {MANIFEST_NAME} under {self.root}")
        with open(path) as f:
            self.manifest = json.load(f)
        if self.manifest.get("format_version") != MANIFEST_VERSION:
            raise DataError(f"unsupported dataset format version "
                            f"{self.manifest.get('format_version')!r}")
        self.object_ids = list(self.manifest["objects"])
        self.resolution = int(self.manifest["resolution"])
        self._cache = {}

    def __len__(self):
        return len(self.object_ids)

    def load_object(self, index: int) -> ObjectSample:
        if index in self._cache:
            return self._cache[index]
        oid = self.object_ids[index]
        odir = os.path.join(self.root, oid)
        cams = load_cameras(os.path.join(odir, "cameras.txt"))
        views = []
        for vi, cam in enumerate(cams):
            rgba = read_raw_image(os.path.join(odir, "images", f"view_{vi:03d}.raw"))
            if rgba.ndim != 3 or rgba.shape[2] != 4:
                raise DataError(f"{oid} view {vi}: expected RGBA raw image")
            mask = read_png(os.path.join(odir, "masks", f"view_{vi:03d}.png")) > 0.5
            views.append(View(rgb=rgba[..., :3].copy(), alpha=rgba[..., 3].copy(),
                              mask=mask, camera=cam))
        sample = ObjectSample(object_id=oid, views=views)
        if len(self._cache) > 4:
            self._cache.clear()
        self._cache[index] = sample
        return sample
