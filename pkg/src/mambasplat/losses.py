"""Training objective: image MSE, alpha-mask MSE, an optional perceptual
hook, and the radial-polygon position constraint.

The position constraint approximates an object silhouette as a star-shaped
polygon: rays from the image center sample the outermost mask crossing at A
uniform angles. Projected splat centers that fall outside the mask are
pulled toward the contour point at their own radial angle with a squared
distance penalty; the term is active only during warmup.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError, DimensionError

DEFAULT_RAY_ANGLES = 360
RAY_STEP = 1.0  # pixels per marching step


@dataclass
class RadialPolygon:
    center: tuple        # (cx, cy) pixel coordinates of the image center
    angles: np.ndarray   # [A] radians, uniformly spaced over [0, 2pi)
    radii: np.ndarray    # [A] distance to the outermost contour crossing


@dataclass
class LossWeights:
    lambda_mask: float = 0.01
    lambda_lpips: float = 0.1
    lambda_dist: float = 1.0
    dist_warmup_steps: int = 1000

    def __post_init__(self):
        if min(self.lambda_mask, self.lambda_lpips, self.lambda_dist) < 0:
            raise DataError("loss weights must be non-negative")
        if self.dist_warmup_steps < 0:
            raise DataError("dist_warmup_steps must be non-negative")


# Optional perceptual distance: any callable (pred_rgb Tensor, gt ndarray) -> scalar Tensor.
_perceptual_backend = None


def register_perceptual(fn) -> None:
    """Install a perceptual-distance backend for the lpips-weighted term."""
    global _perceptual_backend
    _perceptual_backend = fn


def clear_perceptual() -> None:
    global _perceptual_backend
    _perceptual_backend = None


def mse(pred: Tensor, target) -> Tensor:
    target = np.asarray(target)
    if pred.data.shape != target.shape:
        raise DimensionError(f"mse shapes differ: {pred.data.shape} vs {target.shape}")
    diff = ad.sub(pred, ad.tensor(target.astype(pred.data.dtype)))
    return ad.tensor_mean(diff * diff)


def mask_to_radial_polygon(mask: np.ndarray, n_angles: int = DEFAULT_RAY_ANGLES) -> RadialPolygon:
    """March rays from the image center and record the outermost mask crossing.

    Rays that never hit a foreground pixel get radius 0; a fully empty mask
    is rejected. Nearest-pixel sampling at 1 px steps.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DimensionError(f"mask must be 2-D, got {mask.shape}")
    if n_angles < 8:
        raise DataError(f"need at least 8 ray angles, got {n_angles}")
    fg = mask > 0.5 if mask.dtype != bool else mask
    if not fg.any():
        raise DataError("cannot build a radial polygon from an empty mask")
    h, w = mask.shape
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    angles = np.arange(n_angles) * (2.0 * math.pi / n_angles)
    max_t = math.hypot(max(cx, w - 1 - cx), max(cy, h - 1 - cy))
    steps = np.arange(0.0, max_t + RAY_STEP, RAY_STEP)
    xs = cx + steps[None, :] * np.cos(angles)[:, None]   # [A, T]
    ys = cy + steps[None, :] * np.sin(angles)[:, None]
    px = np.rint(xs).astype(np.int64)
    py = np.rint(ys).astype(np.int64)
    inside = (px >= 0) & (px < w) & (py >= 0) & (py < h)
    hit = np.zeros_like(inside)
    hit[inside] = fg[py[inside], px[inside]]
    # outermost foreground sample along each ray
    radii = np.where(hit.any(axis=1), steps[(hit.shape[1] - 1) - hit[:, ::-1].argmax(axis=1)], 0.0)
    return RadialPolygon(center=(cx, cy), angles=angles, radii=radii.astype(np.float64))


def contour_lookup(poly: RadialPolygon, angle) -> np.ndarray:
    """Contour point at ``angle`` (radians), wrapping and interpolating
    linearly between the two bracketing sampled angles. Vectorized."""
    a = np.asarray(angle, dtype=np.float64)
    n = len(poly.angles)
    step = 2.0 * math.pi / n
    pos = np.mod(a, 2.0 * math.pi) / step
    i0 = np.floor(pos).astype(np.int64) % n
    i1 = (i0 + 1) % n
    frac = pos - np.floor(pos)
    r = poly.radii[i0] * (1.0 - frac) + poly.radii[i1] * frac
    cx, cy = poly.center
    return np.stack([cx + r * np.cos(a), cy + r * np.sin(a)], axis=-1)


def dist_loss(center_u: Tensor, center_v: Tensor, mask: np.ndarray,
              poly: RadialPolygon) -> Tensor:
    """Mean squared distance from outside-the-mask centers to the contour.

    Inside centers (nearest-pixel lookup) contribute zero; the contour
    target is held constant per evaluation, so the gradient pulls each
    outside center straight toward its own-ray contour point.
    """
    mask = np.asarray(mask)
    fg = mask > 0.5 if mask.dtype != bool else mask
    h, w = fg.shape
    uu = center_u.data.astype(np.float64)
    vv = center_v.data.astype(np.float64)
    px = np.rint(uu).astype(np.int64)
    py = np.rint(vv).astype(np.int64)
    in_image = (px >= 0) & (px < w) & (py >= 0) & (py < h)
    inside = np.zeros(uu.shape, dtype=bool)
    inside[in_image] = fg[py[in_image], px[in_image]]
    outside = ~inside
    n = uu.size
    if not outside.any():
        return ad.tensor_mean(center_u * 0.0)  # keeps the graph connected
    cx, cy = poly.center
    theta = np.arctan2(vv - cy, uu - cx)
    target = contour_lookup(poly, theta)      # [N, 2], constant w.r.t. the graph
    sel = outside.astype(center_u.data.dtype)
    du = ad.mul(ad.sub(center_u, ad.tensor(target[:, 0].astype(center_u.data.dtype))),
                ad.tensor(sel))
    dv = ad.mul(ad.sub(center_v, ad.tensor(target[:, 1].astype(center_v.data.dtype))),
                ad.tensor(sel))
    return ad.div(ad.add(ad.tensor_sum(du * du), ad.tensor_sum(dv * dv)), float(n))


def random_background(rgb_fg: np.ndarray, alpha: np.ndarray,
                      rng: np.random.Generator):
    """Composite a premultiplied foreground over a random solid color.

    Returns (image, color); reuse the color as the renderer background for
    the matching prediction so supervision stays consistent.
    """
    rgb_fg = np.asarray(rgb_fg)
    alpha = np.asarray(alpha)
    if alpha.min(initial=0.0) < -1e-6 or alpha.max(initial=0.0) > 1.0 + 1e-6:
        raise DataError("alpha must lie in [0, 1]")
    color = rng.uniform(0.0, 1.0, size=3)
    img = rgb_fg + (1.0 - alpha[..., None]) * color
    return img.astype(rgb_fg.dtype), color


def total_loss(pred, gt_rgb, gt_mask, dist_term, weights: LossWeights, step: int):
    """The four-term objective; returns (scalar Tensor, per-term floats).

    L = mse(rgb) + lambda_mask * mse(alpha, mask)
      + lambda_lpips * perceptual (0 unless a backend is registered)
      + lambda_dist * dist_term (only while step < dist_warmup_steps)
    """
    rgb_term = mse(pred.rgb, gt_rgb)
    mask_term = mse(pred.alpha, np.asarray(gt_mask, dtype=pred.alpha.data.dtype))
    total = ad.add(rgb_term, ad.mul(mask_term, weights.lambda_mask))
    terms = {"rgb": float(rgb_term.data), "mask": float(mask_term.data),
             "lpips": 0.0, "dist": 0.0}
    if _perceptual_backend is not None and weights.lambda_lpips > 0:
        lp = _perceptual_backend(pred.rgb, np.asarray(gt_rgb))
        total = ad.add(total, ad.mul(lp, weights.lambda_lpips))
        terms["lpips"] = float(lp.data)
    if dist_term is not None and step < weights.dist_warmup_steps and weights.lambda_dist > 0:
        total = ad.add(total, ad.mul(dist_term, weights.lambda_dist))
        terms["dist"] = float(dist_term.data)
    return total, terms
