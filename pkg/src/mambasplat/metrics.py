"""Image reconstruction metrics: PSNR and SSIM."""

from __future__ import annotations

import math

import numpy as np

from .errors import DimensionError

PSNR_CAP = 99.0
_PSNR_MSE_FLOOR = 1e-10


def psnr(pred: np.ndarray, target: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; capped at 99 for near-zero MSE."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"psnr shapes differ: {pred.shape} vs {target.shape}")
    mse = float(np.mean((pred - target) ** 2))
    if mse < _PSNR_MSE_FLOOR:
        return PSNR_CAP
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter2d(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation along the two leading axes."""
    from numpy.lib.stride_tricks import sliding_window_view

    n = k.size
    rows = sliding_window_view(img, n, axis=0) @ k
    return sliding_window_view(rows, n, axis=1) @ k


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Mean structural similarity with the standard 11x11 Gaussian window.

    Symmetric in its arguments; grayscale or per-channel-averaged RGB.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    if min(a.shape[0], a.shape[1]) < 11:
        raise DimensionError("ssim needs images of at least 11x11 pixels")
    k = _gaussian_window()
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx = _filter2d(x, k)
        my = _filter2d(y, k)
        sxx = _filter2d(x * x, k) - mx * mx
        syy = _filter2d(y * y, k) - my * my
        sxy = _filter2d(x * y, k) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))
