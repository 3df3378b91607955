"""PSNR and SSIM."""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a, b, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); ``inf`` for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    w = np.exp(-(r**2) / (2 * sigma**2))
    return w / w.sum()


def _filter_valid(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    r = w.size // 2
    for ax in range(x.ndim):
        x = correlate1d(x, w, axis=ax, mode="constant")
    return x[tuple(slice(r, s - r) for s in x.shape)]


def ssim_map(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> np.ndarray:
    w = gaussian_window()
    if any(s < w.size for s in a.shape):
        raise ValueError(f"image {a.shape} smaller than the {w.size}-sample SSIM window")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a = _filter_valid(a, w)
    mu_b = _filter_valid(b, w)
    var_a = _filter_valid(a * a, w) - mu_a**2
    var_b = _filter_valid(b * b, w) - mu_b**2
    cov = _filter_valid(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, data_range: float = 1.0, channel_axis: int | None = None) -> float:
    """Gaussian-window SSIM averaged over valid window positions (and channels)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if channel_axis is None:
        return float(ssim_map(a, b, data_range).mean())
    a = np.moveaxis(a, channel_axis, 0)
    b = np.moveaxis(b, channel_axis, 0)
    return float(np.mean([ssim_map(ac, bc, data_range).mean() for ac, bc in zip(a, b)]))
