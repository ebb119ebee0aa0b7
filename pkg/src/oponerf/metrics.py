"""Image quality metrics."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 99.0
LUMA = np.array([0.299, 0.587, 0.114])  # Rec. 601


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(getattr(a, "data", a), dtype=np.float64)
    b = np.asarray(getattr(b, "data", b), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    """Mean squared error with a correctly rounded sum."""
    a, b = _pair(a, b)
    d = (a - b).ravel()
    return math.fsum(d * d) / d.size


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 99 for (near) identical images."""
    err = mse(a, b)
    if err == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 20.0 * math.log10(peak) - 10.0 * math.log10(err))


def to_luma(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    if image.ndim == 3 and image.shape[-1] == 3:
        return image @ LUMA
    raise ValueError(f"expected (H, W) or (H, W, 3), got {image.shape}")


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(a, b, peak: float = 1.0, size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> np.ndarray:
    """Local SSIM over every fully contained window of the luma images."""
    a, b = _pair(a, b)
    x, y = to_luma(a), to_luma(b)
    if min(x.shape) < size:
        raise ValueError(f"SSIM needs images of at least {size}x{size}, got {x.shape}")
    w = gaussian_window(size, sigma)

    def filt(img):
        return np.einsum("ijkl,kl->ij", sliding_window_view(img, (size, size)), w)

    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    mx, my = filt(x), filt(y)
    vx = filt(x * x) - mx * mx
    vy = filt(y * y) - my * my
    cxy = filt(x * y) - mx * my
    return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))


def ssim(a, b, peak: float = 1.0) -> float:
    """Mean structural similarity (11x11 Gaussian window, sigma 1.5) on luma."""
    return float(np.mean(ssim_map(a, b, peak)))
