"""Edge-aware training loss and image quality metrics."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import value
from .exceptions import ConfigError, ShapeError

LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])
LUMA = np.array([0.299, 0.587, 0.114])

DEFAULT_DELTA = 0.1
DEFAULT_LAMBDA = 0.1
DEFAULT_EPS = 1e-3


def luma(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return np.tensordot(LUMA, img, axes=([0], [0]))


def laplacian(gray) -> np.ndarray:
    """4-neighbour Laplacian with edge-replicate borders."""
    return ndimage.correlate(np.asarray(gray, dtype=np.float64), LAPLACIAN, mode="nearest")


def edge_mask(hr_image, delta: float = DEFAULT_DELTA) -> np.ndarray:
    """Binary (H, W) mask: 1 where |Laplacian(luma)| >= delta."""
    if delta < 0:
        raise ValueError("delta must be >= 0")
    img = np.asarray(value(hr_image))
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"expected a (3, H, W) image, got {img.shape}")
    return (np.abs(laplacian(luma(img))) >= delta).astype(img.dtype)


def charbonnier(pred, target, eps: float = DEFAULT_EPS):
    if eps <= 0:
        raise ValueError("eps must be > 0")
    return ad.charbonnier(pred, target, eps)


def edge_aware_loss(pred, target, delta=DEFAULT_DELTA, lam=DEFAULT_LAMBDA, eps=DEFAULT_EPS):
    """Charbonnier plus ``lam`` times the mean absolute residual on edge pixels of ``target``."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    base = charbonnier(pred, target, eps)
    if lam == 0:
        return base
    mask = edge_mask(value(target), delta)
    return ad.add(base, ad.mul(ad.masked_l1(pred, target, mask[None]), lam))


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """PSNR in dB for images in [0, 1]; identical inputs give ``inf``."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def _gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - size // 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), valid region only.

    Multi-channel (C, H, W) inputs are scored per channel and averaged.
    """
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[-2:]) < window:
        raise ConfigError(f"image {a.shape[-2:]} smaller than the {window}x{window} SSIM window")
    g = _gaussian_window(window, sigma)
    c1, c2 = (k1 * 1.0) ** 2, (k2 * 1.0) ** 2
    half = window // 2

    def filt(x):
        y = ndimage.correlate1d(x, g, axis=0, mode="constant")
        y = ndimage.correlate1d(y, g, axis=1, mode="constant")
        return y[half:x.shape[0] - half, half:x.shape[1] - half]

    vals = []
    for x, y in zip(a, b):
        mx, my = filt(x), filt(y)
        sxx = filt(x * x) - mx * mx
        syy = filt(y * y) - my * my
        sxy = filt(x * y) - mx * my
        smap = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
        vals.append(smap.mean())
    return float(np.mean(vals))


def rgb_to_y(img) -> np.ndarray:
    """ITU-R BT.601 Y channel (studio range) of a (3, H, W) image in [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    return (16.0 + 65.481 * img[0] + 128.553 * img[1] + 24.966 * img[2]) / 255.0
