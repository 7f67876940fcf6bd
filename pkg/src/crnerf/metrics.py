"""Image quality metrics (peak value 1.0) and mask IoU."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 99.0
SSIM_WINDOW = 8
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """``10 log10(1 / MSE)``, capped at 99 dB when ``MSE < 1e-10``."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def to_gray(image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[-1] == 3:
        return image @ GRAY_WEIGHTS
    if image.ndim == 2:
        return image
    raise ValueError(f"expected H x W x 3 or H x W, got {image.shape}")


def ssim(a, b, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over every ``window x window`` uniform window (stride 1, valid).

    Colour images are converted to luma first; statistics use population
    (biased) variances.
    """
    a, b = _pair(a, b)
    x, y = to_gray(a), to_gray(b)
    if x.shape[0] < window or x.shape[1] < window:
        raise ValueError(f"image {x.shape} is smaller than the {window}x{window} window")
    wx = sliding_window_view(x, (window, window))
    wy = sliding_window_view(y, (window, window))
    mx, my = wx.mean(axis=(-2, -1)), wy.mean(axis=(-2, -1))
    vx = wx.var(axis=(-2, -1))
    vy = wy.var(axis=(-2, -1))
    cxy = (wx * wy).mean(axis=(-2, -1)) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)
    den = (mx**2 + my**2 + SSIM_C1) * (vx + vy + SSIM_C2)
    return float(np.mean(num / den))


def iou(pred, truth) -> float:
    """Intersection over union of two boolean masks (1.0 when both are empty)."""
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    union = np.logical_or(pred, truth).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, truth).sum() / union)
