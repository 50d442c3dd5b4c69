"""Image-quality metrics on normalised ``[0, 1]`` images."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DomainError, ShapeError

PSNR_CAP = 100.0
BT601 = np.array([0.299, 0.587, 0.114])


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    variance_corr: float | None = None


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"images differ in shape: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB with peak 1.0, capped at 100 dB."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * np.log10(mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - size // 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, window: np.ndarray | None = None) -> float:
    """Single-scale SSIM averaged over all fully covered window positions."""
    a, b = _pair(a, b)
    a, b = np.squeeze(a), np.squeeze(b)
    if a.ndim != 2:
        raise ShapeError(f"ssim expects a single-channel image, got shape {a.shape}")
    win = gaussian_window() if window is None else window
    k = win.shape[0]
    if a.shape[0] < k or a.shape[1] < k:
        raise ContractError(f"image {a.shape} smaller than the {k}x{k} SSIM window")
    c1, c2 = 0.01**2, 0.03**2

    def filt(img):
        return np.einsum("hwij,ij->hw", sliding_window_view(img, win.shape), win)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def luminance(rgb) -> np.ndarray:
    """BT.601 luma of a ``[3, h, w]`` image."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ShapeError(f"luminance expects [3,h,w], got {rgb.shape}")
    return np.tensordot(BT601, rgb, axes=1)


def to_luma(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 3:
        return luminance(img)
    return np.squeeze(img)


def variance_map_quality(pred_var, true_std) -> float:
    """Pearson correlation between the predicted std ``sqrt(pred_var)`` and the true std map."""
    p, t = _pair(pred_var, true_std)
    p = np.sqrt(p).ravel()
    t = t.ravel()
    if np.std(p) == 0 or np.std(t) == 0:
        raise DomainError("correlation is undefined for a constant map")
    return float(np.corrcoef(p, t)[0, 1])


def report(restored, clean, pred_var=None, true_std=None) -> MetricReport:
    a, b = to_luma(restored), to_luma(clean)
    corr = None
    if pred_var is not None and true_std is not None:
        corr = variance_map_quality(np.squeeze(pred_var), np.squeeze(true_std))
    return MetricReport(psnr=psnr(a, b), ssim=ssim(a, b), variance_corr=corr)
