"""Image-quality and spectral metrics."""

from __future__ import annotations

import math

import numpy as np
from scipy.signal import fftconvolve

PSNR_INF = float("inf")


def _as_np(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def psnr(a, b, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); identical inputs give +inf."""
    a, b = _as_np(a), _as_np(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(peak ** 2 / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_channel(a: np.ndarray, b: np.ndarray, win: np.ndarray, c1: float, c2: float) -> float:
    filt = lambda x: fftconvolve(x, win, mode="valid")
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a, b, peak: float = 1.0) -> float:
    """Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03.

    Accepts (H, W) or (H, W, C); multi-channel inputs average the per-channel
    scores. Only windows fully inside the image are used.
    """
    a, b = _as_np(a), _as_np(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    win = _gaussian_window()
    if a.shape[0] < win.shape[0] or a.shape[1] < win.shape[1]:
        raise ValueError("image smaller than the 11x11 SSIM window")
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    return float(np.mean([_ssim_channel(a[..., c], b[..., c], win, c1, c2) for c in range(a.shape[-1])]))


def radial_frequency(shape) -> np.ndarray:
    """Radial frequency in cycles/pixel of every FFT bin; Nyquist is 0.5."""
    fy = np.fft.fftfreq(shape[0])[:, None]
    fx = np.fft.fftfreq(shape[1])[None, :]
    return np.sqrt(fx ** 2 + fy ** 2)


def hf_energy_ratio(img, radial_cutoff_fraction: float = 0.5) -> float:
    """Share of non-DC spectral energy above ``cutoff * Nyquist`` (radially)."""
    img = _as_np(img)
    if img.ndim == 3:
        img = img.mean(-1)
    power = np.abs(np.fft.fft2(img)) ** 2
    dc = power[0, 0]
    power[0, 0] = 0.0
    total = power.sum()
    if total <= 1e-20 * dc or total == 0.0:
        return 0.0
    r = radial_frequency(img.shape)
    return float(power[r > radial_cutoff_fraction * 0.5].sum() / total)
