"""Full-reference quality metrics and the patch variance decomposition."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .enhance import luminance


def psnr(a, b, peak: float = 1.0) -> float:
    """PSNR in dB over all channels; ``inf`` for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shapes differ {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(x, win):
    views = np.lib.stride_tricks.sliding_window_view(x, win.shape)
    return np.einsum("ijkl,kl->ij", views, win)


def _gray(x):
    x = np.asarray(x, dtype=np.float64)
    return luminance(x) if x.ndim == 3 else x


def ssim(a, b, peak: float = 1.0, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM on luminance with an 11x11 Gaussian window (sigma 1.5), valid region."""
    a, b = _gray(a), _gray(b)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shapes differ {a.shape} vs {b.shape}")
    if min(a.shape) < 11:
        raise ValueError(f"ssim needs at least 11x11 pixels, got {a.shape}")
    win = gaussian_window()
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    mu_a, mu_b = _filter_valid(a, win), _filter_valid(b, win)
    var_a = _filter_valid(a * a, win) - mu_a * mu_a
    var_b = _filter_valid(b * b, win) - mu_b * mu_b
    cov = _filter_valid(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class VarianceDecomposition:
    sigma_total_sq: float
    sigma_texture_sq: float
    sigma_noise_sq: float

    @property
    def additivity_gap(self) -> float:
        """Relative deviation of the total from texture + noise."""
        if self.sigma_total_sq == 0:
            return 0.0
        return abs(self.sigma_total_sq - self.sigma_texture_sq - self.sigma_noise_sq) / self.sigma_total_sq


def variance_decompose(clean, noisy) -> VarianceDecomposition:
    clean = np.asarray(clean, dtype=np.float64)
    noisy = np.asarray(noisy, dtype=np.float64)
    if clean.shape != noisy.shape:
        raise ValueError(f"variance_decompose: shapes differ {clean.shape} vs {noisy.shape}")
    return VarianceDecomposition(
        sigma_total_sq=float(np.var(noisy)),
        sigma_texture_sq=float(np.var(clean)),
        sigma_noise_sq=float(np.var(noisy - clean)),
    )
