"""Test-time enhancement: map smoothing, Retinex division and guided denoising.

Images are ``(3, h, w)`` float arrays in ``[0, 1]``; maps are ``(h, w)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.fft import dctn, idctn

LUMA = np.array([0.299, 0.587, 0.114])
ILLUM_FLOOR = 1e-3


@dataclass
class EnhanceConfig:
    epsilon_div: float = 1e-3
    guided_radius: int = 16
    guided_eps: float = 1e-3
    threshold_factor: float = 2.7
    block: int = 8
    block_stride: int = 4

    def __post_init__(self):
        for name, value in vars(self).items():
            if value <= 0:
                raise ValueError(f"EnhanceConfig.{name} must be positive")


def luminance(image: np.ndarray) -> np.ndarray:
    return np.tensordot(LUMA, np.asarray(image, dtype=np.float64), axes=1)


def window_starts(size: int, window: int, stride: int) -> list:
    """Window offsets at ``stride`` with the last window clamped to the border."""
    if size < window:
        raise ValueError(f"size {size} is smaller than the window {window}")
    n = (size - window) // stride + 1
    starts = [i * stride for i in range(n)]
    if starts[-1] + window < size:
        if n == 1:
            starts.append(size - window)
        else:
            starts[-1] = size - window
    return starts


# ---------------------------------------------------------------------------
# guided filter
# ---------------------------------------------------------------------------


def box_mean(x: np.ndarray, r: int) -> np.ndarray:
    """Mean over ``(2r+1)^2`` windows using an integral image, mirrored borders."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape
    p = np.pad(x, r, mode="reflect")
    s = np.zeros((p.shape[0] + 1, p.shape[1] + 1))
    s[1:, 1:] = p.cumsum(0).cumsum(1)
    k = 2 * r + 1
    total = s[k:k + h, k:k + w] - s[:h, k:k + w] - s[k:k + h, :w] + s[:h, :w]
    return total / (k * k)


def guided_filter(p: np.ndarray, guide: np.ndarray, r: int, eps: float) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    guide = np.asarray(guide, dtype=np.float64)
    if p.shape != guide.shape:
        raise ValueError(f"guided_filter: input {p.shape} and guide {guide.shape} differ")
    mean_i = box_mean(guide, r)
    mean_p = box_mean(p, r)
    cov_ip = box_mean(guide * p, r) - mean_i * mean_p
    var_i = box_mean(guide * guide, r) - mean_i * mean_i
    denom = var_i + eps
    a = np.divide(cov_ip, denom, out=np.zeros_like(cov_ip), where=denom > 0)
    b = mean_p - a * mean_i
    return box_mean(a, r) * guide + box_mean(b, r)


# ---------------------------------------------------------------------------
# Retinex division
# ---------------------------------------------------------------------------


def retinex_enhance(image: np.ndarray, illumination: np.ndarray, epsilon_div: float = 1e-3) -> np.ndarray:
    illum = np.maximum(np.asarray(illumination, dtype=np.float64), epsilon_div)
    return np.clip(np.asarray(image, dtype=np.float64) / illum[None], 0.0, 1.0)


def amplify_noise_map(sigma: np.ndarray, illumination: np.ndarray, epsilon_div: float = 1e-3) -> np.ndarray:
    illum = np.maximum(np.asarray(illumination, dtype=np.float64), epsilon_div)
    return np.clip(np.asarray(sigma, dtype=np.float64) / illum, 0.0, 1.0)


# ---------------------------------------------------------------------------
# transform-domain denoiser
# ---------------------------------------------------------------------------


def dct2(block: np.ndarray) -> np.ndarray:
    return dctn(block, type=2, norm="ortho", axes=(-2, -1))


def idct2(coef: np.ndarray) -> np.ndarray:
    return idctn(coef, type=2, norm="ortho", axes=(-2, -1))


def hard_threshold(coef: np.ndarray, threshold) -> np.ndarray:
    """Zero every non-DC coefficient whose magnitude does not exceed ``threshold``.

    ``threshold`` broadcasts against the leading (block) axes of ``coef``.
    """
    thr = np.asarray(threshold, dtype=np.float64)[..., None, None]
    keep = np.abs(coef) > thr
    keep[..., 0, 0] = True
    return np.where(keep, coef, 0.0)


def dct_denoise(image: np.ndarray, sigma: np.ndarray, cfg: EnhanceConfig | None = None) -> np.ndarray:
    """Sliding-block DCT hard-threshold denoising driven by a per-pixel noise map."""
    cfg = cfg or EnhanceConfig()
    image = np.asarray(image, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    c, h, w = image.shape
    if sigma.shape != (h, w):
        raise ValueError(f"noise map {sigma.shape} does not match image {(h, w)}")
    b = cfg.block
    if h < b or w < b:
        return image.copy()
    ys = np.array(window_starts(h, b, cfg.block_stride))
    xs = np.array(window_starts(w, b, cfg.block_stride))
    rows = ys[:, None, None, None] + np.arange(b)[None, None, :, None]
    cols = xs[None, :, None, None] + np.arange(b)[None, None, None, :]
    flat = (rows * w + cols)  # (ny, nx, b, b)
    # noise level at the block centre: mean of the four middle pixels
    mid = b // 2
    sig_blocks = 0.25 * (
        sigma[ys[:, None] + mid - 1, xs[None, :] + mid - 1] + sigma[ys[:, None] + mid - 1, xs[None, :] + mid]
        + sigma[ys[:, None] + mid, xs[None, :] + mid - 1] + sigma[ys[:, None] + mid, xs[None, :] + mid]
    )
    thr = cfg.threshold_factor * sig_blocks
    counts = np.bincount(flat.ravel(), minlength=h * w)
    out = np.empty_like(image)
    for ch in range(c):
        blocks = image[ch].ravel()[flat]
        den = idct2(hard_threshold(dct2(blocks), thr))
        acc = np.bincount(flat.ravel(), weights=den.ravel(), minlength=h * w)
        out[ch] = (acc / counts).reshape(h, w)
    passthrough = sigma <= 0
    if passthrough.any():
        out[:, passthrough] = image[:, passthrough]
    return out


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


def enhance_with_maps(image: np.ndarray, illumination: np.ndarray, noise: np.ndarray,
                      cfg: EnhanceConfig | None = None, denoise: bool = True) -> np.ndarray:
    """Everything after map estimation: smoothing, division, denoising."""
    cfg = cfg or EnhanceConfig()
    image = np.asarray(image, dtype=np.float64)
    smooth = guided_filter(illumination, luminance(image), cfg.guided_radius, cfg.guided_eps)
    smooth = np.clip(smooth, ILLUM_FLOOR, 1.0)
    enhanced = retinex_enhance(image, smooth, cfg.epsilon_div)
    if not denoise:
        return enhanced
    sigma_amp = amplify_noise_map(noise, smooth, cfg.epsilon_div)
    return np.clip(dct_denoise(enhanced, sigma_amp, cfg), 0.0, 1.0)


def enhance_pipeline(image: np.ndarray, models, cfg: EnhanceConfig | None = None, k: int | None = None,
                     prog_cfg=None, denoise: bool = True, baseline: bool = False) -> np.ndarray:
    """Estimate maps with the stage models, then enhance ``image``."""
    from .progressive import infer_maps

    illum, noise = infer_maps(models, image, prog_cfg, k=k, baseline=baseline)
    return enhance_with_maps(image, illum, noise, cfg, denoise)
