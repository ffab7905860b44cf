"""Image quality metrics: MSE, PSNR, SSIM, MS-SSIM, and bits per pixel.

SSIM and MS-SSIM operate on luma (BT.601 weights) with an 11x11 Gaussian
window (sigma 1.5), K1=0.01, K2=0.03, L=255, averaging over valid window
positions only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WINDOW = 11
SIGMA = 1.5
K1, K2, L = 0.01, 0.03, 255.0


def _as_float(img) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 3 and a.shape[0] == 3 and a.shape[-1] != 3:
        a = a.transpose(1, 2, 0)
    return a


def _check_dims(a, b):
    if a.shape != b.shape:
        raise ValueError(f"image dims differ: {a.shape} vs {b.shape}")


def mse(a, b) -> float:
    a, b = _as_float(a), _as_float(b)
    _check_dims(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    """10*log10(255^2 / MSE); ``math.inf`` for identical images."""
    e = mse(a, b)
    if e == 0:
        return math.inf
    return 10.0 * math.log10(255.0 ** 2 / e)


def luma(img) -> np.ndarray:
    a = _as_float(img)
    if a.ndim == 2:
        return a
    return a[..., 0] * 0.299 + a[..., 1] * 0.587 + a[..., 2] * 0.114


def _gauss_1d() -> np.ndarray:
    x = np.arange(WINDOW) - (WINDOW - 1) / 2
    g = np.exp(-x ** 2 / (2 * SIGMA ** 2))
    return g / g.sum()


def _filter_valid(a: np.ndarray) -> np.ndarray:
    g = _gauss_1d()
    win = np.lib.stride_tricks.sliding_window_view(a, WINDOW, axis=0)
    a = win @ g
    win = np.lib.stride_tricks.sliding_window_view(a, WINDOW, axis=1)
    return win @ g


def _ssim_terms(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """(mean SSIM, mean contrast-structure) over valid window positions."""
    if min(x.shape) < WINDOW:
        raise ValueError(f"image {x.shape} smaller than the {WINDOW}x{WINDOW} SSIM window")
    c1, c2 = (K1 * L) ** 2, (K2 * L) ** 2
    mx, my = _filter_valid(x), _filter_valid(y)
    sxx = _filter_valid(x * x) - mx * mx
    syy = _filter_valid(y * y) - my * my
    sxy = _filter_valid(x * y) - mx * my
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    return float(np.mean(lum * cs)), float(np.mean(cs))


def ssim(a, b) -> float:
    a, b = _as_float(a), _as_float(b)
    _check_dims(a, b)
    return _ssim_terms(luma(a), luma(b))[0]


def _downsample(a: np.ndarray) -> np.ndarray:
    h, w = (a.shape[0] // 2) * 2, (a.shape[1] // 2) * 2
    a = a[:h, :w]
    return 0.25 * (a[0::2, 0::2] + a[1::2, 0::2] + a[0::2, 1::2] + a[1::2, 1::2])


def ms_ssim_scales(shape) -> int:
    """Number of dyadic scales an image of ``shape`` supports (at most 5)."""
    n, m = 0, min(shape[:2])
    while n < len(MS_SSIM_WEIGHTS) and m >= WINDOW:
        n += 1
        m //= 2
    return n


def ms_ssim(a, b, return_scales: bool = False):
    """Multi-scale SSIM on luma.

    Images too small for five scales use the largest supported count with
    the leading exponents renormalized to sum to one; ``return_scales``
    exposes the count so callers can flag reduced-scale values.
    Contrast-structure terms are clipped at zero before exponentiation.
    """
    a, b = _as_float(a), _as_float(b)
    _check_dims(a, b)
    x, y = luma(a), luma(b)
    n = ms_ssim_scales(x.shape)
    if n == 0:
        raise ValueError(f"image {x.shape} too small for MS-SSIM")
    weights = np.array(MS_SSIM_WEIGHTS[:n])
    if n < len(MS_SSIM_WEIGHTS):
        weights = weights / weights.sum()
    value = 1.0
    for i in range(n):
        s, cs = _ssim_terms(x, y)
        if i == n - 1:
            value *= max(s, 0.0) ** weights[i]
        else:
            value *= max(cs, 0.0) ** weights[i]
            x, y = _downsample(x), _downsample(y)
    value = float(value)
    return (value, n) if return_scales else value


def bpp(n_bytes: int, width: int, height: int) -> float:
    return 8.0 * n_bytes / (width * height)


@dataclass
class RdPoint:
    image: str
    codec: str
    bpp: float
    psnr: float
    ssim: float
    ms_ssim: float
    ms_ssim_scales: int = 5
    mse: float = 0.0


RD_FIELDS = ["image", "codec", "bpp", "psnr", "ssim", "ms_ssim", "ms_ssim_scales", "mse"]


def rd_point(image_id: str, codec: str, original, decoded, n_bytes: int) -> RdPoint:
    h, w = np.asarray(original).shape[:2]
    ms, scales = ms_ssim(original, decoded, return_scales=True)
    return RdPoint(image_id, codec, bpp(n_bytes, w, h), psnr(original, decoded),
                   ssim(original, decoded), ms, scales, mse(original, decoded))
