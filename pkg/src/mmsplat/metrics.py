"""PSNR and SSIM for float images in [0, 1].

SSIM uses an 11x11 Gaussian window (sigma 1.5) applied with zero padding so
the SSIM map has the image's shape, and the usual stabilizers
C1 = (0.01)^2, C2 = (0.03)^2 for unit dynamic range.
"""
from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

from .core import as_array

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2


def gaussian_kernel1d(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


_KERNEL = gaussian_kernel1d()


def _blur(x: np.ndarray) -> np.ndarray:
    # separable window over the two spatial axes, zero padding
    y = correlate1d(x, _KERNEL, axis=0, mode="constant", cval=0.0)
    return correlate1d(y, _KERNEL, axis=1, mode="constant", cval=0.0)


def _as_hwc(img) -> np.ndarray:
    a = as_array(img)
    if a.ndim == 2:
        a = a[:, :, None]
    return a


def ssim_map(x, y) -> np.ndarray:
    x, y = _as_hwc(x), _as_hwc(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    mu_x, mu_y = _blur(x), _blur(y)
    sxx = _blur(x * x) - mu_x * mu_x
    syy = _blur(y * y) - mu_y * mu_y
    sxy = _blur(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + C1) * (2 * sxy + C2)
    den = (mu_x * mu_x + mu_y * mu_y + C1) * (sxx + syy + C2)
    return num / den


def ssim(x, y) -> float:
    """Mean SSIM over pixels and channels."""
    return float(ssim_map(x, y).mean())


def ssim_and_grad(x, y):
    """Mean SSIM and its gradient with respect to ``x``."""
    x, y = _as_hwc(x), _as_hwc(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    mu_x, mu_y = _blur(x), _blur(y)
    sxx = _blur(x * x) - mu_x * mu_x
    syy = _blur(y * y) - mu_y * mu_y
    sxy = _blur(x * y) - mu_x * mu_y
    a1 = 2 * mu_x * mu_y + C1
    a2 = 2 * sxy + C2
    b1 = mu_x * mu_x + mu_y * mu_y + C1
    b2 = sxx + syy + C2
    r1, r2 = a1 / b1, a2 / b2
    s = r1 * r2
    n = s.size
    # partials of the SSIM map w.r.t. the local moments mu_x, E[x^2], E[xy]
    # grouped so both terms cancel exactly when x == y
    d_mu = 2 * (mu_y * (a2 - a1) - s * mu_x * (b2 - b1)) / (b1 * b2)
    d_exx = -s / b2
    d_exy = 2 * r1 / b2
    # the symmetric zero-padded blur is self-adjoint
    grad = _blur(d_mu) + 2 * x * _blur(d_exx) + y * _blur(d_exy)
    return float(s.mean()), grad / n


def mse(x, y) -> float:
    x, y = _as_hwc(x), _as_hwc(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return float(np.mean((x - y) ** 2))


def psnr(x, y) -> float:
    """10 log10(1 / MSE), capped at 100 dB for identical images."""
    m = mse(x, y)
    if m == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / m)))
