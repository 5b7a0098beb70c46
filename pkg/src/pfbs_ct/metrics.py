"""Image quality metrics.

``psnr`` uses the peak-over-total-squared-error form reported in the
low-dose PFBS experiments (no ``1/N``); ``psnr_conventional`` is the usual
MSE-based definition for comparison. The first argument is always the
reference (normal-dose) image.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import Image


def _arrays(x, x_star) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(x.values if isinstance(x, Image) else x, dtype=np.float64)
    b = np.asarray(x_star.values if isinstance(x_star, Image) else x_star, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(x, x_star) -> float:
    """``10 log10(max(x * x) / ||x - x_star||^2)`` in dB; ``inf`` for identical images."""
    a, b = _arrays(x, x_star)
    peak = float(np.max(a * a))
    if peak == 0.0:
        raise ValueError("reference image is all zero")
    err = float(np.sum((a - b) ** 2))
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(peak / err)


def psnr_conventional(x, x_star) -> float:
    a, b = _arrays(x, x_star)
    peak = float(np.max(a * a))
    if peak == 0.0:
        raise ValueError("reference image is all zero")
    mse = float(np.mean((a - b) ** 2))
    return math.inf if mse == 0.0 else 10.0 * math.log10(peak / mse)


def rmse(x, x_star) -> float:
    a, b = _arrays(x, x_star)
    return math.sqrt(float(np.mean((b - a) ** 2)))


def ssim(x, x_star, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float | None = None) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5).

    The dynamic range defaults to ``max(x) - min(x)`` of the reference, which
    makes the score depend on argument order; pass ``data_range`` for a
    symmetric comparison. The map is averaged over windows that fit inside
    the image (a 5-pixel border is dropped) when the image is large enough.
    """
    a, b = _arrays(x, x_star)
    if data_range is None:
        data_range = float(a.max() - a.min())
    elif not data_range > 0:
        raise ValueError("data_range must be positive")
    if data_range == 0.0:
        if np.array_equal(a, b):
            return 1.0
        data_range = float(max(np.abs(a).max(), np.abs(b).max(), 1.0))
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    # truncate=3.5 gives radius 5, i.e. an 11x11 window, at sigma=1.5
    filt = lambda z: gaussian_filter(z, sigma=sigma, truncate=3.5, mode="reflect")  # noqa: E731
    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a**2
    sbb = filt(b * b) - mu_b**2
    sab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    smap = num / den
    pad = 5
    if min(a.shape) > 2 * pad:
        smap = smap[pad:-pad, pad:-pad]
    return float(smap.mean())


@dataclass(frozen=True)
class MetricReport:
    psnr: float
    rmse: float
    ssim: float
    psnr_conventional: float

    def as_dict(self) -> dict:
        return {"psnr": self.psnr, "rmse": self.rmse, "ssim": self.ssim,
                "psnr_conventional": self.psnr_conventional}


def evaluate(reference, reconstruction) -> MetricReport:
    return MetricReport(
        psnr=psnr(reference, reconstruction),
        rmse=rmse(reference, reconstruction),
        ssim=ssim(reference, reconstruction),
        psnr_conventional=psnr_conventional(reference, reconstruction),
    )
