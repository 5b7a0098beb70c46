"""Filtered backprojection for equidistant (flat-panel) fan-beam data.

The detector is rescaled to a virtual detector through the isocentre, with
``s = u * SID / SDD``. Reconstruction then follows the usual three steps:

1. weight each bin by ``D / sqrt(D^2 + s^2)`` (``D`` = source-to-isocentre);
2. convolve each view with the band-limited Ram-Lak kernel, times ``ds / 2``;
3. backproject with linear interpolation in ``s`` and weight ``1 / U^2``,
   ``U = (D - p . e_src) / D``, summed over views times the angular step.

Every step is linear, and ``FbpOperator.adjoint`` is the exact transpose of
``FbpOperator.reconstruct``. The operator doubles as the preconditioner in
the unrolled network.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit, prange

from .geometry import Image, ScanGeometry, Sinogram
from .projector import Projector


def ramp_kernel(n_taps: int, bin_size: float) -> np.ndarray:
    """Ram-Lak taps ``h(n)`` for ``n = -(n_taps-1) .. n_taps-1``."""
    n = np.arange(-(n_taps - 1), n_taps)
    h = np.zeros(n.shape)
    h[n == 0] = 1.0 / (4.0 * bin_size**2)
    odd = n % 2 == 1
    h[odd] = -1.0 / (math.pi**2 * n[odd].astype(np.float64) ** 2 * bin_size**2)
    return h


def _padded_length(n: int) -> int:
    return 1 << max(1, (2 * n - 1).bit_length())


def _kernel_spectrum(n: int, bin_size: float) -> np.ndarray:
    pad = _padded_length(n)
    taps = ramp_kernel(n, bin_size)
    kernel = np.zeros(pad)
    kernel[:n] = taps[n - 1:]
    kernel[pad - (n - 1):] = taps[: n - 1]
    return np.fft.rfft(kernel)


def ramp_filter_row(row: np.ndarray, bin_size: float, spectrum: np.ndarray | None = None) -> np.ndarray:
    """Linear (non-circular) convolution of ``row`` with the Ram-Lak kernel.

    Works on the last axis, so a whole sinogram can be filtered at once.
    Output bin ``i`` is ``sum_m h(i - m) row[m]``; no ``bin_size`` factor is
    applied beyond the one inside ``h``. The zero padding to a power of two
    >= ``2n - 1`` keeps the FFT product free of circular wrap-around.
    """
    row = np.asarray(row, dtype=np.float64)
    n = row.shape[-1]
    pad = _padded_length(n)
    if spectrum is None:
        spectrum = _kernel_spectrum(n, bin_size)
    out = np.fft.irfft(np.fft.rfft(row, n=pad, axis=-1) * spectrum, n=pad, axis=-1)
    return out[..., :n]


@njit(parallel=True, cache=True)
def _backproject(q, sin_b, cos_b, d, ds, width, height, ps, out):
    n_views, n_bins = q.shape
    centre = 0.5 * (n_bins - 1)
    for r in prange(height):
        y = (0.5 * height - r - 0.5) * ps
        for c in range(width):
            x = (c - 0.5 * width + 0.5) * ps
            acc = 0.0
            for v in range(n_views):
                t = -x * sin_b[v] + y * cos_b[v]
                e = x * cos_b[v] + y * sin_b[v]
                dist = d - t
                s = d * e / dist
                f = s / ds + centre
                i0 = int(math.floor(f))
                w = f - i0
                val = 0.0
                if 0 <= i0 < n_bins:
                    val += (1.0 - w) * q[v, i0]
                if 0 <= i0 + 1 < n_bins:
                    val += w * q[v, i0 + 1]
                acc += val * (d * d) / (dist * dist)
            out[r, c] = acc


@njit(parallel=True, cache=True)
def _backproject_adjoint(img, sin_b, cos_b, d, ds, width, height, ps, out):
    n_views, n_bins = out.shape
    centre = 0.5 * (n_bins - 1)
    for v in prange(n_views):
        for r in range(height):
            y = (0.5 * height - r - 0.5) * ps
            for c in range(width):
                x = (c - 0.5 * width + 0.5) * ps
                t = -x * sin_b[v] + y * cos_b[v]
                e = x * cos_b[v] + y * sin_b[v]
                dist = d - t
                s = d * e / dist
                f = s / ds + centre
                i0 = int(math.floor(f))
                w = f - i0
                val = img[r, c] * (d * d) / (dist * dist)
                if 0 <= i0 < n_bins:
                    out[v, i0] += (1.0 - w) * val
                if 0 <= i0 + 1 < n_bins:
                    out[v, i0 + 1] += w * val


class FbpOperator:
    """Linear FBP map from a post-log sinogram to an image on a fixed grid."""

    filter = "ram_lak"

    def __init__(self, geometry: ScanGeometry, image_shape: tuple[int, int, float]):
        width, height, pixel_size = image_shape
        self.geometry = geometry
        self.image_shape = (int(width), int(height), float(pixel_size))
        g = geometry
        d = g.source_to_isocenter
        self._d = d
        self._ds = g.detector_pixel_size * d / g.source_to_detector
        s = g.bin_centers() * d / g.source_to_detector
        self._cos_weight = d / np.sqrt(d * d + s * s)
        beta = g.angles()
        self._sin_b = np.sin(beta)
        self._cos_b = np.cos(beta)
        self._dbeta = g.angular_span / g.n_views
        # the 1/2 accounts for a full orbit measuring every line twice
        self._scale = 0.5 * self._ds * self._dbeta
        self.filter_taps = ramp_kernel(g.n_bins, self._ds)
        self._spectrum = _kernel_spectrum(g.n_bins, self._ds)

    @classmethod
    def for_projector(cls, p: Projector) -> "FbpOperator":
        return cls(p.geometry, p.image_shape)

    @property
    def width(self) -> int:
        return self.image_shape[0]

    @property
    def height(self) -> int:
        return self.image_shape[1]

    @property
    def pixel_size(self) -> float:
        return self.image_shape[2]

    @property
    def virtual_bin_size(self) -> float:
        return self._ds

    def reconstruct(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        g = self.geometry
        if y.shape != (g.n_views, g.n_bins):
            raise ValueError(f"sinogram shape {y.shape} != geometry {(g.n_views, g.n_bins)}")
        q = ramp_filter_row(y * self._cos_weight, self._ds, self._spectrum) * self._scale
        out = np.empty((self.height, self.width))
        _backproject(np.ascontiguousarray(q), self._sin_b, self._cos_b, self._d, self._ds,
                     self.width, self.height, self.pixel_size, out)
        return out

    def adjoint(self, x: np.ndarray) -> np.ndarray:
        x = np.ascontiguousarray(x, dtype=np.float64)
        if x.shape != (self.height, self.width):
            raise ValueError(f"image shape {x.shape} != grid {(self.height, self.width)}")
        g = self.geometry
        q = np.zeros((g.n_views, g.n_bins))
        _backproject_adjoint(x, self._sin_b, self._cos_b, self._d, self._ds,
                             self.width, self.height, self.pixel_size, q)
        # the Ram-Lak convolution matrix is symmetric
        return ramp_filter_row(q * self._scale, self._ds, self._spectrum) * self._cos_weight


def fbp_reconstruct(op: FbpOperator, y: Sinogram) -> Image:
    if (y.n_views, y.n_bins) != (op.geometry.n_views, op.geometry.n_bins):
        raise ValueError("sinogram does not match the FBP geometry")
    if y.domain != "post_log":
        raise ValueError("FBP needs post-log (line integral) data")
    return Image(op.reconstruct(y.values), op.pixel_size)


def fbp_adjoint(op: FbpOperator, x: Image) -> Sinogram:
    if x.shape != (op.height, op.width):
        raise ValueError(f"image shape {x.shape} != grid {(op.height, op.width)}")
    return Sinogram(op.adjoint(x.values), "post_log")
