"""Synthetic phantoms: the Shepp-Logan head and random ellipse ensembles."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Image

# (intensity, semi-axis a, semi-axis b, centre x, centre y, rotation in degrees)
# on the square [-1, 1]^2, Shepp & Logan (1974).
SHEPP_LOGAN = (
    (2.00, 0.6900, 0.9200, 0.00, 0.0000, 0.0),
    (-0.98, 0.6624, 0.8740, 0.00, -0.0184, 0.0),
    (-0.02, 0.1100, 0.3100, 0.22, 0.0000, -18.0),
    (-0.02, 0.1600, 0.4100, -0.22, 0.0000, 18.0),
    (0.01, 0.2100, 0.2500, 0.00, 0.3500, 0.0),
    (0.01, 0.0460, 0.0460, 0.00, 0.1000, 0.0),
    (0.01, 0.0460, 0.0460, 0.00, -0.1000, 0.0),
    (0.01, 0.0460, 0.0230, -0.08, -0.6050, 0.0),
    (0.01, 0.0230, 0.0230, 0.00, -0.6060, 0.0),
    (0.01, 0.0230, 0.0460, 0.06, -0.6050, 0.0),
)


def _unit_grid(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-centre coordinates on [-1, 1]^2 (x right, y up, row 0 at the top)."""
    xs = (np.arange(width) - 0.5 * width + 0.5) * (2.0 / width)
    ys = (0.5 * height - np.arange(height) - 0.5) * (2.0 / height)
    return np.meshgrid(xs, ys)


def ellipse_mask(x, y, a, b, x0, y0, phi_rad) -> np.ndarray:
    c, s = math.cos(phi_rad), math.sin(phi_rad)
    dx, dy = x - x0, y - y0
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def rasterize(ellipses, width: int, height: int) -> np.ndarray:
    """Sum of ellipse indicator functions sampled at pixel centres."""
    x, y = _unit_grid(width, height)
    out = np.zeros((height, width))
    for mu, a, b, x0, y0, phi in ellipses:
        out[ellipse_mask(x, y, a, b, x0, y0, math.radians(phi))] += mu
    return out


def shepp_logan(width: int, pixel_size: float | None = None, scale: float = 1.0) -> Image:
    """Standard 10-ellipse Shepp-Logan phantom on a ``width x width`` grid.

    ``scale`` multiplies every intensity (e.g. ``0.1`` brings the brain region
    near water attenuation in 1/cm). ``pixel_size`` defaults to ``6.4 / width``.
    """
    if width < 16:
        raise ValueError(f"Shepp-Logan needs width >= 16, got {width}")
    if pixel_size is None:
        pixel_size = 6.4 / width
    values = rasterize(SHEPP_LOGAN, width, width) * scale
    return Image(np.maximum(values, 0.0), pixel_size)


@dataclass(frozen=True)
class EllipsePhantomSpec:
    """Random ellipse ensemble: one body ellipse plus ``n_ellipses`` inserts.

    Lengths are fractions of the half field of view; intensities are in 1/cm.
    Insert intensities are added to the body and the sum is clamped at zero.
    """

    n_ellipses: tuple[int, int] = (3, 8)
    body_intensity: tuple[float, float] = (0.17, 0.22)
    body_axes: tuple[float, float] = (0.6, 0.9)
    intensity: tuple[float, float] = (-0.08, 0.12)
    axes: tuple[float, float] = (0.05, 0.3)
    centers: tuple[float, float] = (-0.45, 0.45)
    rotation: tuple[float, float] = (0.0, 180.0)
    seed: int = 0

    def ellipses(self, index: int) -> list[tuple]:
        rng = np.random.default_rng([self.seed, index])
        out = [(
            rng.uniform(*self.body_intensity),
            rng.uniform(*self.body_axes),
            rng.uniform(*self.body_axes),
            0.0,
            0.0,
            rng.uniform(*self.rotation),
        )]
        n = int(rng.integers(self.n_ellipses[0], self.n_ellipses[1] + 1))
        for _ in range(n):
            out.append((
                rng.uniform(*self.intensity),
                rng.uniform(*self.axes),
                rng.uniform(*self.axes),
                rng.uniform(*self.centers),
                rng.uniform(*self.centers),
                rng.uniform(*self.rotation),
            ))
        return out


def generate_ellipse_phantom(spec: EllipsePhantomSpec, index: int, width: int = 64,
                             pixel_size: float = 0.1) -> Image:
    values = rasterize(spec.ellipses(index), width, width)
    return Image(np.maximum(values, 0.0), pixel_size)
