"""Matrix-free fan-beam system operator with exact Siddon intersection lengths.

``Projector.forward`` computes ``(A x)_i = sum_j a_ij x_j`` where ``a_ij`` is
the length (cm) of ray ``i`` inside pixel ``j``; one ray per detector-bin
centre, from the source point to the bin centre. ``Projector.adjoint`` reuses
the same traversal so the pair is an exact transpose up to rounding.
"""
from __future__ import annotations

import math

import numba
import numpy as np
from numba import njit, prange

from .geometry import FidelityWeights, Image, ScanGeometry, Sinogram

# The bundled TBB is too old for numba; skip straight to the portable layers.
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

# Views per private accumulation buffer in the adjoint. Fixed, so the
# reduction order does not depend on the number of threads.
ADJOINT_CHUNK = 16


@njit(cache=True, fastmath=False)
def _trace(gx0, gy0, gx1, gy1, width, height, length, idx, seg):
    """Walk one ray through the grid in pixel units.

    ``(gx, gy)`` are continuous (column, row) coordinates with the grid
    occupying ``[0, width] x [0, height]``; ``length`` is the world length of
    the full segment. Fills ``idx``/``seg`` and returns the number of pixels hit.
    """
    dx = gx1 - gx0
    dy = gy1 - gy0
    amin = 0.0
    amax = 1.0
    if dx != 0.0:
        a1 = (0.0 - gx0) / dx
        a2 = (width - gx0) / dx
        amin = max(amin, min(a1, a2))
        amax = min(amax, max(a1, a2))
    elif gx0 <= 0.0 or gx0 >= width:
        return 0
    if dy != 0.0:
        a1 = (0.0 - gy0) / dy
        a2 = (height - gy0) / dy
        amin = max(amin, min(a1, a2))
        amax = min(amax, max(a1, a2))
    elif gy0 <= 0.0 or gy0 >= height:
        return 0
    if amin >= amax:
        return 0

    inf = np.inf
    # next plane index along each axis, recomputed from the integer plane
    # index each time to avoid drift
    if dx > 0.0:
        ix = math.floor(gx0 + amin * dx) + 1
        ax = (ix - gx0) / dx
        sx = 1
    elif dx < 0.0:
        ix = math.ceil(gx0 + amin * dx) - 1
        ax = (ix - gx0) / dx
        sx = -1
    else:
        ix = 0
        ax = inf
        sx = 0
    if dy > 0.0:
        iy = math.floor(gy0 + amin * dy) + 1
        ay = (iy - gy0) / dy
        sy = 1
    elif dy < 0.0:
        iy = math.ceil(gy0 + amin * dy) - 1
        ay = (iy - gy0) / dy
        sy = -1
    else:
        iy = 0
        ay = inf
        sy = 0

    n = 0
    a = amin
    while a < amax:
        anext = min(ax, ay, amax)
        if anext > a:
            mid = 0.5 * (a + anext)
            col = int(math.floor(gx0 + mid * dx))
            row = int(math.floor(gy0 + mid * dy))
            if 0 <= col < width and 0 <= row < height:
                idx[n] = row * width + col
                seg[n] = (anext - a) * length
                n += 1
        if ax <= anext:
            ix += sx
            ax = (ix - gx0) / dx
        if ay <= anext:
            iy += sy
            ay = (iy - gy0) / dy
        a = anext
    return n


@njit(cache=True)
def _to_grid(x, y, width, height, ps):
    return (x + 0.5 * width * ps) / ps, (0.5 * height * ps - y) / ps


@njit(parallel=True, cache=True)
def _forward_kernel(img_flat, src, det, width, height, ps, out):
    n_views, n_bins = out.shape
    maxn = 2 * (width + height) + 4
    for v in prange(n_views):
        idx = np.empty(maxn, np.int64)
        seg = np.empty(maxn, np.float64)
        sx, sy = src[v, 0], src[v, 1]
        gx0, gy0 = _to_grid(sx, sy, width, height, ps)
        for b in range(n_bins):
            tx, ty = det[v, b, 0], det[v, b, 1]
            gx1, gy1 = _to_grid(tx, ty, width, height, ps)
            length = math.sqrt((tx - sx) ** 2 + (ty - sy) ** 2)
            n = _trace(gx0, gy0, gx1, gy1, width, height, length, idx, seg)
            acc = 0.0
            for k in range(n):
                acc += img_flat[idx[k]] * seg[k]
            out[v, b] = acc


@njit(parallel=True, cache=True)
def _adjoint_kernel(sino, src, det, width, height, ps, chunk, partials):
    n_views, n_bins = sino.shape
    n_chunks = partials.shape[0]
    maxn = 2 * (width + height) + 4
    for c in prange(n_chunks):
        idx = np.empty(maxn, np.int64)
        seg = np.empty(maxn, np.float64)
        buf = partials[c]
        for v in range(c * chunk, min((c + 1) * chunk, n_views)):
            sx, sy = src[v, 0], src[v, 1]
            gx0, gy0 = _to_grid(sx, sy, width, height, ps)
            for b in range(n_bins):
                val = sino[v, b]
                if val == 0.0:
                    continue
                tx, ty = det[v, b, 0], det[v, b, 1]
                gx1, gy1 = _to_grid(tx, ty, width, height, ps)
                length = math.sqrt((tx - sx) ** 2 + (ty - sy) ** 2)
                n = _trace(gx0, gy0, gx1, gy1, width, height, length, idx, seg)
                for k in range(n):
                    buf[idx[k]] += val * seg[k]


def ray_endpoints(geometry: ScanGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Source positions ``(n_views, 2)`` and bin centres ``(n_views, n_bins, 2)`` in cm."""
    beta = geometry.angles()
    sin_b, cos_b = np.sin(beta), np.cos(beta)
    sid = geometry.source_to_isocenter
    back = geometry.source_to_detector - sid
    src = np.stack([-sid * sin_b, sid * cos_b], axis=1)
    centre = np.stack([back * sin_b, -back * cos_b], axis=1)
    axis = np.stack([cos_b, sin_b], axis=1)
    u = geometry.bin_centers()
    det = centre[:, None, :] + u[None, :, None] * axis[:, None, :]
    return src, det


class Projector:
    """Forward projector ``A`` and its exact adjoint for one geometry and image grid.

    ``image_shape`` is ``(width, height, pixel_size)``.
    """

    method = "siddon"

    def __init__(self, geometry: ScanGeometry, image_shape: tuple[int, int, float]):
        width, height, pixel_size = image_shape
        if width < 1 or height < 1 or pixel_size <= 0:
            raise ValueError(f"invalid image shape {image_shape}")
        self.geometry = geometry
        self.image_shape = (int(width), int(height), float(pixel_size))
        self._src, self._det = ray_endpoints(geometry)
        self._src.setflags(write=False)
        self._det.setflags(write=False)

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
    def sino_shape(self) -> tuple[int, int]:
        return (self.geometry.n_views, self.geometry.n_bins)

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.ascontiguousarray(x, dtype=np.float64)
        if x.shape != (self.height, self.width):
            raise ValueError(f"image shape {x.shape} != projector grid {(self.height, self.width)}")
        out = np.empty(self.sino_shape)
        _forward_kernel(x.ravel(), self._src, self._det, self.width, self.height, self.pixel_size, out)
        return out

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        y = np.ascontiguousarray(y, dtype=np.float64)
        if y.shape != self.sino_shape:
            raise ValueError(f"sinogram shape {y.shape} != geometry {self.sino_shape}")
        n_chunks = -(-self.geometry.n_views // ADJOINT_CHUNK)
        partials = np.zeros((n_chunks, self.height * self.width))
        _adjoint_kernel(y, self._src, self._det, self.width, self.height, self.pixel_size,
                        ADJOINT_CHUNK, partials)
        out = partials[0].copy()
        for c in range(1, n_chunks):
            out += partials[c]
        return out.reshape(self.height, self.width)

    def norm_squared(self, n_iter: int = 50, seed: int = 0) -> float:
        """Power-iteration estimate of the largest eigenvalue of ``A^T A``."""
        rng = np.random.default_rng(seed)
        v = rng.random((self.height, self.width))
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(n_iter):
            w = self.adjoint(self.forward(v))
            lam = float(np.linalg.norm(w))
            if lam == 0.0:
                return 0.0
            v = w / lam
        return lam

    def check_image(self, x: Image) -> None:
        if x.shape != (self.height, self.width) or not math.isclose(x.pixel_size, self.pixel_size):
            raise ValueError(
                f"image {x.width}x{x.height}@{x.pixel_size} does not match projector grid "
                f"{self.width}x{self.height}@{self.pixel_size}"
            )

    def check_sinogram(self, y: Sinogram) -> None:
        if (y.n_views, y.n_bins) != self.sino_shape:
            raise ValueError(f"sinogram {(y.n_views, y.n_bins)} does not match geometry {self.sino_shape}")


def set_threads(n: int | None) -> None:
    """Numba worker count, clamped to the available cores; ``None`` uses all of them."""
    top = numba.config.NUMBA_NUM_THREADS
    numba.set_num_threads(top if n is None else max(1, min(int(n), top)))


def forward_project(p: Projector, x: Image) -> Sinogram:
    p.check_image(x)
    return Sinogram(p.forward(x.values), "post_log")


def back_project(p: Projector, y: Sinogram) -> Image:
    p.check_sinogram(y)
    return Image(p.adjoint(y.values), p.pixel_size)


def apply_weights(w: FidelityWeights, y: Sinogram) -> Sinogram:
    if w.is_identity:
        return y
    if w.weights.shape != y.values.shape:
        raise ValueError(f"weights shape {w.weights.shape} != sinogram shape {y.values.shape}")
    return Sinogram(w.weights * y.values, y.domain)
