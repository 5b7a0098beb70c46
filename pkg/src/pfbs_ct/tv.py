"""Anisotropic total-variation reconstruction by ADMM.

Solves ``min_x 1/2 ||Ax - y||_W^2 + lambda ||grad x||_1`` with the splitting
``z = grad x``:

    x <- argmin 1/2||Ax - y||^2 + mu/2 ||grad x - z + p/mu||^2     (CG)
    z <- shrink(grad x + p/mu, lambda/mu)
    p <- p + mu (grad x - z)
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .fbp import FbpOperator
from .geometry import FidelityWeights, Image, Sinogram
from .projector import Projector

log = logging.getLogger(__name__)

# lambda per incident intensity, tuned on full-size prostate data; desk
# problems may need different values.
TV_LAMBDA_BY_DOSE = {1e5: 0.01, 5e4: 0.01, 1e4: 0.03, 5e3: 0.05}


@dataclass(frozen=True)
class TvParams:
    lam: float = 0.01
    mu: float = 1.0
    outer_iters: int = 50
    cg_iters: int = 20
    cg_tol: float = 1e-6

    def __post_init__(self):
        if self.lam <= 0 or self.mu < 0:
            raise ValueError("need lam > 0 and mu >= 0")
        if self.outer_iters < 0 or self.cg_iters < 0:
            raise ValueError("iteration counts must be >= 0")

    @classmethod
    def for_dose(cls, intensity: float, **kw) -> "TvParams":
        return cls(lam=TV_LAMBDA_BY_DOSE[float(intensity)], **kw)


@dataclass
class TvState:
    x: np.ndarray
    z: np.ndarray
    p: np.ndarray
    history: list = field(default_factory=list)

    @classmethod
    def start(cls, x0: np.ndarray) -> "TvState":
        x0 = np.array(x0, dtype=np.float64)
        return cls(x0, grad(x0), np.zeros((2,) + x0.shape))


def grad(x: np.ndarray) -> np.ndarray:
    """Forward differences ``(horizontal, vertical)``; zero across the last column/row."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros((2,) + x.shape)
    g[0, :, :-1] = x[:, 1:] - x[:, :-1]
    g[1, :-1, :] = x[1:, :] - x[:-1, :]
    return g


def grad_adjoint(v: np.ndarray) -> np.ndarray:
    """Exact transpose of :func:`grad` (negative divergence)."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 3 or v.shape[0] != 2:
        raise ValueError(f"expected a (2, H, W) field, got {v.shape}")
    h, w = v[0], v[1]
    out = np.zeros(v.shape[1:])
    out[:, :-1] -= h[:, :-1]
    out[:, 1:] += h[:, :-1]
    out[:-1, :] -= w[:-1, :]
    out[1:, :] += w[:-1, :]
    return out


def shrink(t, threshold: float):
    return np.sign(t) * np.maximum(np.abs(t) - threshold, 0.0)


class _Normal:
    """``x -> A^T W A x + mu grad^T grad x`` and matching right-hand side."""

    def __init__(self, proj: Projector, weights: FidelityWeights | None):
        self.proj = proj
        self.w = None if weights is None or weights.is_identity else weights.weights

    def data_term(self, x):
        r = self.proj.forward(x)
        if self.w is not None:
            r = self.w * r
        return self.proj.adjoint(r)

    def rhs_data(self, y):
        return self.proj.adjoint(y if self.w is None else self.w * y)


def conjugate_gradient(apply, b, x0, n_iter, tol):
    """Plain CG on a symmetric positive semi-definite operator; returns ``(x, iters, rel_res)``."""
    x = x0.copy()
    r = b - apply(x)
    d = r.copy()
    rr = float(np.vdot(r, r))
    bnorm = float(np.linalg.norm(b)) or 1.0
    it = 0
    for it in range(1, n_iter + 1):
        if np.sqrt(rr) <= tol * bnorm:
            it -= 1
            break
        ad = apply(d)
        dad = float(np.vdot(d, ad))
        if dad <= 0.0:
            log.warning("CG breakdown at iteration %d (d^T A d = %g)", it, dad)
            break
        alpha = rr / dad
        x += alpha * d
        r -= alpha * ad
        rr_new = float(np.vdot(r, r))
        d = r + (rr_new / rr) * d
        rr = rr_new
    return x, it, np.sqrt(rr) / bnorm


def x_update(state: TvState, proj: Projector, y: np.ndarray, params: TvParams,
             weights: FidelityWeights | None = None) -> np.ndarray:
    if params.cg_iters == 0:
        return state.x
    normal = _Normal(proj, weights)
    mu = params.mu
    b = normal.rhs_data(y)
    if mu > 0:
        b = b + mu * grad_adjoint(state.z - state.p / mu)

    def apply(v):
        out = normal.data_term(v)
        if mu > 0:
            out = out + mu * grad_adjoint(grad(v))
        return out

    x, _, _ = conjugate_gradient(apply, b, state.x, params.cg_iters, params.cg_tol)
    return x


def z_update(state: TvState, params: TvParams) -> np.ndarray:
    return shrink(grad(state.x) + state.p / params.mu, params.lam / params.mu)


def dual_update(state: TvState, params: TvParams) -> np.ndarray:
    return state.p + params.mu * (grad(state.x) - state.z)


def tv_objective(proj: Projector, y: np.ndarray, x: np.ndarray, lam: float,
                 weights: FidelityWeights | None = None) -> float:
    r = proj.forward(x) - y
    w = None if weights is None or weights.is_identity else weights.weights
    fid = 0.5 * float(np.sum(r * r if w is None else w * r * r))
    return fid + lam * float(np.abs(grad(x)).sum())


def primal_residual(state: TvState) -> float:
    """``||grad x - z|| / ||grad x||``."""
    g = grad(state.x)
    return float(np.linalg.norm(g - state.z) / max(np.linalg.norm(g), 1e-300))


def run_admm(proj: Projector, y: np.ndarray, params: TvParams, x0: np.ndarray,
             weights: FidelityWeights | None = None) -> TvState:
    state = TvState.start(x0)
    for k in range(params.outer_iters):
        state.x = x_update(state, proj, y, params, weights)
        state.z = z_update(state, params)
        state.p = dual_update(state, params)
        state.history.append({
            "iter": k,
            "objective": tv_objective(proj, y, state.x, params.lam, weights),
            "primal_residual": primal_residual(state),
        })
    return state


def reconstruct_tv(proj: Projector, y: Sinogram, params: TvParams, init: Image | None = None,
                   weights: FidelityWeights | None = None) -> Image:
    proj.check_sinogram(y)
    if init is None:
        init = Image(FbpOperator.for_projector(proj).reconstruct(y.values), proj.pixel_size)
    else:
        proj.check_image(init)
    if params.outer_iters == 0:
        return init
    state = run_admm(proj, y.values, params, init.values, weights)
    return Image(state.x, proj.pixel_size)
