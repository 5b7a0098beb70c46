"""Low-dose projection simulation: Poisson photon counts plus Gaussian electronic noise."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .geometry import Image, Sinogram
from .projector import Projector, forward_project

log = logging.getLogger(__name__)

DOSE_LEVELS = (1e5, 5e4, 1e4, 5e3)
COUNT_FLOOR = 1.0


@dataclass(frozen=True)
class NoiseModel:
    incident_intensity: float = 5e4
    electronic_variance: float = 10.0
    rng_seed: int = 0

    def __post_init__(self):
        if not self.incident_intensity > 0:
            raise ValueError("incident_intensity must be positive")
        if self.electronic_variance < 0:
            raise ValueError("electronic_variance must be >= 0")

    def generator(self) -> np.random.Generator:
        # Philox is counter-based: the stream for a seed is fixed and can be
        # split with .jumped() for parallel workers.
        return np.random.Generator(np.random.Philox(self.rng_seed))


def simulate_counts(m: NoiseModel, clean: Sinogram) -> Sinogram:
    """Draw ``Poisson(I * exp(-clean)) + Normal(0, sigma_e^2)`` per bin."""
    if clean.domain != "post_log":
        raise ValueError("simulate_counts expects line integrals (post_log)")
    line = clean.values
    if np.any(line < 0):
        log.warning("%d negative line integrals in clean sinogram", int(np.sum(line < 0)))
    rng = m.generator()
    counts = rng.poisson(m.incident_intensity * np.exp(-line)).astype(np.float64)
    if m.electronic_variance > 0:
        counts += rng.normal(0.0, np.sqrt(m.electronic_variance), size=line.shape)
    return Sinogram(counts, "pre_log_counts")


def log_transform(m: NoiseModel, counts: Sinogram) -> Sinogram:
    """``ln(I / max(counts, 1))``; counts below one photon are floored."""
    if counts.domain != "pre_log_counts":
        raise ValueError("log_transform expects pre_log_counts data")
    floored = np.maximum(counts.values, COUNT_FLOOR)
    return Sinogram(np.log(m.incident_intensity / floored), "post_log")


def make_low_dose_pair(x: Image, p: Projector, m: NoiseModel) -> tuple[Sinogram, Image]:
    clean = forward_project(p, x)
    return log_transform(m, simulate_counts(m, clean)), x
