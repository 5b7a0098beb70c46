"""Images, sinograms and the flat-panel fan-beam scan geometry.

Conventions used everywhere in the package:

* world coordinates are in cm, the image is centred on the isocentre;
* pixel ``(0, 0)`` is the top-left pixel, rows run towards -y, columns towards +x;
* view ``i`` has source angle ``beta_i = i * angular_span / n_views``; at
  ``beta = 0`` the source sits on the +y axis and it rotates counter-clockwise;
* detector bin ``b`` is centred at ``u_b = (b - (n_bins - 1) / 2) * bin_size``
  along the detector axis ``(cos beta, sin beta)``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

Domain = Literal["post_log", "pre_log_counts"]


def _frozen_array(values, ndim: int, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, copy=True)
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Image:
    """2-D attenuation map in 1/cm, stored as a ``(height, width)`` float64 array."""

    values: np.ndarray
    pixel_size: float

    def __post_init__(self):
        arr = _frozen_array(self.values, 2, "image values")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("image must have at least one pixel")
        if not (self.pixel_size > 0 and math.isfinite(self.pixel_size)):
            raise ValueError(f"pixel_size must be positive, got {self.pixel_size}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image values must be finite")
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "pixel_size", float(self.pixel_size))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def same_as(self, other: "Image") -> bool:
        return (
            isinstance(other, Image)
            and self.pixel_size == other.pixel_size
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True, eq=False)
class Sinogram:
    """Projection data indexed ``(view, bin)``.

    ``domain`` is ``"post_log"`` for line integrals and ``"pre_log_counts"``
    for photon counts.
    """

    values: np.ndarray
    domain: Domain = "post_log"

    def __post_init__(self):
        arr = _frozen_array(self.values, 2, "sinogram values")
        if self.domain not in ("post_log", "pre_log_counts"):
            raise ValueError(f"unknown sinogram domain {self.domain!r}")
        if self.domain == "post_log" and not np.all(np.isfinite(arr)):
            raise ValueError("post_log sinogram values must be finite")
        # Gaussian electronic noise can push raw counts below zero; only the
        # noiseless (or clipped) count data is strictly nonnegative.
        if self.domain == "pre_log_counts" and np.any(np.isnan(arr)):
            raise ValueError("count sinogram contains NaN")
        object.__setattr__(self, "values", arr)

    @property
    def n_views(self) -> int:
        return self.values.shape[0]

    @property
    def n_bins(self) -> int:
        return self.values.shape[1]

    def same_as(self, other: "Sinogram") -> bool:
        return (
            isinstance(other, Sinogram)
            and self.domain == other.domain
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True)
class ScanGeometry:
    """Flat-panel fan-beam acquisition. Lengths in cm, angles in radians."""

    source_to_isocenter: float
    source_to_detector: float
    detector_pixel_size: float
    n_bins: int
    n_views: int
    angular_span: float = 2 * math.pi
    image_fov: float = 6.4

    def __post_init__(self):
        if not self.source_to_detector > self.source_to_isocenter > 0:
            raise ValueError("need source_to_detector > source_to_isocenter > 0")
        if self.detector_pixel_size <= 0:
            raise ValueError("detector_pixel_size must be positive")
        if self.n_bins < 1 or self.n_views < 1:
            raise ValueError("n_bins and n_views must be >= 1")
        if self.angular_span <= 0:
            raise ValueError("angular_span must be positive")
        if self.image_fov <= 0:
            raise ValueError("image_fov must be positive")
        if self.image_fov / math.sqrt(2) >= self.source_to_isocenter:
            raise ValueError("image FOV does not fit inside the source orbit")
        if self.half_fan_angle < self.fov_half_angle:
            raise ValueError(
                f"detector half-fan {self.half_fan_angle:.5f} rad does not cover "
                f"the image FOV half-angle {self.fov_half_angle:.5f} rad"
            )

    @property
    def half_fan_angle(self) -> float:
        half_width = 0.5 * self.n_bins * self.detector_pixel_size
        return math.atan(half_width / self.source_to_detector)

    @property
    def fov_half_angle(self) -> float:
        return math.asin((self.image_fov / math.sqrt(2)) / self.source_to_isocenter)

    @property
    def magnification(self) -> float:
        return self.source_to_detector / self.source_to_isocenter

    def angles(self) -> np.ndarray:
        return np.arange(self.n_views) * (self.angular_span / self.n_views)

    def bin_centers(self) -> np.ndarray:
        """Detector bin centres (cm) on the physical detector."""
        return (np.arange(self.n_bins) - 0.5 * (self.n_bins - 1)) * self.detector_pixel_size

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScanGeometry":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ScanGeometry":
        return cls.from_dict(json.loads(text))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class FidelityWeights:
    """Diagonal data-fidelity weights; ``weights=None`` is the identity."""

    weights: np.ndarray | None = None

    def __post_init__(self):
        if self.weights is not None:
            w = _frozen_array(self.weights, 2, "weights")
            if not np.all(w > 0):
                raise ValueError("fidelity weights must be positive")
            object.__setattr__(self, "weights", w)

    @property
    def is_identity(self) -> bool:
        return self.weights is None

    @classmethod
    def identity(cls) -> "FidelityWeights":
        return cls(None)


def image_new(width: int, height: int, pixel_size: float, fill: float = 0.0) -> Image:
    if width < 1 or height < 1:
        raise ValueError(f"image dimensions must be >= 1, got {width}x{height}")
    if not math.isfinite(fill):
        raise ValueError("fill must be finite")
    return Image(np.full((height, width), float(fill)), pixel_size)


# Full-size scan: 0.388 mm bins, 512 bins, 600 views, SDD 100 cm, SID 50 cm.
# The desk preset keeps the detector width (n_bins * bin = 19.9 cm) and the
# SDD/SID ratio of 2. With half the SDD its fan is therefore about twice as wide.
PRESETS = {
    "paper_full": dict(
        source_to_isocenter=50.0,
        source_to_detector=100.0,
        detector_pixel_size=0.0388,
        n_bins=512,
        n_views=600,
        angular_span=2 * math.pi,
        image_fov=6.9,
    ),
    "desk_small": dict(
        source_to_isocenter=25.0,
        source_to_detector=50.0,
        detector_pixel_size=0.1552,
        n_bins=128,
        n_views=180,
        angular_span=2 * math.pi,
        image_fov=6.4,
    ),
}

# Default reconstruction grid per preset: (width, height, pixel_size).
PRESET_IMAGE_SHAPES = {
    "paper_full": (256, 256, 6.9 / 256),
    "desk_small": (64, 64, 0.1),
}


def geometry_preset(name: str, **overrides) -> ScanGeometry:
    try:
        params = dict(PRESETS[name])
    except KeyError:
        raise ValueError(f"unknown geometry preset {name!r}; choose from {sorted(PRESETS)}") from None
    params.update(overrides)
    return ScanGeometry(**params)
