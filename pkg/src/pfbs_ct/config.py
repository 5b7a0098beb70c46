"""Run configuration for the command-line front end.

A config is a YAML (or JSON) mapping. Unknown keys anywhere are rejected so
that a typo cannot silently fall back to a default. Example::

    seed: 0
    method: pfbs-air
    dose: 50000
    geometry: {preset: desk_small}
    data: {n_phantoms: 200, dose_levels: [50000]}
    model: {K: 4, channels: 64}
    training: {epochs: 10, batch_size: 4, lr: 1.0e-4}
    paths: {dataset: runs/data, checkpoint_dir: runs/air}
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .geometry import PRESET_IMAGE_SHAPES, PRESETS, ScanGeometry, geometry_preset
from .phantoms import EllipsePhantomSpec
from .tv import TV_LAMBDA_BY_DOSE, TvParams

METHODS = ("fbp", "tv", "pfbs-ir", "pfbs-air")
SNAPSHOT_NAME = "resolved_config.json"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GeometryConfig(_Strict):
    preset: str = "desk_small"
    overrides: dict[str, float] = Field(default_factory=dict)
    image_width: Optional[int] = None
    pixel_size: Optional[float] = None

    @field_validator("preset")
    @classmethod
    def _known(cls, v):
        if v not in PRESETS:
            raise ValueError(f"unknown geometry preset {v!r}; choose from {sorted(PRESETS)}")
        return v

    def scan_geometry(self) -> ScanGeometry:
        overrides = {k: (int(v) if k in ("n_bins", "n_views") else v) for k, v in self.overrides.items()}
        return geometry_preset(self.preset, **overrides)

    def image_shape(self) -> tuple[int, int, float]:
        w, h, ps = PRESET_IMAGE_SHAPES[self.preset]
        if self.image_width is not None:
            w = h = self.image_width
        if self.pixel_size is not None:
            ps = self.pixel_size
        return int(w), int(h), float(ps)


class PhantomConfig(_Strict):
    n_ellipses: tuple[int, int] = (3, 8)
    body_intensity: tuple[float, float] = (0.17, 0.22)
    body_axes: tuple[float, float] = (0.6, 0.9)
    intensity: tuple[float, float] = (-0.08, 0.12)
    axes: tuple[float, float] = (0.05, 0.3)
    centers: tuple[float, float] = (-0.45, 0.45)
    rotation: tuple[float, float] = (0.0, 180.0)

    def spec(self, seed: int) -> EllipsePhantomSpec:
        return EllipsePhantomSpec(seed=seed, **self.model_dump())


class DataConfig(_Strict):
    n_phantoms: int = Field(200, ge=1)
    dose_levels: list[float] = Field(default_factory=lambda: [5e4])
    electronic_variance: float = Field(10.0, ge=0)
    test_fraction: float = Field(0.2, ge=0, lt=1)
    phantom: PhantomConfig = Field(default_factory=PhantomConfig)


class ModelConfig(_Strict):
    K: int = Field(4, ge=0)
    channels: int = Field(64, ge=1)
    n_mid: int = Field(3, ge=0)
    final_relu: bool = True
    zero_output: bool = False


class TrainConfig(_Strict):
    epochs: int = Field(10, ge=0)
    batch_size: int = Field(4, ge=1)
    lr: float = Field(1e-4, ge=0)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    resume: Optional[str] = None


class TvConfig(_Strict):
    lam: Optional[float] = None
    mu: float = 1.0
    outer_iters: int = Field(80, ge=0)
    cg_iters: int = Field(20, ge=0)
    cg_tol: float = 1e-6

    def params(self, dose: float) -> TvParams:
        lam = self.lam if self.lam is not None else TV_LAMBDA_BY_DOSE.get(float(dose), 0.01)
        return TvParams(lam=lam, mu=self.mu, outer_iters=self.outer_iters,
                        cg_iters=self.cg_iters, cg_tol=self.cg_tol)


class PathsConfig(_Strict):
    dataset: Optional[str] = None
    checkpoint_dir: Optional[str] = None
    checkpoint: Optional[str] = None
    input: Optional[str] = None
    output: Optional[str] = None
    recon_dir: Optional[str] = None
    eval_dir: Optional[str] = None


class ReconstructConfig(_Strict):
    split: Literal["train", "test", "all"] = "test"


class EvalConfig(_Strict):
    methods: list[str] = Field(default_factory=lambda: list(METHODS))
    split: Literal["train", "test", "all"] = "test"


class PreviewConfig(_Strict):
    mu_water: float = Field(0.193, gt=0)  # 1/cm, i.e. 0.0193 /mm
    window: tuple[float, float] = (-150.0, 150.0)


class RunConfig(_Strict):
    seed: int = Field(0, ge=0, lt=2**64)
    method: Literal["fbp", "tv", "pfbs-ir", "pfbs-air"] = "fbp"
    dose: float = Field(5e4, gt=0)
    geometry: GeometryConfig = Field(default_factory=GeometryConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    training: TrainConfig = Field(default_factory=TrainConfig)
    tv: TvConfig = Field(default_factory=TvConfig)
    reconstruct: ReconstructConfig = Field(default_factory=ReconstructConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    preview: PreviewConfig = Field(default_factory=PreviewConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)

    @field_validator("eval")
    @classmethod
    def _methods(cls, v):
        bad = [m for m in v.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown eval methods {bad}")
        return v

    def snapshot(self) -> dict:
        return self.model_dump(mode="json")

    def write_snapshot(self, directory) -> Path:
        path = Path(directory) / SNAPSHOT_NAME
        path.write_text(json.dumps(self.snapshot(), indent=2, sort_keys=True) + "\n")
        return path


def load_config(path, seed: int | None = None) -> RunConfig:
    """Parse a YAML/JSON file; ``seed`` (from the command line) overrides the file."""
    text = Path(path).read_text()
    raw = yaml.safe_load(text) if text.strip() else {}
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: config must be a mapping")
    if seed is not None:
        raw["seed"] = seed
    return RunConfig.model_validate(raw)
