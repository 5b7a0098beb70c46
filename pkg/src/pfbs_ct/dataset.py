"""Simulated training data on disk: phantoms, low-dose sinograms and a manifest.

The manifest is JSON Lines. The first record has ``"kind": "header"`` and
holds the geometry, image grid, phantom spec, noise settings and test
fraction. Every following record describes one (phantom, dose) pair::

    {"kind": "sample", "index": 3, "split": "train", "dose": 50000.0,
     "noise_seed": 1234..., "image": "images/00003.tomo", "image_sha256": "...",
     "sinogram": "sinograms/00003_I50000.tomo", "sinogram_sha256": "..."}

Paths are relative to the manifest's directory.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tomo_io
from .geometry import ScanGeometry
from .noise import NoiseModel, make_low_dose_pair
from .phantoms import EllipsePhantomSpec, generate_ellipse_phantom
from .projector import Projector

MANIFEST_NAME = "manifest.jsonl"
TEST_FRACTION = 0.2


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _index_hash(seed: int, index: int) -> str:
    return hashlib.sha256(f"{seed}:{index}".encode()).hexdigest()


def assign_splits(n: int, seed: int, test_fraction: float = TEST_FRACTION) -> list[str]:
    """The ``round(test_fraction * n)`` indices with the smallest hash go to test."""
    n_test = int(round(test_fraction * n))
    ranked = sorted(range(n), key=lambda i: _index_hash(seed, i))
    test = set(ranked[:n_test])
    return ["test" if i in test else "train" for i in range(n)]


def noise_seed(seed: int, index: int, dose_slot: int) -> int:
    state = np.random.SeedSequence([seed, index, dose_slot]).generate_state(1, np.uint64)
    return int(state[0])


@dataclass
class DatasetManifest:
    header: dict
    samples: list = field(default_factory=list)
    root: Path = Path(".")

    @property
    def geometry(self) -> ScanGeometry:
        return ScanGeometry.from_dict(self.header["geometry"])

    @property
    def image_shape(self) -> tuple[int, int, float]:
        w, h, ps = self.header["image_shape"]
        return int(w), int(h), float(ps)

    def write(self, path) -> Path:
        path = Path(path)
        lines = [json.dumps({"kind": "header", **self.header}, sort_keys=True)]
        lines += [json.dumps({"kind": "sample", **s}, sort_keys=True) for s in self.samples]
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        header, samples = None, []
        for line in path.read_text().splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            kind = rec.pop("kind")
            if kind == "header":
                header = rec
            elif kind == "sample":
                samples.append(rec)
            else:
                raise ValueError(f"unknown manifest record kind {kind!r}")
        if header is None:
            raise ValueError(f"{path}: manifest has no header")
        return cls(header, samples, path.parent)

    def verify(self) -> None:
        """Raise if a file is missing, its hash differs, or an index is in both splits."""
        splits: dict[int, set] = {}
        for s in self.samples:
            for key in ("image", "sinogram"):
                p = self.root / s[key]
                if not p.exists():
                    raise FileNotFoundError(p)
                if _sha256(p) != s[f"{key}_sha256"]:
                    raise ValueError(f"hash mismatch for {p}")
            splits.setdefault(s["index"], set()).add(s["split"])
        leaked = [i for i, sp in splits.items() if len(sp) > 1]
        if leaked:
            raise ValueError(f"indices in both splits: {leaked}")

    def doses(self) -> list[float]:
        return sorted({s["dose"] for s in self.samples}, reverse=True)

    def arrays(self, dose: float, split: str) -> tuple[np.ndarray, np.ndarray, list[int]]:
        """Stacked ``(images, sinograms, indices)`` for one dose level and split."""
        recs = sorted((s for s in self.samples if s["dose"] == dose and s["split"] == split),
                      key=lambda s: s["index"])
        xs = [tomo_io.load_image(self.root / s["image"]).values for s in recs]
        ys = [tomo_io.load_sinogram(self.root / s["sinogram"]).values for s in recs]
        if not recs:
            return np.empty((0,)), np.empty((0,)), []
        return np.stack(xs), np.stack(ys), [s["index"] for s in recs]


def build_dataset(n: int, spec: EllipsePhantomSpec, geometry: ScanGeometry, dose_levels,
                  out_dir, image_shape: tuple[int, int, float] = (64, 64, 0.1),
                  electronic_variance: float = 10.0, seed: int = 0,
                  test_fraction: float = TEST_FRACTION) -> DatasetManifest:
    out_dir = Path(out_dir)
    if not out_dir.is_dir():
        raise FileNotFoundError(f"output directory {out_dir} does not exist")
    width, height, ps = image_shape
    if width != height:
        raise ValueError("ellipse phantoms are square")
    (out_dir / "images").mkdir(exist_ok=True)
    (out_dir / "sinograms").mkdir(exist_ok=True)
    proj = Projector(geometry, image_shape)
    splits = assign_splits(n, seed, test_fraction)
    header = {
        "geometry": geometry.to_dict(),
        "image_shape": [width, height, ps],
        "phantom_spec": dataclasses.asdict(spec),
        "electronic_variance": electronic_variance,
        "seed": seed,
        "test_fraction": test_fraction,
        "n": n,
        "dose_levels": [float(d) for d in dose_levels],
    }
    manifest = DatasetManifest(header, [], out_dir)
    for i in range(n):
        x = generate_ellipse_phantom(spec, i, width, ps)
        img_rel = f"images/{i:05d}.tomo"
        tomo_io.save_image(out_dir / img_rel, x)
        img_hash = _sha256(out_dir / img_rel)
        for slot, dose in enumerate(dose_levels):
            nseed = noise_seed(seed, i, slot)
            model = NoiseModel(float(dose), electronic_variance, nseed)
            y, _ = make_low_dose_pair(x, proj, model)
            sino_rel = f"sinograms/{i:05d}_I{int(dose)}.tomo"
            tomo_io.save_sinogram(out_dir / sino_rel, y, dose=float(dose))
            manifest.samples.append({
                "index": i,
                "split": splits[i],
                "dose": float(dose),
                "noise_seed": nseed,
                "image": img_rel,
                "image_sha256": img_hash,
                "sinogram": sino_rel,
                "sinogram_sha256": _sha256(out_dir / sino_rel),
            })
    manifest.write(out_dir / MANIFEST_NAME)
    return manifest
