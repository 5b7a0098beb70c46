"""Batch command-line front end: ``pfbs-ct {simulate,train,reconstruct,eval}``.

Everything that affects numerics lives in the config file; the flags only
pick the file, override the seed, set the thread count and the verbosity.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml
from pydantic import ValidationError

from . import tomo_io
from .config import RunConfig, load_config
from .dataset import MANIFEST_NAME, DatasetManifest, build_dataset
from .fbp import FbpOperator
from .geometry import Image, Sinogram
from .metrics import evaluate
from .projector import Projector, set_threads
from .tv import reconstruct_tv
from .unrolled import (TrainingConfig, UnrolledModel, load_checkpoint, reconstruct,
                       save_checkpoint, train)

log = logging.getLogger("pfbs_ct")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


class NumericError(Exception):
    pass


def _require(value, name: str) -> str:
    if value is None:
        raise ConfigError(f"config needs paths.{name} for this command")
    return value


def _projector(cfg: RunConfig) -> Projector:
    return Projector(cfg.geometry.scan_geometry(), cfg.geometry.image_shape())


def _manifest(cfg: RunConfig) -> DatasetManifest:
    root = Path(_require(cfg.paths.dataset, "dataset"))
    path = root / MANIFEST_NAME if root.is_dir() else root
    if not path.exists():
        raise DataError(f"no dataset manifest at {path}")
    manifest = DatasetManifest.read(path)
    manifest.verify()
    return manifest


def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{what} contains non-finite values")
    return arr


# ------------------------------------------------------------------ preview

def to_hu(mu: np.ndarray, mu_water: float) -> np.ndarray:
    return 1000.0 * (mu - mu_water) / mu_water


def preview_bytes(mu: np.ndarray, mu_water: float, window=(-150.0, 150.0)) -> np.ndarray:
    """8-bit grey levels with the HU window mapped linearly onto 0..255."""
    lo, hi = window
    hu = to_hu(np.asarray(mu, dtype=np.float64), mu_water)
    scaled = np.clip((hu - lo) / (hi - lo), 0.0, 1.0) * 255.0
    return np.rint(scaled).astype(np.uint8)


def write_preview(path, mu: np.ndarray, cfg: RunConfig) -> Path:
    from PIL import Image as PILImage

    path = Path(path)
    PILImage.fromarray(preview_bytes(mu, cfg.preview.mu_water, cfg.preview.window)).save(path)
    return path


# ------------------------------------------------------------------ commands

def cmd_simulate(cfg: RunConfig) -> Path:
    out = Path(_require(cfg.paths.dataset, "dataset"))
    if not out.is_dir():
        raise DataError(f"dataset directory {out} does not exist")
    build_dataset(cfg.data.n_phantoms, cfg.data.phantom.spec(cfg.seed), cfg.geometry.scan_geometry(),
                  cfg.data.dose_levels, out, cfg.geometry.image_shape(),
                  electronic_variance=cfg.data.electronic_variance, seed=cfg.seed,
                  test_fraction=cfg.data.test_fraction)
    cfg.write_snapshot(out)
    path = out / MANIFEST_NAME
    print(path)
    return path


def _mode(cfg: RunConfig) -> str:
    if cfg.method not in ("pfbs-ir", "pfbs-air"):
        raise ConfigError(f"method {cfg.method!r} has nothing to train")
    return cfg.method.split("-")[1]


def cmd_train(cfg: RunConfig) -> Path:
    mode = _mode(cfg)
    manifest = _manifest(cfg)
    proj = _projector(cfg)
    if manifest.geometry.digest() != proj.geometry.digest() or manifest.image_shape != proj.image_shape:
        raise DataError("dataset geometry does not match the configured geometry")
    train_x, train_y, _ = manifest.arrays(cfg.dose, "train")
    test_x, test_y, _ = manifest.arrays(cfg.dose, "test")
    if len(train_x) == 0:
        raise DataError(f"dataset has no training samples at dose {cfg.dose:g}")
    out = Path(_require(cfg.paths.checkpoint_dir, "checkpoint_dir"))
    out.mkdir(parents=True, exist_ok=True)
    t = cfg.training
    tcfg = TrainingConfig(epochs=t.epochs, batch_size=t.batch_size, lr=t.lr, beta1=t.beta1,
                          beta2=t.beta2, eps=t.eps, seed=cfg.seed)
    log_path = out / "train_log.jsonl"
    if t.resume:
        try:
            model, adam, ck = load_checkpoint(t.resume, proj)
        except FileNotFoundError as exc:
            raise DataError(str(exc)) from exc
        if model.mode != mode:
            raise DataError(f"checkpoint is {model.mode!r}, config asks for {mode!r}")
        start = int(ck.get("epoch", 0))
        if adam is not None:
            adam.lr = t.lr
    else:
        m = cfg.model
        model = UnrolledModel(proj, K=m.K, mode=mode, channels=m.channels, n_mid=m.n_mid,
                              final_relu=m.final_relu, seed=cfg.seed,
                              zero_output=m.zero_output)
        adam, start = None, 0
        if log_path.exists():
            log_path.unlink()
        save_checkpoint(model, out / "epoch_000", tcfg, None, epoch=0)
    cfg.write_snapshot(out)
    records = train(model, train_x, train_y, tcfg, test_x, test_y, checkpoint_dir=out,
                    log_path=log_path, start_epoch=start, adam=adam)
    for rec in records:
        if not np.isfinite(rec["train_loss"]):
            raise NumericError(f"training loss became {rec['train_loss']} at epoch {rec['epoch']}")
    final = out / f"epoch_{max(start, t.epochs):03d}"
    print(final)
    return final


class _Reconstructor:
    """Dispatch one sinogram to the configured method."""

    def __init__(self, cfg: RunConfig, proj: Projector):
        self.cfg = cfg
        self.proj = proj
        self.model = None
        if cfg.method in ("pfbs-ir", "pfbs-air"):
            path = Path(_require(cfg.paths.checkpoint, "checkpoint"))
            if not (path / "manifest.json").exists():
                raise DataError(f"no checkpoint at {path}")
            try:
                self.model, _, _ = load_checkpoint(path, proj)
            except ValueError as exc:
                raise DataError(str(exc)) from exc
            if self.model.mode != _mode(cfg):
                raise DataError(f"checkpoint is {self.model.mode!r}, config asks for {cfg.method!r}")

    def __call__(self, y: Sinogram, dose: float) -> Image:
        m = self.cfg.method
        if m == "fbp":
            out = Image(FbpOperator.for_projector(self.proj).reconstruct(y.values), self.proj.pixel_size)
        elif m == "tv":
            out = reconstruct_tv(self.proj, y, self.cfg.tv.params(dose))
        else:
            out = reconstruct(self.model, y)
        _check_finite(out.values, f"{m} reconstruction")
        return out


def _load_sinogram(path) -> Sinogram:
    try:
        return tomo_io.load_sinogram(path)
    except FileNotFoundError as exc:
        raise DataError(f"missing input {path}") from exc


def cmd_reconstruct(cfg: RunConfig) -> list[Path]:
    """Single file: ``paths.input`` -> ``paths.output`` (+ ``.png``).

    Dataset: with ``paths.input`` unset, every sample of the configured split
    is written to ``recon_dir/<method>/<index>_I<dose>.tomo``.
    """
    proj = _projector(cfg)
    if cfg.paths.input is not None:
        y = _load_sinogram(cfg.paths.input)
        if y.values.shape != proj.sino_shape:
            raise DataError(f"sinogram shape {y.values.shape} does not match geometry {proj.sino_shape}")
        rec = _Reconstructor(cfg, proj)
        out = Path(_require(cfg.paths.output, "output"))
        out.parent.mkdir(parents=True, exist_ok=True)
        tomo_io.save_image(out, rec(y, cfg.dose))
        write_preview(out.with_suffix(".png"), tomo_io.load_image(out).values, cfg)
        cfg.write_snapshot(out.parent)
        print(out)
        return [out]
    manifest = _manifest(cfg)
    if manifest.geometry.digest() != proj.geometry.digest():
        raise DataError("dataset geometry does not match the configured geometry")
    rec = _Reconstructor(cfg, proj)
    out_dir = Path(_require(cfg.paths.recon_dir, "recon_dir")) / cfg.method
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for s in _samples(manifest, cfg.reconstruct.split):
        y = _load_sinogram(manifest.root / s["sinogram"])
        path = out_dir / _recon_name(s)
        tomo_io.save_image(path, rec(y, s["dose"]))
        written.append(path)
    cfg.write_snapshot(out_dir)
    print(out_dir)
    return written


def _samples(manifest: DatasetManifest, split: str) -> list[dict]:
    rows = [s for s in manifest.samples if split == "all" or s["split"] == split]
    return sorted(rows, key=lambda s: (-s["dose"], s["index"]))


def _recon_name(sample: dict) -> str:
    return f"{sample['index']:05d}_I{int(sample['dose'])}.tomo"


def summarize(records: list[dict]) -> list[dict]:
    """Mean and sample STD of each metric per (method, dose), in first-seen order."""
    groups: dict[tuple, list] = {}
    for r in records:
        groups.setdefault((r["method"], r["dose"]), []).append(r)
    rows = []
    for (method, dose), rs in groups.items():
        row = {"method": method, "dose": dose, "n": len(rs)}
        for key in ("psnr", "rmse", "ssim"):
            vals = np.array([r[key] for r in rs], dtype=np.float64)
            row[f"{key}_mean"] = float(vals.mean())
            row[f"{key}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        rows.append(row)
    return rows


def format_table(rows: list[dict]) -> str:
    head = f"{'method':<10} {'dose':>9} {'n':>4}  {'PSNR (dB)':>18}  {'RMSE':>22}  {'SSIM':>16}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(
            f"{r['method']:<10} {r['dose']:>9g} {r['n']:>4}  "
            f"{r['psnr_mean']:>8.3f} ± {r['psnr_std']:<7.3f}  "
            f"{r['rmse_mean']:>10.3e} ± {r['rmse_std']:<9.2e}  "
            f"{r['ssim_mean']:>6.4f} ± {r['ssim_std']:<6.4f}"
        )
    return "\n".join(lines)


def cmd_eval(cfg: RunConfig) -> list[dict]:
    manifest = _manifest(cfg)
    recon_root = Path(_require(cfg.paths.recon_dir, "recon_dir"))
    out = Path(_require(cfg.paths.eval_dir, "eval_dir"))
    records = []
    for method in cfg.eval.methods:
        for s in _samples(manifest, cfg.eval.split):
            path = recon_root / method / _recon_name(s)
            if not path.exists():
                raise DataError(f"missing reconstruction {path}")
            ref = tomo_io.load_image(manifest.root / s["image"])
            rep = evaluate(ref, tomo_io.load_image(path))
            records.append({"method": method, "dose": s["dose"], "index": s["index"], **rep.as_dict()})
    out.mkdir(parents=True, exist_ok=True)
    rows = summarize(records)
    with open(out / "metrics.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    (out / "summary.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    table = format_table(rows)
    (out / "summary.txt").write_text(table + "\n")
    cfg.write_snapshot(out)
    print(table)
    return rows


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "reconstruct": cmd_reconstruct,
            "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pfbs-ct", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="YAML or JSON run configuration")
    ap.add_argument("--seed", type=int, default=None, help="override the config seed (u64)")
    ap.add_argument("--threads", type=int, default=None, help="numba worker threads")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed)
    except (OSError, ValidationError, yaml.YAMLError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.threads is not None:
        set_threads(args.threads)
    try:
        COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError, tomo_io.TomoFormatError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
