import hashlib
import json

import numpy as np
import pytest
import yaml
from PIL import Image as PILImage

from pfbs_ct import tomo_io
from pfbs_ct.cli import main, preview_bytes, summarize, to_hu
from pfbs_ct.config import SNAPSHOT_NAME, RunConfig, load_config
from pfbs_ct.geometry import Sinogram
from pfbs_ct.unrolled import load_checkpoint

# A very small scanner so that every command runs in seconds.
TINY = {
    "geometry": {"preset": "desk_small", "overrides": {"n_views": 24, "n_bins": 32,
                                                       "detector_pixel_size": 0.6},
                 "image_width": 16, "pixel_size": 0.4},
    "data": {"n_phantoms": 5, "dose_levels": [50000, 10000]},
    "model": {"K": 1, "channels": 4, "n_mid": 1},
    "training": {"epochs": 1, "batch_size": 2},
    "tv": {"outer_iters": 2, "cg_iters": 3},
}


def _write(tmp_path, name="run.yaml", **extra):
    cfg = json.loads(json.dumps(TINY))
    paths = {"dataset": str(tmp_path / "data"), "checkpoint_dir": str(tmp_path / "ck"),
             "recon_dir": str(tmp_path / "rec"), "eval_dir": str(tmp_path / "ev")}
    for key, val in extra.items():
        if key == "paths":
            paths.update(val)
        elif isinstance(val, dict):
            cfg.setdefault(key, {}).update(val)
        else:
            cfg[key] = val
    cfg["paths"] = paths
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return path


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def simulated(tmp_path):
    (tmp_path / "data").mkdir()
    cfg = _write(tmp_path)
    assert main(["simulate", "--config", str(cfg)]) == 0
    return tmp_path, cfg


def test_config_rejects_unknown_keys(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: 1\nmodel: {K: 2, kernel: 5}\n")
    with pytest.raises(Exception):
        load_config(bad)
    assert main(["simulate", "--config", str(bad)]) == 2


def test_missing_config_file_is_a_config_error(tmp_path):
    assert main(["simulate", "--config", str(tmp_path / "none.yaml")]) == 2


def test_seed_flag_overrides_file(tmp_path):
    cfg = _write(tmp_path, seed=3)
    assert load_config(cfg, seed=9).seed == 9
    assert load_config(cfg).seed == 3


def test_simulate_writes_manifest_and_snapshot(simulated, capsys):
    tmp_path, _ = simulated
    manifest = tmp_path / "data" / "manifest.jsonl"
    assert manifest.exists()
    snap = json.loads((tmp_path / "data" / SNAPSHOT_NAME).read_text())
    assert RunConfig.model_validate(snap).data.n_phantoms == 5


def test_simulate_is_deterministic(simulated):
    tmp_path, cfg = simulated
    first = _sha(tmp_path / "data" / "manifest.jsonl")
    assert main(["simulate", "--config", str(cfg)]) == 0
    assert _sha(tmp_path / "data" / "manifest.jsonl") == first


def test_simulate_without_output_directory_fails(tmp_path):
    cfg = _write(tmp_path)
    assert main(["simulate", "--config", str(cfg)]) == 3


def test_train_with_zero_lr_keeps_initial_weights(simulated):
    tmp_path, _ = simulated
    cfg = _write(tmp_path, "air.yaml", method="pfbs-air", training={"lr": 0.0})
    assert main(["train", "--config", str(cfg)]) == 0
    from pfbs_ct.cli import _projector
    proj = _projector(load_config(cfg))
    init, _, _ = load_checkpoint(tmp_path / "ck" / "epoch_000", proj)
    final, _, _ = load_checkpoint(tmp_path / "ck" / "epoch_001", proj)
    for k, v in init.named_params().items():
        assert np.array_equal(final.named_params()[k], v)
    assert (tmp_path / "ck" / "train_log.jsonl").exists()


def test_train_resume_continues_the_log(simulated):
    tmp_path, _ = simulated
    full = _write(tmp_path, "full.yaml", method="pfbs-ir", training={"epochs": 2},
                  paths={"checkpoint_dir": str(tmp_path / "full")})
    assert main(["train", "--config", str(full)]) == 0
    first = _write(tmp_path, "first.yaml", method="pfbs-ir", training={"epochs": 1},
                   paths={"checkpoint_dir": str(tmp_path / "part")})
    assert main(["train", "--config", str(first)]) == 0
    again = _write(tmp_path, "again.yaml", method="pfbs-ir",
                   training={"epochs": 2, "resume": str(tmp_path / "part" / "epoch_001")},
                   paths={"checkpoint_dir": str(tmp_path / "part")})
    assert main(["train", "--config", str(again)]) == 0

    def records(d):
        rows = [json.loads(l) for l in (tmp_path / d / "train_log.jsonl").read_text().splitlines()]
        return [{k: v for k, v in r.items() if k != "wall_time"} for r in rows]

    assert records("part") == records("full")


def test_train_needs_a_learned_method(simulated):
    tmp_path, _ = simulated
    cfg = _write(tmp_path, "fbp.yaml", method="fbp")
    assert main(["train", "--config", str(cfg)]) == 2


def test_reconstruct_fbp_of_zero_sinogram_is_zero(tmp_path):
    cfg_obj = RunConfig.model_validate({**TINY, "method": "fbp"})
    from pfbs_ct.cli import _projector
    shape = _projector(cfg_obj).sino_shape
    tomo_io.save_sinogram(tmp_path / "zero.tomo", Sinogram(np.zeros(shape)))
    cfg = _write(tmp_path, method="fbp", paths={"input": str(tmp_path / "zero.tomo"),
                                                "output": str(tmp_path / "out" / "x.tomo")})
    assert main(["reconstruct", "--config", str(cfg)]) == 0
    assert not np.any(tomo_io.load_image(tmp_path / "out" / "x.tomo").values)
    png = PILImage.open(tmp_path / "out" / "x.png")
    assert png.mode == "L" and png.size == (16, 16)
    assert (tmp_path / "out" / SNAPSHOT_NAME).exists()


def test_reconstruct_tv_with_no_iterations_equals_fbp(simulated):
    tmp_path, _ = simulated
    for method in ("fbp", "tv"):
        cfg = _write(tmp_path, f"{method}.yaml", method=method, tv={"outer_iters": 0})
        assert main(["reconstruct", "--config", str(cfg)]) == 0
    for f in (tmp_path / "rec" / "fbp").glob("*.tomo"):
        a = tomo_io.load_image(f).values
        b = tomo_io.load_image(tmp_path / "rec" / "tv" / f.name).values
        assert np.array_equal(a, b)


def test_reconstruct_rejects_mismatched_checkpoint(simulated):
    tmp_path, _ = simulated
    cfg = _write(tmp_path, "air.yaml", method="pfbs-air", training={"epochs": 0})
    assert main(["train", "--config", str(cfg)]) == 0
    wrong = _write(tmp_path, "ir.yaml", method="pfbs-ir",
                   paths={"checkpoint": str(tmp_path / "ck" / "epoch_000")})
    assert main(["reconstruct", "--config", str(wrong)]) == 3
    # a 20-view scanner: the checkpoint was trained for 24 views
    sino = tmp_path / "s.tomo"
    tomo_io.save_sinogram(sino, Sinogram(np.zeros((20, 32))))
    other = _write(tmp_path, "geo.yaml", method="pfbs-air",
                   geometry={"overrides": {"n_views": 20, "n_bins": 32, "detector_pixel_size": 0.6}},
                   paths={"checkpoint": str(tmp_path / "ck" / "epoch_000"), "input": str(sino),
                          "output": str(tmp_path / "o.tomo")})
    assert main(["reconstruct", "--config", str(other)]) == 3


def test_reconstruct_missing_input(tmp_path):
    cfg = _write(tmp_path, paths={"input": str(tmp_path / "nope.tomo"), "output": str(tmp_path / "o.tomo")})
    assert main(["reconstruct", "--config", str(cfg)]) == 3


def _copy_references(tmp_path, method):
    from pfbs_ct.dataset import DatasetManifest
    m = DatasetManifest.read(tmp_path / "data" / "manifest.jsonl")
    out = tmp_path / "rec" / method
    out.mkdir(parents=True, exist_ok=True)
    for s in m.samples:
        if s["split"] == "test":
            name = f"{s['index']:05d}_I{int(s['dose'])}.tomo"
            (out / name).write_bytes((tmp_path / "data" / s["image"]).read_bytes())


def test_eval_reference_against_itself(simulated):
    tmp_path, _ = simulated
    _copy_references(tmp_path, "fbp")
    cfg = _write(tmp_path, eval={"methods": ["fbp"]})
    assert main(["eval", "--config", str(cfg)]) == 0
    rows = json.loads((tmp_path / "ev" / "summary.json").read_text())
    assert len(rows) == 1 * 2
    assert all(r["rmse_mean"] == 0.0 and r["ssim_mean"] == 1.0 for r in rows)


def test_eval_table_rows_and_idempotence(simulated):
    tmp_path, _ = simulated
    for method in ("fbp", "tv"):
        cfg = _write(tmp_path, f"{method}.yaml", method=method)
        assert main(["reconstruct", "--config", str(cfg)]) == 0
    cfg = _write(tmp_path, "ev.yaml", eval={"methods": ["fbp", "tv"]})
    assert main(["eval", "--config", str(cfg)]) == 0
    first = (tmp_path / "ev" / "metrics.jsonl").read_bytes()
    table = (tmp_path / "ev" / "summary.txt").read_text().splitlines()
    assert len(table) == 2 + 2 * 2
    assert main(["eval", "--config", str(cfg)]) == 0
    assert (tmp_path / "ev" / "metrics.jsonl").read_bytes() == first


def test_eval_missing_reconstructions(simulated):
    tmp_path, _ = simulated
    cfg = _write(tmp_path, eval={"methods": ["tv"]})
    assert main(["eval", "--config", str(cfg)]) == 3


def test_hu_preview_window():
    mu_w = 0.193
    assert to_hu(np.array([mu_w]), mu_w)[0] == 0.0
    mu = mu_w * (1 + np.array([-0.2, -0.15, 0.0, 0.15, 0.2]))
    np.testing.assert_array_equal(preview_bytes(mu, mu_w), [0, 0, 128, 255, 255])


def test_summary_statistics():
    recs = [{"method": "fbp", "dose": 1.0, "psnr": p, "rmse": 0.0, "ssim": 1.0} for p in (1.0, 3.0)]
    row = summarize(recs)[0]
    assert row["psnr_mean"] == 2.0 and row["psnr_std"] == pytest.approx(np.sqrt(2.0))


def test_shipped_example_config_parses():
    from pathlib import Path

    cfg = load_config(Path(__file__).parent.parent / "configs" / "desk_air.yaml")
    assert cfg.method == "pfbs-air" and cfg.model.zero_output and not cfg.model.final_relu
