"""Unrolled preconditioned proximal forward-backward splitting network.

Starting from ``x0 = FBP(y)``, each of the ``K`` stages applies

    x_{k+1/2} = x_k - theta_k * P(A x_k - y)                       (data step)
    x_{k+1}   = x_{k+1/2} - CNN_k([x_{1/2}, ..., x_{k+1/2}])        (learned prox)

with ``P = FBP`` (AIR mode) or ``P = A^T`` (IR mode). ``CNN_k`` sees every
half-step iterate produced so far as a separate input channel.

Training minimises the batch mean of ``||x_K - x_true||^2``. The reverse
pass is written out by hand: the data step contributes
``(I - theta_k A^T P^T)`` to the image gradient and ``-<g, P r_k>`` to
``theta_k``; each half-step iterate collects gradient from its own CNN and
from every later CNN that takes it as an input channel.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tomo_io
from .fbp import FbpOperator
from .geometry import Image, Sinogram
from .metrics import psnr
from .nn import AdamState, DenseCNN, adam_step
from .projector import Projector

log = logging.getLogger(__name__)

MODES = ("air", "ir")


class FbpPreconditioner:
    name = "fbp"

    def __init__(self, fbp: FbpOperator):
        self.fbp = fbp

    def apply(self, r: np.ndarray) -> np.ndarray:
        return self.fbp.reconstruct(r)

    def adjoint(self, g: np.ndarray) -> np.ndarray:
        return self.fbp.adjoint(g)


class AdjointPreconditioner:
    name = "adjoint"

    def __init__(self, proj: Projector):
        self.proj = proj

    def apply(self, r: np.ndarray) -> np.ndarray:
        return self.proj.adjoint(r)

    def adjoint(self, g: np.ndarray) -> np.ndarray:
        return self.proj.forward(g)


class UnrolledModel:
    def __init__(self, projector: Projector, K: int = 10, mode: str = "air", channels: int = 64,
                 n_mid: int = 3, final_relu: bool = True, seed: int = 0,
                 step_init: float | None = None, zero_output: bool = False):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        if K < 0:
            raise ValueError("K must be >= 0")
        self.projector = projector
        self.fbp = FbpOperator.for_projector(projector)
        self.mode = mode
        self.K = K
        self.channels = channels
        self.n_mid = n_mid
        self.final_relu = final_relu
        self.zero_output = zero_output
        self.seed = seed
        if mode == "air":
            self.preconditioner = FbpPreconditioner(self.fbp)
        else:
            self.preconditioner = AdjointPreconditioner(projector)
        if step_init is None:
            step_init = 1.0 if mode == "air" else 1.0 / projector.norm_squared()
        self.step_scalars = np.full(K, float(step_init))
        rng = np.random.default_rng(seed)
        self.cnns = [DenseCNN(k + 1, channels, n_mid, final_relu, rng, zero_output)
                     for k in range(K)]

    def named_params(self) -> dict:
        p = {"theta1": self.step_scalars}
        for k, cnn in enumerate(self.cnns):
            p.update({f"stage{k}.{n}": v for n, v in cnn.named_params().items()})
        return p

    def named_buffers(self) -> dict:
        b = {}
        for k, cnn in enumerate(self.cnns):
            b.update({f"stage{k}.{n}": v for n, v in cnn.named_buffers().items()})
        return b

    def hyperparameters(self) -> dict:
        return {"K": self.K, "mode": self.mode, "channels": self.channels, "n_mid": self.n_mid,
                "final_relu": self.final_relu, "zero_output": self.zero_output, "seed": self.seed}


@dataclass
class StageTrace:
    x0: np.ndarray
    xs: list = field(default_factory=list)  # x_k fed into stage k
    halves: list = field(default_factory=list)  # x_{k+1/2}
    precond_residuals: list = field(default_factory=list)  # P(A x_k - y)
    cnn_caches: list = field(default_factory=list)
    output: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.halves)


def _as_batch(a: np.ndarray, ndim: int = 3) -> tuple[np.ndarray, bool]:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == ndim - 1:
        return a[None], True
    return a, False


def initial_image(model: UnrolledModel, y: np.ndarray) -> np.ndarray:
    """``x0 = FBP(y)`` per batch element (both modes)."""
    yb, single = _as_batch(y)
    x0 = np.stack([model.fbp.reconstruct(yi) for yi in yb])
    return x0[0] if single else x0


def data_fidelity_step(model: UnrolledModel, k: int, x: np.ndarray, y: np.ndarray,
                       return_residual: bool = False):
    """``x - theta_k * P(A x - y)`` for one image or a batch."""
    xb, single = _as_batch(x)
    yb, _ = _as_batch(y)
    if xb.shape[0] != yb.shape[0]:
        raise ValueError("image and sinogram batch sizes differ")
    pr = np.stack([model.preconditioner.apply(model.projector.forward(xi) - yi)
                   for xi, yi in zip(xb, yb)])
    out = xb - model.step_scalars[k] * pr
    if single:
        out, pr = out[0], pr[0]
    return (out, pr) if return_residual else out


def cnn_prox_step(model: UnrolledModel, k: int, halves: list, mode: str = "train",
                  update_stats: bool = True):
    """``x_{k+1/2} - CNN_k(concat(halves))``; ``halves`` holds ``x_{1/2} .. x_{k+1/2}``.

    Returns ``(x_{k+1}, cache)``.
    """
    if len(halves) != k + 1:
        raise ValueError(f"stage {k} needs {k + 1} half-step iterates, got {len(halves)}")
    stacked = np.stack([_as_batch(h)[0] for h in halves], axis=1)  # (N, k+1, H, W)
    out, cache = model.cnns[k].forward(stacked, mode, update_stats)
    x_next = stacked[:, k] - out[:, 0]
    if np.ndim(halves[-1]) == 2:
        x_next = x_next[0]
    return x_next, cache


def forward(model: UnrolledModel, y: np.ndarray, mode: str = "train",
            update_stats: bool = True) -> tuple[np.ndarray, StageTrace]:
    """Runs all ``K`` stages on a batch ``(N, n_views, n_bins)`` (or one sinogram)."""
    yb, single = _as_batch(y)
    x = initial_image(model, yb)
    trace = StageTrace(x0=x)
    for k in range(model.K):
        trace.xs.append(x)
        half, pr = data_fidelity_step(model, k, x, yb, return_residual=True)
        trace.halves.append(half)
        trace.precond_residuals.append(pr)
        x, cache = cnn_prox_step(model, k, trace.halves, mode, update_stats)
        trace.cnn_caches.append(cache)
    trace.output = x
    return (x[0] if single else x), trace


def loss_and_gradients(model: UnrolledModel, x_true: np.ndarray, y: np.ndarray,
                       update_stats: bool = True, wrt_input: bool = False):
    """Batch-mean squared error and exact gradients for every parameter.

    Returns ``(loss, grads)`` with ``grads`` keyed like ``model.named_params()``;
    with ``wrt_input`` the gradient with respect to ``y`` is added under ``"input"``.
    """
    xt, _ = _as_batch(x_true)
    yb, _ = _as_batch(y)
    if xt.shape[0] == 0:
        raise ValueError("empty batch")
    if xt.shape[0] != yb.shape[0]:
        raise ValueError("image and sinogram batch sizes differ")
    n = xt.shape[0]
    xk, trace = forward(model, yb, "train", update_stats)
    diff = xk - xt
    loss = float(np.sum(diff * diff)) / n

    K = model.K
    proj, prec = model.projector, model.preconditioner
    grads = {"theta1": np.zeros(K)}
    g = 2.0 * diff / n  # dL/dx_K
    half_acc = [np.zeros_like(g) for _ in range(K)]  # from later CNN inputs
    gy = np.zeros_like(yb) if wrt_input else None
    for k in reversed(range(K)):
        # x_{k+1} = x_{k+1/2} - CNN_k(c_k)
        g_in, cnn_grads = model.cnns[k].backward(trace.cnn_caches[k], -g[:, None])
        for name, val in cnn_grads.items():
            grads[f"stage{k}.{name}"] = val
        for m in range(k):
            half_acc[m] += g_in[:, m]
        g_half = g + g_in[:, k] + half_acc[k]
        # x_{k+1/2} = x_k - theta_k P(A x_k - y)
        theta = model.step_scalars[k]
        grads["theta1"][k] = -float(np.sum(g_half * trace.precond_residuals[k]))
        pt = np.stack([prec.adjoint(gi) for gi in g_half])
        g = g_half - theta * np.stack([proj.adjoint(pi) for pi in pt])
        if wrt_input:
            gy += theta * pt
    if wrt_input:
        gy += np.stack([model.fbp.adjoint(gi) for gi in g])
        grads["input"] = gy
    return loss, grads


def reconstruct(model: UnrolledModel, y: Sinogram) -> Image:
    model.projector.check_sinogram(y)
    x, _ = forward(model, y.values, mode="eval", update_stats=False)
    return Image(x, model.projector.pixel_size)


# ---------------------------------------------------------------- training

@dataclass
class TrainingConfig:
    epochs: int = 50
    batch_size: int = 4
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


def evaluate_psnr(model: UnrolledModel, xs: np.ndarray, ys: np.ndarray) -> float:
    vals = []
    for xi, yi in zip(xs, ys):
        rec, _ = forward(model, yi, mode="eval", update_stats=False)
        vals.append(psnr(xi, rec))
    return float(np.mean(vals)) if vals else float("nan")


def train(model: UnrolledModel, train_x: np.ndarray, train_y: np.ndarray, cfg: TrainingConfig,
          test_x: np.ndarray | None = None, test_y: np.ndarray | None = None,
          checkpoint_dir=None, log_path=None, start_epoch: int = 0,
          adam: AdamState | None = None) -> list[dict]:
    """Adam on mini-batches; one log record per epoch.

    Batch order for epoch ``e`` is a permutation drawn from ``(cfg.seed, e)``
    alone, so resuming at ``start_epoch`` with the saved Adam state continues
    the same trajectory.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.float64)
    if len(train_x) == 0:
        raise ValueError("empty training set")
    if len(train_x) != len(train_y):
        raise ValueError("training images and sinograms differ in count")
    adam = adam or AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    params = model.named_params()
    records = []
    t0 = time.perf_counter()
    for epoch in range(start_epoch, cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_x))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = loss_and_gradients(model, train_x[idx], train_y[idx])
            adam_step(adam, params, grads)
            losses.append(loss)
        rec = {
            "epoch": epoch + 1,
            "train_loss": float(np.mean(losses)),
            "test_psnr": evaluate_psnr(model, test_x, test_y) if test_x is not None and len(test_x) else None,
            "wall_time": time.perf_counter() - t0,
        }
        records.append(rec)
        log.info("epoch %d train_loss %.6g test_psnr %s", rec["epoch"], rec["train_loss"], rec["test_psnr"])
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(rec) + "\n")
        if checkpoint_dir is not None:
            save_checkpoint(model, Path(checkpoint_dir) / f"epoch_{epoch + 1:03d}", cfg, adam,
                            epoch=epoch + 1)
    return records


# ------------------------------------------------------------ checkpoints

def save_checkpoint(model: UnrolledModel, directory, cfg: TrainingConfig | None = None,
                    adam: AdamState | None = None, epoch: int = 0) -> Path:
    """One TOMO1 tensor file per parameter/buffer plus ``manifest.json``.

    ``epoch`` is the number of completed epochs; resuming starts from it.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []

    def put(group, name, arr):
        fname = f"{group}.{name}.tomo"
        tomo_io.save_tensor(directory / fname, arr)
        entries.append({"group": group, "name": name, "shape": list(arr.shape), "file": fname})

    for name, arr in model.named_params().items():
        put("param", name, arr)
    for name, arr in model.named_buffers().items():
        put("buffer", name, arr)
    if adam is not None:
        for name in adam.m:
            put("adam_m", name, adam.m[name])
            put("adam_v", name, adam.v[name])
    manifest = {
        "format": "pfbs-checkpoint-1",
        "epoch": int(epoch),
        "model": model.hyperparameters(),
        "preconditioner": model.preconditioner.name,
        "step_scalars": [float(t) for t in model.step_scalars],
        "geometry": model.projector.geometry.to_dict(),
        "geometry_hash": model.projector.geometry.digest(),
        "image_shape": list(model.projector.image_shape),
        "training": asdict(cfg) if cfg is not None else None,
        "adam": None if adam is None else {k: getattr(adam, k) for k in ("lr", "beta1", "beta2", "eps", "step")},
        "init": {"conv": "kaiming_uniform_fan_in_relu", "bias": "zeros", "bn": "gamma=1,beta=0",
                 "output_conv": "zeros" if model.zero_output else "kaiming_uniform_fan_in_relu"},
        "tensors": entries,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_checkpoint(directory, projector: Projector) -> tuple[UnrolledModel, AdamState | None, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest["geometry_hash"] != projector.geometry.digest():
        raise ValueError("checkpoint geometry does not match the projector")
    if tuple(manifest["image_shape"]) != tuple(projector.image_shape):
        raise ValueError("checkpoint image grid does not match the projector")
    hp = manifest["model"]
    model = UnrolledModel(projector, K=hp["K"], mode=hp["mode"], channels=hp["channels"],
                          n_mid=hp["n_mid"], final_relu=hp["final_relu"], seed=hp["seed"],
                          step_init=0.0, zero_output=hp.get("zero_output", False))
    params, buffers = model.named_params(), model.named_buffers()
    adam = None
    if manifest.get("adam"):
        adam = AdamState(**manifest["adam"])
    for e in manifest["tensors"]:
        arr = tomo_io.load_tensor(directory / e["file"]).reshape(e["shape"])
        if e["group"] == "param":
            params[e["name"]][...] = arr
        elif e["group"] == "buffer":
            buffers[e["name"]][...] = arr
        elif e["group"] == "adam_m":
            adam.m[e["name"]] = arr
        elif e["group"] == "adam_v":
            adam.v[e["name"]] = arr
    return model, adam, manifest
