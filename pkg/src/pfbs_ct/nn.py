"""Small numpy neural-network kernel: 3x3 convolution, batch norm, ReLU, Adam.

Tensors are plain float64 arrays shaped ``(batch, channels, height, width)``.
Every layer exposes a forward that returns its output plus whatever the
reverse pass needs, and a backward that maps the output gradient to input
and parameter gradients. There is no graph: callers chain backward calls
in reverse order themselves.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def check_tensor(x: np.ndarray, channels: int | None = None) -> np.ndarray:
    if x.ndim != 4:
        raise ValueError(f"expected (N, C, H, W), got shape {x.shape}")
    if channels is not None and x.shape[1] != channels:
        raise ValueError(f"expected {channels} channels, got {x.shape[1]}")
    return x


def _im2col(x: np.ndarray) -> np.ndarray:
    """``(N, C, H, W)`` -> ``(C*9, N*H*W)`` patches for a padded 3x3 window."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # (N, C, H, W, 3, 3)
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * 9, n * h * w)


def _col2im(cols: np.ndarray, shape: tuple) -> np.ndarray:
    n, c, h, w = shape
    cols = cols.reshape(c, 3, 3, n, h, w)
    xp = np.zeros((n, c, h + 2, w + 2))
    for di in range(3):
        for dj in range(3):
            xp[:, :, di:di + h, dj:dj + w] += cols[:, di, dj].transpose(1, 0, 2, 3)
    return xp[:, :, 1:-1, 1:-1]


@dataclass
class ConvLayer:
    """3x3 cross-correlation, stride 1, zero padding 1."""

    weight: np.ndarray  # (out_ch, in_ch, 3, 3)
    bias: np.ndarray | None = None  # (out_ch,)

    @property
    def in_ch(self) -> int:
        return self.weight.shape[1]

    @property
    def out_ch(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(cls, in_ch: int, out_ch: int, rng: np.random.Generator, bias: bool = True) -> "ConvLayer":
        # Kaiming-uniform, fan-in mode, ReLU gain
        bound = math.sqrt(6.0 / (in_ch * 9))
        w = rng.uniform(-bound, bound, size=(out_ch, in_ch, 3, 3))
        return cls(w, np.zeros(out_ch) if bias else None)

    def params(self) -> dict:
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p


def _conv_forward_cols(layer: ConvLayer, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    check_tensor(x, layer.in_ch)
    n, _, h, w = x.shape
    cols = _im2col(x)
    out = layer.weight.reshape(layer.out_ch, -1) @ cols
    out = out.reshape(layer.out_ch, n, h, w).transpose(1, 0, 2, 3)
    if layer.bias is not None:
        out = out + layer.bias[None, :, None, None]
    return np.ascontiguousarray(out), cols


def conv_forward(layer: ConvLayer, x: np.ndarray) -> np.ndarray:
    return _conv_forward_cols(layer, x)[0]


def conv_backward(layer: ConvLayer, x: np.ndarray, grad_out: np.ndarray,
                  cols: np.ndarray | None = None):
    """Returns ``(grad_x, grad_weight, grad_bias)``; ``grad_bias`` is None without a bias.

    ``cols`` may pass the patch matrix kept from the forward call.
    """
    check_tensor(x, layer.in_ch)
    n, _, h, w = x.shape
    if grad_out.shape != (n, layer.out_ch, h, w):
        raise ValueError(f"grad_out shape {grad_out.shape} != {(n, layer.out_ch, h, w)}")
    g = grad_out.transpose(1, 0, 2, 3).reshape(layer.out_ch, -1)
    if cols is None:
        cols = _im2col(x)
    grad_w = (g @ cols.T).reshape(layer.weight.shape)
    grad_x = _col2im(layer.weight.reshape(layer.out_ch, -1).T @ g, x.shape)
    grad_b = g.sum(axis=1) if layer.bias is not None else None
    return grad_x, grad_w, grad_b


@dataclass
class BatchNormLayer:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def init(cls, channels: int) -> "BatchNormLayer":
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels))

    def params(self) -> dict:
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self) -> dict:
        return {"running_mean": self.running_mean, "running_var": self.running_var}


@dataclass
class BnCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    train: bool


def bn_forward(layer: BatchNormLayer, x: np.ndarray, mode: str = "train",
               update_stats: bool = True) -> tuple[np.ndarray, BnCache]:
    """Per-channel batch normalisation.

    ``train`` normalises with the biased batch statistics and, when
    ``update_stats`` is set, folds them into the running estimates
    (unbiased variance, as torch does). ``eval`` uses the running estimates.
    """
    check_tensor(x, layer.gamma.shape[0])
    if x.shape[0] == 0:
        raise ValueError("batch norm needs a non-empty batch")
    if mode == "train":
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if update_stats:
            m = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var * m / max(m - 1, 1)
            layer.running_mean *= 1 - layer.momentum
            layer.running_mean += layer.momentum * mean
            layer.running_var *= 1 - layer.momentum
            layer.running_var += layer.momentum * unbiased
    elif mode == "eval":
        mean, var = layer.running_mean, layer.running_var
    else:
        raise ValueError(f"unknown batch-norm mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + layer.eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = layer.gamma[None, :, None, None] * xhat + layer.beta[None, :, None, None]
    return out, BnCache(xhat, inv_std, mode == "train")


def bn_backward(layer: BatchNormLayer, cache: BnCache, grad_out: np.ndarray):
    """Returns ``(grad_x, grad_gamma, grad_beta)``."""
    xhat = cache.xhat
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    dxhat = grad_out * layer.gamma[None, :, None, None]
    inv_std = cache.inv_std[None, :, None, None]
    if not cache.train:
        return dxhat * inv_std, grad_gamma, grad_beta
    m = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
    s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
    grad_x = inv_std / m * (m * dxhat - s1 - xhat * s2)
    return grad_x, grad_gamma, grad_beta


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return np.where(x > 0.0, grad_out, 0.0)


class DenseCNN:
    """Residual CNN used as the learned proximal map of one unrolled stage.

    ``Conv(in->C)+ReLU``, then ``n_mid`` blocks of ``Conv(C->C)+BN+ReLU``,
    then ``Conv(C->1)`` followed by ReLU unless ``final_relu`` is off. Convs
    that feed a batch norm carry no bias (the BN shift absorbs it).

    ``zero_output`` starts the output conv at zero so that a fresh network
    returns a zero residual. Its Kaiming draw is still taken, which keeps the
    random stream of every other layer unchanged.
    """

    def __init__(self, in_ch: int, channels: int = 64, n_mid: int = 3,
                 final_relu: bool = True, rng: np.random.Generator | None = None,
                 zero_output: bool = False):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_ch = in_ch
        self.channels = channels
        self.final_relu = final_relu
        self.first = ConvLayer.init(in_ch, channels, rng)
        self.mid = [ConvLayer.init(channels, channels, rng, bias=False) for _ in range(n_mid)]
        self.bns = [BatchNormLayer.init(channels) for _ in range(n_mid)]
        self.last = ConvLayer.init(channels, 1, rng)
        if zero_output:
            self.last.weight[:] = 0.0

    def named_params(self) -> dict:
        p = {f"first.{k}": v for k, v in self.first.params().items()}
        for i, (conv, bn) in enumerate(zip(self.mid, self.bns)):
            p.update({f"mid{i}.conv.{k}": v for k, v in conv.params().items()})
            p.update({f"mid{i}.bn.{k}": v for k, v in bn.params().items()})
        p.update({f"last.{k}": v for k, v in self.last.params().items()})
        return p

    def named_buffers(self) -> dict:
        b = {}
        for i, bn in enumerate(self.bns):
            b.update({f"mid{i}.bn.{k}": v for k, v in bn.buffers().items()})
        return b

    def forward(self, x: np.ndarray, mode: str = "train", update_stats: bool = True):
        """Returns ``(output, cache)``; output has one channel."""
        cache = {"x": x}
        h, cache["first_cols"] = _conv_forward_cols(self.first, x)
        cache["first_pre"] = h
        h = relu_forward(h)
        for i, (conv, bn) in enumerate(zip(self.mid, self.bns)):
            cache[f"mid{i}_in"] = h
            h, cache[f"mid{i}_cols"] = _conv_forward_cols(conv, h)
            h, cache[f"mid{i}_bn"] = bn_forward(bn, h, mode, update_stats)
            cache[f"mid{i}_pre"] = h
            h = relu_forward(h)
        cache["last_in"] = h
        h, cache["last_cols"] = _conv_forward_cols(self.last, h)
        cache["last_pre"] = h
        if self.final_relu:
            h = relu_forward(h)
        return h, cache

    def backward(self, cache: dict, grad_out: np.ndarray):
        """Returns ``(grad_input, grads)`` with ``grads`` keyed like :meth:`named_params`."""
        grads = {}
        g = grad_out
        if self.final_relu:
            g = relu_backward(cache["last_pre"], g)
        g, gw, gb = conv_backward(self.last, cache["last_in"], g, cache["last_cols"])
        grads["last.weight"], grads["last.bias"] = gw, gb
        for i in reversed(range(len(self.mid))):
            g = relu_backward(cache[f"mid{i}_pre"], g)
            g, ggamma, gbeta = bn_backward(self.bns[i], cache[f"mid{i}_bn"], g)
            grads[f"mid{i}.bn.gamma"], grads[f"mid{i}.bn.beta"] = ggamma, gbeta
            g, gw, _ = conv_backward(self.mid[i], cache[f"mid{i}_in"], g, cache[f"mid{i}_cols"])
            grads[f"mid{i}.conv.weight"] = gw
        g = relu_backward(cache["first_pre"], g)
        g, gw, gb = conv_backward(self.first, cache["x"], g, cache["first_cols"])
        grads["first.weight"], grads["first.bias"] = gw, gb
        return g, grads


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict) -> None:
    """In-place Adam update with bias correction over matching ``params``/``grads`` dicts."""
    if set(params) != set(grads):
        raise ValueError("params and grads must have the same keys")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = np.asarray(grads[name])
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
