"""Differentiable primitives on dense NCHW arrays.

Every forward returns ``(output, cache)``; the matching ``*_backward`` takes
that cache plus the output gradient. A cache can be consumed exactly once.
Arrays are plain ``numpy.ndarray`` in (batch, channel, height, width) order;
dtype follows the input (float32 for training, float64 for gradient checks).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def tensor4(data, dtype=np.float32) -> np.ndarray:
    """Return ``data`` as a C-contiguous rank-4 array of ``dtype``."""
    arr = np.ascontiguousarray(data, dtype=dtype)
    if arr.ndim != 4:
        raise ShapeError(f"expected a rank-4 (n, c, h, w) tensor, got shape {arr.shape}")
    return arr


def _check_rank4(x: np.ndarray, what: str = "x") -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what} must be rank-4 (n, c, h, w), got shape {x.shape}")


class Cache:
    """Values saved by one forward call, released to exactly one backward call."""

    __slots__ = ("op", "out_shape", "_saved", "consumed")

    def __init__(self, op: str, out_shape: tuple, **saved):
        self.op = op
        self.out_shape = tuple(out_shape)
        self._saved = saved
        self.consumed = False

    def take(self, op: str, g_out) -> dict:
        if self.op != op:
            raise ContractError(f"{op}_backward received a cache produced by {self.op}")
        if self.consumed:
            raise ContractError(f"{op} cache was already consumed by a previous backward")
        g_shape = np.shape(g_out)
        if tuple(g_shape) != self.out_shape:
            raise ContractError(
                f"{op}_backward: gradient shape {tuple(g_shape)} does not match "
                f"forward output shape {self.out_shape}"
            )
        self.consumed = True
        saved, self._saved = self._saved, {}
        return saved


@dataclass
class ConvParams:
    weights: np.ndarray  # (out_channels, in_channels, kh, kw)
    bias: np.ndarray  # (out_channels,)

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    n, c, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
    xp[:, :, ph:ph + h, pw:pw + w] = x
    cols = np.empty((n, c, kh, kw, h, w), dtype=x.dtype)
    for u in range(kh):
        for v in range(kw):
            cols[:, :, u, v] = xp[:, :, u:u + h, v:v + w]
    return cols.reshape(n, c * kh * kw, h * w)


def _col2im(cols: np.ndarray, shape: tuple, kh: int, kw: int) -> np.ndarray:
    n, c, h, w = shape
    ph, pw = kh // 2, kw // 2
    cols = cols.reshape(n, c, kh, kw, h, w)
    gp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    for u in range(kh):
        for v in range(kw):
            gp[:, :, u:u + h, v:v + w] += cols[:, :, u, v]
    return np.ascontiguousarray(gp[:, :, ph:ph + h, pw:pw + w])


def conv2d(x: np.ndarray, p: ConvParams):
    """Stride-1 convolution (cross-correlation) with zero 'same' padding."""
    _check_rank4(x)
    w = p.weights
    if w.ndim != 4:
        raise ShapeError(f"conv weights must be rank-4, got shape {w.shape}")
    o, c, kh, kw = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"same padding needs odd kernel sizes, got {kh}x{kw}")
    if x.shape[1] != c:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels but weights expect {c}")
    if p.bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {p.bias.shape} does not match {o} output channels")
    n, _, h, wd = x.shape
    cols = _im2col(x, kh, kw)
    wm = w.reshape(o, c * kh * kw)
    y = np.matmul(wm, cols).reshape(n, o, h, wd)
    y += p.bias.reshape(1, o, 1, 1)
    return y, Cache("conv2d", y.shape, cols=cols, weights=w, x_shape=x.shape)


def conv2d_backward(cache: Cache, g_out: np.ndarray, need_input_grad: bool = True):
    """Returns ``(g_x, g_w, g_b)``; ``g_x`` is None when not requested."""
    s = cache.take("conv2d", g_out)
    w, cols, x_shape = s["weights"], s["cols"], s["x_shape"]
    o, c, kh, kw = w.shape
    n, _, h, wd = x_shape
    gf = g_out.reshape(n, o, h * wd)
    g_w = np.zeros((o, c * kh * kw), dtype=g_out.dtype)
    for i in range(n):
        g_w += gf[i] @ cols[i].T
    g_b = gf.sum(axis=(0, 2))
    g_x = None
    if need_input_grad:
        g_cols = np.matmul(w.reshape(o, -1).T, gf)
        g_x = _col2im(g_cols, x_shape, kh, kw)
    return g_x, g_w.reshape(w.shape), g_b


# --------------------------------------------------------------------------
# resampling and merging
# --------------------------------------------------------------------------

def maxpool2(x: np.ndarray):
    """2x2 max pooling, stride 2. Ties go to the smallest flat index in the window."""
    _check_rank4(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even height and width, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = np.argmax(win, axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(y), Cache("maxpool2", y.shape, argmax=idx, x_shape=x.shape)


def maxpool2_backward(cache: Cache, g_out: np.ndarray) -> np.ndarray:
    s = cache.take("maxpool2", g_out)
    idx = s["argmax"]
    n, c, h, w = s["x_shape"]
    win = np.zeros((n, c, h // 2, w // 2, 4), dtype=g_out.dtype)
    np.put_along_axis(win, idx[..., None], g_out[..., None], axis=-1)
    g = win.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(g.reshape(n, c, h, w))


def upsample_nearest2(x: np.ndarray):
    _check_rank4(x)
    n, c, h, w = x.shape
    y = np.broadcast_to(x[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)
    return np.ascontiguousarray(y), Cache("upsample2", (n, c, 2 * h, 2 * w))


def upsample_nearest2_backward(cache: Cache, g_out: np.ndarray) -> np.ndarray:
    cache.take("upsample2", g_out)
    n, c, h2, w2 = g_out.shape
    return g_out.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))


def concat_channels(a: np.ndarray, b: np.ndarray):
    _check_rank4(a, "a")
    _check_rank4(b, "b")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(
            f"concat_channels: batch/spatial dims differ: a {a.shape} vs b {b.shape}"
        )
    y = np.concatenate([a, b], axis=1)
    return y, Cache("concat", y.shape, split=a.shape[1])


def concat_channels_backward(cache: Cache, g_out: np.ndarray):
    s = cache.take("concat", g_out)
    k = s["split"]
    return np.ascontiguousarray(g_out[:, :k]), np.ascontiguousarray(g_out[:, k:])


# --------------------------------------------------------------------------
# normalization and activations
# --------------------------------------------------------------------------

@dataclass
class BNState:
    """Running statistics. Arrays are updated in place so they can alias registry storage."""

    running_mean: np.ndarray
    running_var: np.ndarray
    num_updates: np.ndarray  # shape (1,)

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BNState":
        return cls(np.zeros(channels, dtype), np.ones(channels, dtype), np.zeros(1, dtype))

    @property
    def initialized(self) -> bool:
        return bool(self.num_updates[0] > 0)


def batchnorm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, state: BNState, mode: str = "train"):
    _check_rank4(x)
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: gamma/beta must have shape ({c},), got {gamma.shape}/{beta.shape}")
    if mode == "train":
        if n * h * w < 2:
            raise ContractError("batchnorm in train mode needs at least 2 values per channel")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if state.initialized:
            state.running_mean *= BN_MOMENTUM
            state.running_mean += (1 - BN_MOMENTUM) * mean
            state.running_var *= BN_MOMENTUM
            state.running_var += (1 - BN_MOMENTUM) * var
        else:
            state.running_mean[...] = mean
            state.running_var[...] = var
        state.num_updates += 1
    elif mode == "infer":
        if not state.initialized:
            raise ContractError("batchnorm in infer mode before any running statistics were collected")
        mean = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    inv_std = (1.0 / np.sqrt(var + BN_EPS)).astype(x.dtype)
    xhat = (x - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    y = xhat * gamma.reshape(1, c, 1, 1) + beta.reshape(1, c, 1, 1)
    return y, Cache("batchnorm", y.shape, xhat=xhat, inv_std=inv_std, gamma=gamma, mode=mode)


def batchnorm_backward(cache: Cache, g_out: np.ndarray):
    """Returns ``(g_x, g_gamma, g_beta)``."""
    s = cache.take("batchnorm", g_out)
    xhat, inv_std, gamma = s["xhat"], s["inv_std"], s["gamma"]
    c = xhat.shape[1]
    g_beta = g_out.sum(axis=(0, 2, 3))
    g_gamma = (g_out * xhat).sum(axis=(0, 2, 3))
    g_xhat = g_out * gamma.reshape(1, c, 1, 1)
    if s["mode"] == "infer":
        return g_xhat * inv_std.reshape(1, c, 1, 1), g_gamma, g_beta
    m = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    sum_g = g_xhat.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
    sum_gx = (g_xhat * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
    g_x = (inv_std.reshape(1, c, 1, 1) / m) * (m * g_xhat - sum_g - xhat * sum_gx)
    return g_x, g_gamma, g_beta


def relu(x: np.ndarray):
    # NaN passes through so a corrupted batch surfaces as a non-finite loss
    mask = ~(x <= 0)
    return np.where(mask, x, 0).astype(x.dtype, copy=False), Cache("relu", x.shape, mask=mask)


def relu_backward(cache: Cache, g_out: np.ndarray) -> np.ndarray:
    return np.where(cache.take("relu", g_out)["mask"], g_out, 0).astype(g_out.dtype, copy=False)


def sigmoid(x: np.ndarray):
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)
    return y, Cache("sigmoid", x.shape, y=y)


def sigmoid_backward(cache: Cache, g_out: np.ndarray) -> np.ndarray:
    y = cache.take("sigmoid", g_out)["y"]
    return g_out * y * (1 - y)


def mse(pred: np.ndarray, target: np.ndarray):
    """Mean squared error as a Python float (accumulated in float64)."""
    if pred.shape != target.shape:
        raise ShapeError(f"mse: prediction shape {pred.shape} != target shape {target.shape}")
    diff = pred - target
    loss = float(np.mean(np.square(diff, dtype=np.float64)))
    return loss, Cache("mse", (), diff=diff)


def mse_backward(cache: Cache, g_out=1.0) -> np.ndarray:
    diff = cache.take("mse", g_out)["diff"]
    return (diff * (2.0 * float(g_out) / diff.size)).astype(diff.dtype, copy=False)
