"""Neural kernels with forward and reverse-mode gradient rules.

Layout is NCHW throughout and convolution is cross-correlation (no kernel
flip). Parameter records hold either arrays or tape-tracked ``Var`` values so
the same forward code serves inference and gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autograd import record, value
from .tensor import ShapeError

GROUP_NORM_EPS = 1e-5
BATCH_NORM_EPS = 1e-3


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


@dataclass
class Conv2dParams:
    weight: Any  # (Cout, Cin/groups, kh, kw)
    bias: Any = None  # (Cout,)
    stride: int | tuple[int, int] = 1
    padding: int | tuple[int, int] = 0
    groups: int = 1

    def __post_init__(self):
        w = value(self.weight)
        if w.ndim != 4:
            raise ShapeError(f"conv weight must be rank 4, got {w.shape}")
        cout, _, kh, kw = w.shape
        if kh < 1 or kw < 1:
            raise ShapeError("kernel extents must be >= 1")
        if self.groups < 1 or cout % self.groups:
            raise ShapeError(f"Cout={cout} not divisible by groups={self.groups}")
        if min(_pair(self.stride)) < 1 or min(_pair(self.padding)) < 0:
            raise ValueError("stride must be positive and padding non-negative")
        if self.bias is not None and value(self.bias).shape != (cout,):
            raise ShapeError(f"bias shape {value(self.bias).shape} != ({cout},)")

    @property
    def in_channels(self) -> int:
        return value(self.weight).shape[1] * self.groups

    @property
    def out_channels(self) -> int:
        return value(self.weight).shape[0]


@dataclass
class DwConv1dParams:
    """Per-channel 1-D kernels applied along ``axis`` ("H" or "W") with same padding."""

    weight: Any  # (C, k)
    axis: str = "W"

    def __post_init__(self):
        w = value(self.weight)
        if w.ndim != 2:
            raise ShapeError(f"dwconv1d weight must be (C, k), got {w.shape}")
        if w.shape[1] % 2 == 0:
            raise ValueError(f"dwconv1d kernel length must be odd, got {w.shape[1]}")
        if self.axis not in ("H", "W"):
            raise ValueError(f"axis must be 'H' or 'W', got {self.axis!r}")


@dataclass
class GroupNormParams:
    groups: int
    gamma: Any
    beta: Any
    eps: float = GROUP_NORM_EPS

    def __post_init__(self):
        c = value(self.gamma).shape[0]
        if self.groups < 1 or c % self.groups:
            raise ValueError(f"channels {c} not divisible by {self.groups} groups")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


@dataclass
class BatchNormParams:
    gamma: Any
    beta: Any
    mean: Any = field(metadata={"buffer": True})
    var: Any = field(metadata={"buffer": True})
    eps: float = BATCH_NORM_EPS

    def __post_init__(self):
        if np.any(value(self.var) < 0):
            raise ValueError("running variance must be non-negative")


# ---------------------------------------------------------------- convolution


def conv2d(x, p: Conv2dParams):
    xv, wv = value(x), value(p.weight)
    bv = value(p.bias)
    if xv.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input, got {xv.shape}")
    n, c, h, w = xv.shape
    cout, cg, kh, kw = wv.shape
    g = p.groups
    if c != cg * g:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weight expects {cg * g}")
    sh, sw = _pair(p.stride)
    ph, pw = _pair(p.padding)
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output extent would be {ho}x{wo}")
    og = cout // g

    if kh == kw == 1 and sh == sw == 1 and ph == pw == 0:
        cols = xv.reshape(n, g, cg, h * w).transpose(1, 0, 3, 2).reshape(g, n * h * w, cg)
    else:
        xp = np.pad(xv, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else xv
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
        win = win.reshape(n, g, cg, ho, wo, kh, kw)
        cols = win.transpose(1, 0, 3, 4, 2, 5, 6).reshape(g, n * ho * wo, cg * kh * kw)
    wm = wv.reshape(g, og, cg * kh * kw)
    out = np.matmul(cols, wm.transpose(0, 2, 1))
    out = out.reshape(g, n, ho, wo, og).transpose(1, 0, 4, 2, 3).reshape(n, cout, ho, wo)
    if bv is not None:
        out = out + bv.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(grad):
        gm = grad.reshape(n, g, og, ho, wo).transpose(1, 0, 3, 4, 2).reshape(g, n * ho * wo, og)
        dw = np.matmul(gm.transpose(0, 2, 1), cols).reshape(wv.shape)
        dcols = np.matmul(gm, wm)
        dcols = dcols.reshape(g, n, ho, wo, cg, kh, kw).transpose(1, 0, 4, 5, 6, 2, 3)
        dcols = dcols.reshape(n, c, kh, kw, ho, wo)
        dxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=xv.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += dcols[:, :, i, j]
        dx = dxp[:, :, ph : ph + h, pw : pw + w]
        db = grad.sum(axis=(0, 2, 3)) if bv is not None else None
        return dx, dw, db

    return record("conv2d", out, (x, p.weight, p.bias), backward)


def dwconv1d(x, p: DwConv1dParams):
    """Depthwise 1-D convolution along H or W with zero same-padding."""
    xv, wv = value(x), value(p.weight)
    if xv.ndim != 4:
        raise ShapeError(f"dwconv1d expects NCHW input, got {xv.shape}")
    c, k = wv.shape
    if xv.shape[1] != c:
        raise ShapeError(f"dwconv1d has {c} kernels for {xv.shape[1]} channels")
    axis = 2 if p.axis == "H" else 3
    length = xv.shape[axis]
    pad = k // 2
    widths = [(0, 0)] * 4
    widths[axis] = (pad, pad)
    xp = np.pad(xv, widths)
    wshape = [1, c, 1, 1]

    def tap(arr, j):
        index = [slice(None)] * 4
        index[axis] = slice(j, j + length)
        return arr[tuple(index)]

    out = np.zeros_like(xv)
    for j in range(k):
        out += wv[:, j].reshape(wshape) * tap(xp, j)

    def backward(grad):
        dxp = np.zeros_like(xp)
        dw = np.empty_like(wv)
        for j in range(k):
            index = [slice(None)] * 4
            index[axis] = slice(j, j + length)
            dxp[tuple(index)] += wv[:, j].reshape(wshape) * grad
            dw[:, j] = (grad * tap(xp, j)).sum(axis=(0, 2, 3))
        index = [slice(None)] * 4
        index[axis] = slice(pad, pad + length)
        return dxp[tuple(index)], dw

    return record("dwconv1d", out, (x, p.weight), backward)


# -------------------------------------------------------------------- pooling


def maxpool2d(x, k: int, stride: int = 1, padding: int = 0):
    """Max pooling; gradient routes to the first maximal element in row-major order."""
    xv = value(x)
    n, c, h, w = xv.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"maxpool2d output extent would be {ho}x{wo}")
    xp = np.pad(
        xv, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf
    )
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = np.ascontiguousarray(win.max(axis=(4, 5)))

    def backward(grad):
        flat = win.reshape(n, c, ho, wo, k * k)
        idx = flat.argmax(axis=-1)
        ki, kj = np.divmod(idx, k)
        rows = np.arange(ho).reshape(1, 1, ho, 1) * stride + ki
        cols = np.arange(wo).reshape(1, 1, 1, wo) * stride + kj
        dxp = np.zeros(xp.shape, dtype=xv.dtype)
        nn_, cc = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
        nn_ = np.broadcast_to(nn_[:, :, None, None], idx.shape)
        cc = np.broadcast_to(cc[:, :, None, None], idx.shape)
        np.add.at(dxp, (nn_, cc, rows, cols), grad)
        return (dxp[:, :, padding : padding + h, padding : padding + w],)

    return record("maxpool2d", out, (x,), backward)


def avgpool2d(x, s: int):
    """Non-overlapping ``s x s`` average pooling (stride ``s``)."""
    xv = value(x)
    n, c, h, w = xv.shape
    if h % s or w % s:
        raise ShapeError(f"avgpool2d: spatial {h}x{w} not divisible by {s}")
    out = xv.reshape(n, c, h // s, s, w // s, s).mean(axis=(3, 5))

    def backward(grad):
        g = np.repeat(np.repeat(grad, s, axis=2), s, axis=3)
        return (g / (s * s),)

    return record("avgpool2d", out, (x,), backward)


# ---------------------------------------------------------------- activations


def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(v.dtype, copy=False)


def sigmoid(x):
    s = _sigmoid(value(x))
    return record("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def silu(x):
    xv = value(x)
    s = _sigmoid(xv)
    return record("silu", xv * s, (x,), lambda g: (g * s * (1 + xv * (1 - s)),))


def softmax_lastdim(x):
    xv = value(x)
    e = np.exp(xv - xv.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record("softmax", y, (x,), backward)


# ------------------------------------------------------------- normalization


def group_norm(x, p: GroupNormParams):
    xv = value(x)
    gamma, beta = value(p.gamma), value(p.beta)
    n, c = xv.shape[:2]
    if c != gamma.shape[0]:
        raise ShapeError(f"group_norm has {gamma.shape[0]} channels, input has {c}")
    if c % p.groups:
        raise ValueError(f"channels {c} not divisible by {p.groups} groups")
    spatial = xv.shape[2:]
    xg = xv.reshape(n, p.groups, -1)
    mean = xg.mean(axis=-1, keepdims=True)
    var = xg.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + p.eps)
    xhat = ((xg - mean) * inv).reshape(xv.shape)
    cshape = (1, c) + (1,) * len(spatial)
    out = xhat * gamma.reshape(cshape) + beta.reshape(cshape)
    reduce_axes = (0,) + tuple(range(2, xv.ndim))

    def backward(g):
        dgamma = (g * xhat).sum(axis=reduce_axes)
        dbeta = g.sum(axis=reduce_axes)
        dxhat = (g * gamma.reshape(cshape)).reshape(n, p.groups, -1)
        xh = xhat.reshape(n, p.groups, -1)
        dx = inv * (
            dxhat - dxhat.mean(axis=-1, keepdims=True) - xh * (dxhat * xh).mean(axis=-1, keepdims=True)
        )
        return dx.reshape(xv.shape), dgamma, dbeta

    return record("group_norm", out, (x, p.gamma, p.beta), backward)


def batch_norm_infer(x, p: BatchNormParams):
    """Inference-mode batch norm; running statistics are constants."""
    xv = value(x)
    gamma, beta = value(p.gamma), value(p.beta)
    mean, var = value(p.mean), value(p.var)
    shape = (1, -1, 1, 1)
    inv = 1.0 / np.sqrt(var + p.eps)
    xhat = (xv - mean.reshape(shape)) * inv.reshape(shape)
    out = xhat * gamma.reshape(shape) + beta.reshape(shape)

    def backward(g):
        return (
            g * (gamma * inv).reshape(shape),
            (g * xhat).sum(axis=(0, 2, 3)),
            g.sum(axis=(0, 2, 3)),
        )

    return record("batch_norm", out, (x, p.gamma, p.beta), backward)


def nearest_upsample(x, factor: int = 2):
    """Nearest-neighbour upsampling; forward only."""
    xv = value(x)
    out = np.repeat(np.repeat(xv, factor, axis=2), factor, axis=3)
    return record("nearest_upsample", out, (x,), None)


__all__ = [
    "BATCH_NORM_EPS",
    "GROUP_NORM_EPS",
    "BatchNormParams",
    "Conv2dParams",
    "DwConv1dParams",
    "GroupNormParams",
    "avgpool2d",
    "batch_norm_infer",
    "conv2d",
    "dwconv1d",
    "group_norm",
    "maxpool2d",
    "nearest_upsample",
    "sigmoid",
    "silu",
    "softmax_lastdim",
]
