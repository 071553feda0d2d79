"""BMS-SPPF: pyramid pooling followed by bidirectional spatial and channel gating.

Pipeline for an NCHW input ``x``::

    s     = SPPF(x)                                   # cascaded 5x5 max pools
    A_h   = sigmoid(GN(multi-kernel dwconv1d(mean_W(s))))    # (N, C, H, 1)
    A_w   = sigmoid(GN(multi-kernel dwconv1d(mean_H(s))))    # (N, C, 1, W)
    x'    = s * A_h * A_w
    y     = GN(unify(space_to_channel(x', s)))        # or avg-pool + identity
    a_c   = sigmoid(mean_positions(MHSA(y)))          # (N, C, 1, 1)
    out   = x' * a_c

The CAP/MHSA branch only produces the channel gate; no residual is added.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .autograd import record, value
from .nn import (
    BatchNormParams,
    Conv2dParams,
    DwConv1dParams,
    GroupNormParams,
    avgpool2d,
    batch_norm_infer,
    conv2d,
    dwconv1d,
    group_norm,
    maxpool2d,
    sigmoid,
    silu,
    softmax_lastdim,
)
from .tensor import (
    ShapeError,
    concat,
    elementwise_mul,
    matmul,
    reduce_mean,
    reshape_view,
    scale,
    split,
    transpose,
)

SPPF_POOL = 5
MSSA_BRANCHES = 4


# -------------------------------------------------------------------- configs


@dataclass(frozen=True)
class MssaConfig:
    kernels: tuple[int, ...] = (3, 5, 7, 9)
    gn_groups: int = 4

    def __post_init__(self):
        k = tuple(self.kernels)
        if len(k) != MSSA_BRANCHES:
            raise ValueError(f"MSSA needs {MSSA_BRANCHES} kernel sizes, got {k}")
        if any(x % 2 == 0 or x < 1 for x in k):
            raise ValueError(f"MSSA kernels must be odd and positive, got {k}")
        if any(b <= a for a, b in zip(k, k[1:])):
            raise ValueError(f"MSSA kernels must be strictly increasing, got {k}")
        if self.gn_groups < 1:
            raise ValueError("gn_groups must be positive")


@dataclass(frozen=True)
class CapConfig:
    """Spatial reduction ahead of channel attention.

    ``unify_groups=None`` makes the 1x1 unify conv fuse each source channel's
    ``s*s`` sub-pixel channels back into that channel (groups = C); an integer
    sets the group count explicitly (1 = dense).
    """

    strategy: str = "recombine"
    block: int = 2
    unify_groups: int | None = None

    def __post_init__(self):
        if self.strategy not in ("recombine", "pool"):
            raise ValueError(f"CAP strategy must be 'recombine' or 'pool', got {self.strategy!r}")
        if self.block < 1:
            raise ValueError("CAP block size must be positive")
        if self.unify_groups is not None and self.unify_groups < 1:
            raise ValueError("unify_groups must be positive")

    def unify_group_count(self, channels: int) -> int:
        return channels if self.unify_groups is None else self.unify_groups


@dataclass(frozen=True)
class MhsaConfig:
    heads: int = 4
    qkv_bias: bool = False

    def __post_init__(self):
        if self.heads < 1:
            raise ValueError("head count must be positive")


@dataclass(frozen=True)
class BmsSppfConfig:
    mssa: MssaConfig = field(default_factory=MssaConfig)
    cap: CapConfig = field(default_factory=CapConfig)
    mhsa: MhsaConfig = field(default_factory=MhsaConfig)

    def channel_multiple(self) -> int:
        """Every BMS-SPPF width must be a multiple of this."""
        m = math.lcm(MSSA_BRANCHES, self.mssa.gn_groups, self.mhsa.heads)
        return math.lcm(m, 8)

    def validate(self, channels: int) -> None:
        if channels % MSSA_BRANCHES:
            raise ShapeError(f"MSSA needs channels divisible by {MSSA_BRANCHES}, got {channels}")
        if channels % self.mssa.gn_groups:
            raise ShapeError(f"channels {channels} not divisible by gate GN groups {self.mssa.gn_groups}")
        if channels % self.mhsa.heads:
            raise ShapeError(f"channels {channels} not divisible by {self.mhsa.heads} heads")
        if self.cap.strategy == "recombine":
            cin = channels * self.cap.block**2
            g = self.cap.unify_group_count(channels)
            if cin % g or channels % g:
                raise ShapeError(f"unify conv {cin}->{channels} not divisible by {g} groups")


# --------------------------------------------------------------------- params


@dataclass
class ConvBlockParams:
    """conv (bias-free unless folded) -> optional inference BN -> SiLU."""

    conv: Conv2dParams
    bn: BatchNormParams | None = None


@dataclass
class MssaParams:
    h: list[DwConv1dParams]
    w: list[DwConv1dParams]
    gn_h: GroupNormParams
    gn_w: GroupNormParams


@dataclass
class CapParams:
    unify: Conv2dParams | None
    gn: GroupNormParams


@dataclass
class MhsaParams:
    q: Conv2dParams
    k: Conv2dParams
    v: Conv2dParams


@dataclass
class BmsSppfParams:
    cv1: ConvBlockParams
    cv2: ConvBlockParams
    mssa: MssaParams
    cap: CapParams
    mhsa: MhsaParams


def _kaiming(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


def init_conv_block(rng, cin, cout, k=1, stride=1, *, bn=True, dtype=np.float32) -> ConvBlockParams:
    w = _kaiming(rng, (cout, cin, k, k), cin * k * k, dtype)
    if bn:
        conv = Conv2dParams(w, None, stride, k // 2)
        norm = BatchNormParams(
            np.ones(cout, dtype), np.zeros(cout, dtype), np.zeros(cout, dtype), np.ones(cout, dtype)
        )
        return ConvBlockParams(conv, norm)
    b = (0.1 * rng.standard_normal(cout)).astype(dtype)
    return ConvBlockParams(Conv2dParams(w, b, stride, k // 2), None)


def init_mssa(rng, channels, cfg: MssaConfig, dtype=np.float32, zero=False) -> MssaParams:
    per = channels // MSSA_BRANCHES

    def branch(axis):
        out = []
        for k in cfg.kernels:
            w = np.zeros((per, k), dtype) if zero else _kaiming(rng, (per, k), k, dtype)
            out.append(DwConv1dParams(w, axis))
        return out

    def gn():
        return GroupNormParams(cfg.gn_groups, np.ones(channels, dtype), np.zeros(channels, dtype))

    return MssaParams(branch("H"), branch("W"), gn(), gn())


def init_cap(rng, channels, cfg: CapConfig, gn_groups: int, dtype=np.float32) -> CapParams:
    unify = None
    if cfg.strategy == "recombine":
        cin = channels * cfg.block**2
        g = cfg.unify_group_count(channels)
        unify = Conv2dParams(_kaiming(rng, (channels, cin // g, 1, 1), cin // g, dtype), None, groups=g)
    gn = GroupNormParams(gn_groups, np.ones(channels, dtype), np.zeros(channels, dtype))
    return CapParams(unify, gn)


def init_mhsa(rng, channels, cfg: MhsaConfig, dtype=np.float32) -> MhsaParams:
    h = cfg.heads
    cg = channels // h

    def proj():
        w = _kaiming(rng, (channels, cg, 1, 1), cg, dtype)
        b = np.zeros(channels, dtype) if cfg.qkv_bias else None
        return Conv2dParams(w, b, groups=h)

    return MhsaParams(proj(), proj(), proj())


def init_bms_sppf(
    rng, c_in: int, c_out: int, cfg: BmsSppfConfig | None = None, *, bn=True, dtype=np.float32
) -> BmsSppfParams:
    """Random parameters for a BMS-SPPF block mapping ``c_in`` to ``c_out`` channels."""
    cfg = cfg or BmsSppfConfig()
    cfg.validate(c_out)
    hidden = c_in // 2
    return BmsSppfParams(
        cv1=init_conv_block(rng, c_in, hidden, 1, bn=bn, dtype=dtype),
        cv2=init_conv_block(rng, 4 * hidden, c_out, 1, bn=bn, dtype=dtype),
        mssa=init_mssa(rng, c_out, cfg.mssa, dtype),
        cap=init_cap(rng, c_out, cfg.cap, cfg.mssa.gn_groups, dtype),
        mhsa=init_mhsa(rng, c_out, cfg.mhsa, dtype),
    )


# --------------------------------------------------------------------- stages


def conv_block(x, p: ConvBlockParams):
    y = conv2d(x, p.conv)
    if p.bn is not None:
        y = batch_norm_infer(y, p.bn)
    return silu(y)


def sppf_forward(x, cv1: ConvBlockParams, cv2: ConvBlockParams, k: int = SPPF_POOL):
    y = [conv_block(x, cv1)]
    for _ in range(3):
        y.append(maxpool2d(y[-1], k, 1, k // 2))
    return conv_block(concat(y, axis=1), cv2)


def _directional_gate(pooled, branches: list[DwConv1dParams], gn: GroupNormParams):
    c = value(pooled).shape[1]
    parts = split(pooled, [c // MSSA_BRANCHES] * MSSA_BRANCHES, axis=1)
    mixed = concat([dwconv1d(part, b) for part, b in zip(parts, branches)], axis=1)
    return sigmoid(group_norm(mixed, gn))


def mssa_forward(x, cfg: MssaConfig, p: MssaParams):
    """Return ``(x_prime, A_h, A_w)``."""
    c = value(x).shape[1]
    if c % MSSA_BRANCHES:
        raise ShapeError(f"MSSA needs channels divisible by {MSSA_BRANCHES}, got {c}")
    a_h = _directional_gate(reduce_mean(x, 3), p.h, p.gn_h)
    a_w = _directional_gate(reduce_mean(x, 2), p.w, p.gn_w)
    return elementwise_mul(elementwise_mul(x, a_h), a_w), a_h, a_w


def space_to_channel(x, s: int):
    """(N, C, H, W) -> (N, C*s*s, H/s, W/s); channel c*s*s + r*s + q holds block offset (r, q)."""
    xv = value(x)
    n, c, h, w = xv.shape
    if h % s or w % s:
        raise ShapeError(f"space_to_channel: {h}x{w} not divisible by block {s}")
    out = xv.reshape(n, c, h // s, s, w // s, s).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * s * s, h // s, w // s)
    return record("space_to_channel", out, (x,), lambda g: (_c2s(g, s),))


def _c2s(y: np.ndarray, s: int) -> np.ndarray:
    n, cs, h, w = y.shape
    c = cs // (s * s)
    return y.reshape(n, c, s, s, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * s, w * s)


def channel_to_space(y, s: int):
    """Inverse of :func:`space_to_channel`."""
    yv = value(y)
    if yv.shape[1] % (s * s):
        raise ShapeError(f"channel_to_space: {yv.shape[1]} channels not divisible by {s * s}")
    out = _c2s(yv, s)
    return record("channel_to_space", out, (y,), lambda g: (value(space_to_channel(g, s)),))


def cap_forward(x_prime, cfg: CapConfig, p: CapParams):
    if cfg.strategy == "recombine":
        y = conv2d(space_to_channel(x_prime, cfg.block), p.unify)
    else:
        y = avgpool2d(x_prime, cfg.block)
    return group_norm(y, p.gn)


@dataclass
class MhsaTrace:
    gate: Any
    attention: Any
    pre_gate: Any


def mhsa_channel_forward(y_norm, cfg: MhsaConfig, p: MhsaParams, trace: bool = False):
    """Channel gate ``a_c`` of shape (N, C, 1, 1); with ``trace=True`` return an :class:`MhsaTrace`."""
    n, c, h, w = value(y_norm).shape
    heads = cfg.heads
    if c % heads:
        raise ShapeError(f"channels {c} not divisible by {heads} heads")
    d_k = c // heads
    length = h * w

    def to_heads(t):
        # (N, C, h, w) -> (N, heads, L, d_k)
        return transpose(reshape_view(t, (n, heads, d_k, length)), 2, 3)

    q = to_heads(conv2d(y_norm, p.q))
    k = to_heads(conv2d(y_norm, p.k))
    v = to_heads(conv2d(y_norm, p.v))
    logits = scale(matmul(q, transpose(k, 2, 3)), 1.0 / math.sqrt(d_k))
    attn = softmax_lastdim(logits)
    merged = reshape_view(transpose(matmul(attn, v), 2, 3), (n, c, length, 1))
    pre_gate = reduce_mean(merged, 2)
    gate = sigmoid(pre_gate)
    if trace:
        return MhsaTrace(gate, attn, pre_gate)
    return gate


@dataclass
class BmsSppfTrace:
    sppf: Any
    x_prime: Any
    a_h: Any
    a_w: Any
    y_norm: Any
    a_c: Any
    attention: Any
    out: Any


def bms_sppf_forward(
    x, cfg: BmsSppfConfig, p: BmsSppfParams, *, bypass_channel_gate: bool = False, trace: bool = False
):
    """Full block. ``bypass_channel_gate`` forces ``a_c = 1`` (output = MSSA output)."""
    s = sppf_forward(x, p.cv1, p.cv2)
    cfg.validate(value(s).shape[1])
    x_prime, a_h, a_w = mssa_forward(s, cfg.mssa, p.mssa)
    if bypass_channel_gate:
        if trace:
            return BmsSppfTrace(s, x_prime, a_h, a_w, None, None, None, x_prime)
        return x_prime
    y_norm = cap_forward(x_prime, cfg.cap, p.cap)
    m = mhsa_channel_forward(y_norm, cfg.mhsa, p.mhsa, trace=True)
    out = elementwise_mul(x_prime, m.gate)
    if trace:
        return BmsSppfTrace(s, x_prime, a_h, a_w, y_norm, m.gate, m.attention, out)
    return out
