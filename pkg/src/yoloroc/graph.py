"""Detection network as a typed block graph.

The topology is the YOLOv8 backbone / PAN neck / decoupled anchor-free head.
A :class:`CompressionPolicy` sets the nominal channel ladder, C2f repeat
counts and the pooling block at the backbone tail; a :class:`ScalePolicy`
turns nominal widths and depths into effective ones.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Any

import numpy as np

from .autograd import value
from .bms_sppf import (
    BmsSppfConfig,
    BmsSppfParams,
    ConvBlockParams,
    bms_sppf_forward,
    conv_block,
    init_bms_sppf,
    init_conv_block,
    sppf_forward,
)
from .nn import BatchNormParams, Conv2dParams, conv2d, nearest_upsample
from .params import iter_slots
from .tensor import ShapeError, add, concat, split

REG_MAX = 16
STRIDES = (8, 16, 32)
BASE_MAX_CHANNELS = 1024
# Nominal backbone ladder as fractions of the maximum width (P1..P5).
BACKBONE_FRACTIONS = (1 / 16, 1 / 8, 1 / 4, 1 / 2, 1)
DAMAGE_CLASSES = ("D00", "D10", "D20", "D40")


class GraphError(ValueError):
    """Structural inconsistency in a model graph."""


class MissingWeightError(KeyError):
    """A weight slot required by the graph is absent from the store."""


def make_divisible(x: float, divisor: int = 8) -> int:
    return int(math.ceil(x / divisor) * divisor)


@dataclass(frozen=True)
class ScalePolicy:
    depth: float = 1 / 3
    width: float = 0.25
    max_channels: int = BASE_MAX_CHANNELS

    def __post_init__(self):
        if not (0 < self.depth <= 1 and 0 < self.width <= 1):
            raise ValueError("depth and width multipliers must lie in (0, 1]")

    def channels(self, nominal: float) -> int:
        return make_divisible(min(nominal, self.max_channels) * self.width, 8)

    def repeats(self, nominal: int) -> int:
        return max(1, math.ceil(nominal * self.depth - 1e-9))


@dataclass(frozen=True)
class CompressionPolicy:
    """Nominal architecture knobs.

    ``max_channels`` is the top of the nominal backbone ladder; every backbone
    width is the same fraction of it as in the uncompressed network, so
    halving it halves the whole ladder. ``head_channels`` are the nominal
    P3/P4/P5 neck widths.
    """

    name: str = "baseline"
    max_channels: int = 1024
    backbone_repeats: tuple[int, int, int, int] = (3, 6, 6, 3)
    head_repeats: int = 3
    head_channels: tuple[int, int, int] = (256, 512, 1024)
    pooling: str = "sppf"
    bms: BmsSppfConfig = field(default_factory=BmsSppfConfig)

    def __post_init__(self):
        if self.pooling not in ("sppf", "bms_sppf"):
            raise ValueError(f"pooling must be 'sppf' or 'bms_sppf', got {self.pooling!r}")
        if len(self.backbone_repeats) != 4 or min(self.backbone_repeats) < 1 or self.head_repeats < 1:
            raise ValueError("repeat counts must be >= 1 (four backbone stages)")
        if len(self.head_channels) != 3 or self.max_channels < 1:
            raise ValueError("need three head widths and a positive max width")

    @property
    def backbone_channels(self) -> tuple[float, ...]:
        return tuple(self.max_channels * f for f in BACKBONE_FRACTIONS)


BASELINE_POLICY = CompressionPolicy()
ROC_POLICY = CompressionPolicy(
    name="roc",
    max_channels=512,
    backbone_repeats=(2, 3, 3, 2),
    head_repeats=2,
    head_channels=(128, 256, 512),
    pooling="bms_sppf",
)
# Repeat pattern read literally from the piecewise rule (P3, P4 -> 2, others 3).
ROC_3223_POLICY = replace(ROC_POLICY, name="roc_3223", backbone_repeats=(3, 2, 2, 3))


def ladder_policy(max_channels: int) -> CompressionPolicy:
    """ROC policy rescaled to another maximum width (head widths follow)."""
    f = max_channels / BASE_MAX_CHANNELS
    head = tuple(int(c * f) for c in BASELINE_POLICY.head_channels)
    return replace(ROC_POLICY, name=f"roc_{max_channels}", max_channels=max_channels, head_channels=head)


@dataclass(frozen=True)
class BlockSpec:
    kind: str  # Conv | C2f | SPPF | BMS_SPPF | Upsample | Concat | Detect
    inputs: tuple[int, ...]  # producer node indices; () = the image
    c_in: int
    c_out: int
    stride: int  # output stride relative to the image
    section: str
    k: int = 1
    s: int = 1
    repeats: int = 0
    shortcut: bool = False
    in_channels: tuple[int, ...] = ()
    bms: BmsSppfConfig | None = None


@dataclass
class ModelGraph:
    nodes: list[BlockSpec]
    nc: int
    policy: CompressionPolicy
    scale: ScalePolicy
    strides: tuple[int, ...] = STRIDES
    reg_max: int = REG_MAX

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        detects = [n for n in self.nodes if n.kind == "Detect"]
        if len(detects) != 1:
            raise GraphError(f"expected exactly one Detect node, found {len(detects)}")
        for i, node in enumerate(self.nodes):
            if any(j >= i or j < 0 for j in node.inputs):
                raise GraphError(f"node {i} references a non-earlier node {node.inputs}")
            produced = [self.nodes[j].c_out for j in node.inputs] or [3]
            if node.kind == "Detect":
                if tuple(produced) != node.in_channels:
                    raise GraphError(f"Detect inputs {produced} != declared {node.in_channels}")
                got = tuple(self.nodes[j].stride for j in node.inputs)
                if got != self.strides:
                    raise GraphError(f"Detect consumes strides {got}, expected {self.strides}")
                continue
            if sum(produced) != node.c_in:
                raise GraphError(f"node {i} ({node.kind}) expects {node.c_in} channels, producers give {sum(produced)}")
            if node.kind == "Concat":
                strides = {self.nodes[j].stride for j in node.inputs}
                if len(strides) != 1:
                    raise GraphError(f"Concat node {i} mixes strides {sorted(strides)}")
            if node.kind == "BMS_SPPF":
                mult = node.bms.channel_multiple()
                if node.c_out % mult:
                    raise GraphError(f"BMS-SPPF width {node.c_out} is not a multiple of {mult}")

    @property
    def detect_index(self) -> int:
        return next(i for i, n in enumerate(self.nodes) if n.kind == "Detect")

    def prefix(self, i: int) -> str:
        node = self.nodes[i]
        return f"{node.section}.{i}.{node.kind.lower()}"

    @cached_property
    def _templates(self) -> list:
        rng = np.random.default_rng(0)
        return [init_node_params(self, i, rng, np.float32) for i in range(len(self.nodes))]

    def slots(self) -> list[tuple[str, tuple[int, ...], bool]]:
        """All weight slots as ``(name, shape, is_buffer)`` in graph order."""
        out = []
        for i, tmpl in enumerate(self._templates):
            if tmpl is not None:
                out += [(n, value(v).shape, buf) for n, v, buf in iter_slots(tmpl, self.prefix(i))]
        return out


# ---------------------------------------------------------------- construction


def build_graph(policy: CompressionPolicy, nc: int = 4, scale: ScalePolicy | None = None) -> ModelGraph:
    if nc < 1:
        raise ValueError("nc must be >= 1")
    scale = scale or ScalePolicy()
    ch = [scale.channels(c) for c in policy.backbone_channels]
    rb = [scale.repeats(n) for n in policy.backbone_repeats]
    rh = scale.repeats(policy.head_repeats)
    p3, p4, p5 = (scale.channels(c) for c in policy.head_channels)
    nodes: list[BlockSpec] = []

    def add_node(kind, inputs, c_in, c_out, stride, section, **kw):
        nodes.append(BlockSpec(kind, tuple(inputs), c_in, c_out, stride, section, **kw))
        return len(nodes) - 1

    # backbone
    x = add_node("Conv", (), 3, ch[0], 2, "backbone", k=3, s=2)
    x = add_node("Conv", [x], ch[0], ch[1], 4, "backbone", k=3, s=2)
    x = add_node("C2f", [x], ch[1], ch[1], 4, "backbone", repeats=rb[0], shortcut=True)
    x = add_node("Conv", [x], ch[1], ch[2], 8, "backbone", k=3, s=2)
    b3 = add_node("C2f", [x], ch[2], ch[2], 8, "backbone", repeats=rb[1], shortcut=True)
    x = add_node("Conv", [b3], ch[2], ch[3], 16, "backbone", k=3, s=2)
    b4 = add_node("C2f", [x], ch[3], ch[3], 16, "backbone", repeats=rb[2], shortcut=True)
    x = add_node("Conv", [b4], ch[3], ch[4], 32, "backbone", k=3, s=2)
    x = add_node("C2f", [x], ch[4], ch[4], 32, "backbone", repeats=rb[3], shortcut=True)
    if policy.pooling == "bms_sppf":
        b5 = add_node("BMS_SPPF", [x], ch[4], ch[4], 32, "backbone", k=5, bms=policy.bms)
    else:
        b5 = add_node("SPPF", [x], ch[4], ch[4], 32, "backbone", k=5)

    # neck (top-down then bottom-up)
    x = add_node("Upsample", [b5], ch[4], ch[4], 16, "neck", s=2)
    x = add_node("Concat", [x, b4], ch[4] + ch[3], ch[4] + ch[3], 16, "neck")
    n4 = add_node("C2f", [x], ch[4] + ch[3], p4, 16, "neck", repeats=rh)
    x = add_node("Upsample", [n4], p4, p4, 8, "neck", s=2)
    x = add_node("Concat", [x, b3], p4 + ch[2], p4 + ch[2], 8, "neck")
    o3 = add_node("C2f", [x], p4 + ch[2], p3, 8, "neck", repeats=rh)
    x = add_node("Conv", [o3], p3, p3, 16, "neck", k=3, s=2)
    x = add_node("Concat", [x, n4], p3 + p4, p3 + p4, 16, "neck")
    o4 = add_node("C2f", [x], p3 + p4, p4, 16, "neck", repeats=rh)
    x = add_node("Conv", [o4], p4, p4, 32, "neck", k=3, s=2)
    x = add_node("Concat", [x, b5], p4 + ch[4], p4 + ch[4], 32, "neck")
    o5 = add_node("C2f", [x], p4 + ch[4], p5, 32, "neck", repeats=rh)

    add_node("Detect", [o3, o4, o5], p3 + p4 + p5, 4 * REG_MAX + nc, 0, "head", in_channels=(p3, p4, p5))
    return ModelGraph(nodes, nc, policy, scale)


def build_baseline(nc: int = 4) -> ModelGraph:
    return build_graph(BASELINE_POLICY, nc)


def apply_compression(graph: ModelGraph, policy: CompressionPolicy) -> ModelGraph:
    """Rebuild ``graph`` under ``policy``, keeping its class count and scale multipliers."""
    return build_graph(policy, graph.nc, graph.scale)


def detect_hidden(graph: ModelGraph) -> tuple[int, int]:
    """Hidden widths of the box and class branches of the head."""
    first = graph.nodes[graph.detect_index].in_channels[0]
    return max(16, first // 4, 4 * graph.reg_max), max(first, min(graph.nc, 100))


# -------------------------------------------------------------------- params


@dataclass
class BottleneckParams:
    cv1: ConvBlockParams
    cv2: ConvBlockParams


@dataclass
class C2fParams:
    cv1: ConvBlockParams
    cv2: ConvBlockParams
    m: list[BottleneckParams]


@dataclass
class SppfParams:
    cv1: ConvBlockParams
    cv2: ConvBlockParams


@dataclass
class DetectBranchParams:
    cv1: ConvBlockParams
    cv2: ConvBlockParams
    pred: Conv2dParams


@dataclass
class DetectParams:
    box: list[DetectBranchParams]
    cls: list[DetectBranchParams]


def init_node_params(graph: ModelGraph, i: int, rng, dtype=np.float32):
    node = graph.nodes[i]
    if node.kind == "Conv":
        return init_conv_block(rng, node.c_in, node.c_out, node.k, node.s, dtype=dtype)
    if node.kind == "C2f":
        c = node.c_out // 2
        return C2fParams(
            init_conv_block(rng, node.c_in, 2 * c, 1, dtype=dtype),
            init_conv_block(rng, (2 + node.repeats) * c, node.c_out, 1, dtype=dtype),
            [
                BottleneckParams(
                    init_conv_block(rng, c, c, 3, dtype=dtype), init_conv_block(rng, c, c, 3, dtype=dtype)
                )
                for _ in range(node.repeats)
            ],
        )
    if node.kind == "SPPF":
        hidden = node.c_in // 2
        return SppfParams(
            init_conv_block(rng, node.c_in, hidden, 1, dtype=dtype),
            init_conv_block(rng, 4 * hidden, node.c_out, 1, dtype=dtype),
        )
    if node.kind == "BMS_SPPF":
        return init_bms_sppf(rng, node.c_in, node.c_out, node.bms, dtype=dtype)
    if node.kind == "Detect":
        c2, c3 = detect_hidden(graph)
        box, cls = [], []
        for cin, stride in zip(node.in_channels, graph.strides):
            box.append(
                DetectBranchParams(
                    init_conv_block(rng, cin, c2, 3, dtype=dtype),
                    init_conv_block(rng, c2, c2, 3, dtype=dtype),
                    Conv2dParams(
                        (0.01 * rng.standard_normal((4 * graph.reg_max, c2, 1, 1))).astype(dtype),
                        np.ones(4 * graph.reg_max, dtype),
                    ),
                )
            )
            prior = math.log(5 / graph.nc / (640 / stride) ** 2)
            cls.append(
                DetectBranchParams(
                    init_conv_block(rng, cin, c3, 3, dtype=dtype),
                    init_conv_block(rng, c3, c3, 3, dtype=dtype),
                    Conv2dParams(
                        (0.01 * rng.standard_normal((graph.nc, c3, 1, 1))).astype(dtype),
                        np.full(graph.nc, prior, dtype),
                    ),
                )
            )
        return DetectParams(box, cls)
    return None


def init_weights(graph: ModelGraph, seed: int = 0, dtype=np.float32, zero: bool = False) -> dict[str, np.ndarray]:
    """Fresh weight store for ``graph``.

    ``zero=True`` zeroes every learnable slot except BN/GN scales (kept at 1)
    and running variances, giving the all-zero-weights degenerate model.
    """
    rng = np.random.default_rng(seed)
    store: dict[str, np.ndarray] = {}
    for i in range(len(graph.nodes)):
        p = init_node_params(graph, i, rng, dtype)
        if p is None:
            continue
        for name, arr, buf in iter_slots(p, graph.prefix(i)):
            arr = np.asarray(arr)
            if zero and not buf and not name.endswith("gamma"):
                arr = np.zeros_like(arr)
            store[name] = arr
    return store


def _lookup(store, name, shape=None):
    try:
        arr = store[name]
    except KeyError:
        raise MissingWeightError(f"missing weight slot {name!r}") from None
    if shape is not None and tuple(arr.shape) != tuple(shape):
        raise ShapeError(f"slot {name!r} has shape {tuple(arr.shape)}, graph expects {tuple(shape)}")
    return arr


def bind(template, store, prefix: str):
    """Rebuild ``template`` with arrays taken from ``store`` under ``prefix``.

    Conv blocks whose BN slots are absent but whose conv bias is present are
    loaded in folded form.
    """
    if isinstance(template, ConvBlockParams):
        conv = template.conv
        w = _lookup(store, f"{prefix}.conv.weight", value(conv.weight).shape)
        if f"{prefix}.bn.gamma" not in store and f"{prefix}.conv.bias" in store:
            b = _lookup(store, f"{prefix}.conv.bias", (value(conv.weight).shape[0],))
            return ConvBlockParams(replace(conv, weight=w, bias=b), None)
        bn = template.bn
        if bn is not None:
            bn = BatchNormParams(
                *(_lookup(store, f"{prefix}.bn.{f}", value(getattr(bn, f)).shape) for f in ("gamma", "beta", "mean", "var")),
                eps=bn.eps,
            )
        bias = template.conv.bias
        if bias is not None:
            bias = _lookup(store, f"{prefix}.conv.bias", value(bias).shape)
        return ConvBlockParams(replace(conv, weight=w, bias=bias), bn)
    if dataclasses.is_dataclass(template):
        changes = {}
        for f in dataclasses.fields(template):
            v = getattr(template, f.name)
            name = f"{prefix}.{f.name}"
            if isinstance(v, np.ndarray):
                changes[f.name] = _lookup(store, name, v.shape)
            elif v is not None and (dataclasses.is_dataclass(v) or isinstance(v, list)):
                changes[f.name] = bind(v, store, name)
        return replace(template, **changes)
    if isinstance(template, list):
        return [bind(t, store, f"{prefix}.{i}") for i, t in enumerate(template)]
    return template


def node_params(graph: ModelGraph, store) -> list:
    return [
        None if t is None else bind(t, store, graph.prefix(i)) for i, t in enumerate(graph._templates)
    ]


# -------------------------------------------------------------------- forward


def c2f_forward(x, p: C2fParams, shortcut: bool):
    y = conv_block(x, p.cv1)
    c = value(y).shape[1] // 2
    parts = split(y, [c, c], axis=1)
    for b in p.m:
        h = conv_block(conv_block(parts[-1], b.cv1), b.cv2)
        parts.append(add(parts[-1], h) if shortcut else h)
    return conv_block(concat(parts, axis=1), p.cv2)


def detect_forward(xs, p: DetectParams):
    outs = []
    for x, box, cls in zip(xs, p.box, p.cls):
        b = conv2d(conv_block(conv_block(x, box.cv1), box.cv2), box.pred)
        c = conv2d(conv_block(conv_block(x, cls.cv1), cls.cv2), cls.pred)
        outs.append(concat([b, c], axis=1))
    return outs


def forward(graph: ModelGraph, weights, image) -> list[np.ndarray]:
    """Run the network; returns the three raw head maps (strides 8, 16, 32).

    ``weights`` is a weight store (name -> array) or the output of
    :func:`node_params`.
    """
    img = value(image)
    if img.ndim != 4 or img.shape[1] != 3:
        raise ShapeError(f"expected (N, 3, H, W) image, got {img.shape}")
    h, w = img.shape[2:]
    if h % 32 or w % 32:
        raise ShapeError(f"image extents {h}x{w} must be divisible by 32")
    params = weights if isinstance(weights, list) else node_params(graph, weights)
    outs: list[Any] = []
    for i, node in enumerate(graph.nodes):
        xs = [outs[j] for j in node.inputs] or [image]
        p = params[i]
        if node.kind == "Conv":
            y = conv_block(xs[0], p)
        elif node.kind == "C2f":
            y = c2f_forward(xs[0], p, node.shortcut)
        elif node.kind == "SPPF":
            y = sppf_forward(xs[0], p.cv1, p.cv2, node.k)
        elif node.kind == "BMS_SPPF":
            y = bms_sppf_forward(xs[0], node.bms, p)
        elif node.kind == "Upsample":
            y = nearest_upsample(xs[0], node.s)
        elif node.kind == "Concat":
            y = concat(xs, axis=1)
        elif node.kind == "Detect":
            return detect_forward(xs, p)
        else:
            raise GraphError(f"unknown block kind {node.kind!r}")
        outs.append(y)
    raise GraphError("graph has no Detect node")


# ----------------------------------------------------------------- BN folding


def fold_conv_block(p: ConvBlockParams) -> ConvBlockParams:
    if p.bn is None:
        return p
    w, bn = value(p.conv.weight), p.bn
    factor = value(bn.gamma) / np.sqrt(value(bn.var) + bn.eps)
    bias0 = value(p.conv.bias) if p.conv.bias is not None else 0.0
    w2 = (w * factor.reshape(-1, 1, 1, 1)).astype(w.dtype)
    b2 = (value(bn.beta) + (bias0 - value(bn.mean)) * factor).astype(w.dtype)
    return ConvBlockParams(replace(p.conv, weight=w2, bias=b2), None)


def fold_batchnorm(graph: ModelGraph, weights: dict) -> dict[str, np.ndarray]:
    """Merge every conv+BN pair into a biased conv; idempotent."""
    def fold(obj):
        if isinstance(obj, ConvBlockParams):
            return fold_conv_block(obj)
        if dataclasses.is_dataclass(obj):
            changes = {
                f.name: fold(getattr(obj, f.name))
                for f in dataclasses.fields(obj)
                if dataclasses.is_dataclass(getattr(obj, f.name)) or isinstance(getattr(obj, f.name), list)
            }
            return replace(obj, **changes)
        if isinstance(obj, list):
            return [fold(o) for o in obj]
        return obj

    store: dict[str, np.ndarray] = {}
    for i, p in enumerate(node_params(graph, weights)):
        if p is not None:
            store.update((n, np.asarray(v)) for n, v, _ in iter_slots(fold(p), graph.prefix(i)))
    return store


__all__ = [
    "BASELINE_POLICY",
    "DAMAGE_CLASSES",
    "ROC_3223_POLICY",
    "ROC_POLICY",
    "BlockSpec",
    "CompressionPolicy",
    "GraphError",
    "MissingWeightError",
    "ModelGraph",
    "ScalePolicy",
    "apply_compression",
    "bind",
    "build_baseline",
    "build_graph",
    "fold_batchnorm",
    "forward",
    "init_weights",
    "ladder_policy",
    "node_params",
]
