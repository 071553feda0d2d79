"""Closed-form parameter, FLOP and size accounting over a model graph.

Counts are derived from block attributes alone; they never touch a weight
store, so they can be cross-checked against one. FLOPs are 2 x multiply-
accumulates of convolutions and matrix products; normalization, activations
and pooling are free.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .bms_sppf import MSSA_BRANCHES, BmsSppfConfig
from .graph import BlockSpec, ModelGraph, build_graph, detect_hidden

# Container overhead of a serialized checkpoint (metadata, names, optimizer-free).
SIZE_OVERHEAD_BYTES = 220_000
MB = 1e6


@dataclass
class NodeCost:
    index: int
    kind: str
    params: int
    flops: int


@dataclass
class CostReport:
    params: int
    flops: int
    input_hw: tuple[int, int]
    batch: int = 1
    nodes: list[NodeCost] = field(default_factory=list)

    @property
    def gflops(self) -> float:
        return self.flops / 1e9

    @property
    def size_bytes_f16(self) -> int:
        return estimate_size(self, 2)

    @property
    def size_bytes_f32(self) -> int:
        return estimate_size(self, 4)


def _conv(ci, co, k, hw_out, groups=1, bn=True, bias=False):
    params = co * (ci // groups) * k * k + (2 * co if bn else 0) + (co if bias else 0)
    flops = 2 * co * (ci // groups) * k * k * hw_out
    return params, flops


def _sum(*costs):
    return sum(c[0] for c in costs), sum(c[1] for c in costs)


def _c2f(ci, co, n, hw):
    c = co // 2
    parts = [_conv(ci, 2 * c, 1, hw), _conv((2 + n) * c, co, 1, hw)]
    parts += [_conv(c, c, 3, hw)] * (2 * n)
    return _sum(*parts)


def _sppf(ci, co, hw):
    hidden = ci // 2
    return _sum(_conv(ci, hidden, 1, hw), _conv(4 * hidden, co, 1, hw))


def bms_attention_cost(c: int, h: int, w: int, cfg: BmsSppfConfig) -> tuple[int, int]:
    """Parameters and FLOPs of the MSSA + CAP + MHSA stages at ``c`` channels, ``h x w``."""
    per = c // MSSA_BRANCHES
    ksum = sum(cfg.mssa.kernels)
    params = 2 * per * ksum + 2 * 2 * c  # two axes of depthwise 1-D kernels + two gate GNs
    flops = 2 * per * ksum * (h + w)
    s = cfg.cap.block
    hs, ws = h // s, w // s
    if cfg.cap.strategy == "recombine":
        g = cfg.cap.unify_group_count(c)
        p, f = _conv(c * s * s, c, 1, hs * ws, groups=g, bn=False)
        params, flops = params + p, flops + f
    params += 2 * c  # CAP group norm
    heads = cfg.mhsa.heads
    for _ in range(3):
        p, f = _conv(c, c, 1, hs * ws, groups=heads, bn=False, bias=cfg.mhsa.qkv_bias)
        params, flops = params + p, flops + f
    length, d = hs * ws, c // heads
    flops += heads * 2 * (length * length * d + length * d * d)
    return params, flops


def _node_cost(graph: ModelGraph, node: BlockSpec, img_h: int, img_w: int) -> tuple[int, int]:
    if node.kind in ("Upsample", "Concat"):
        return 0, 0
    if node.kind == "Detect":
        c2, c3 = detect_hidden(graph)
        parts = []
        for cin, stride in zip(node.in_channels, graph.strides):
            hw = (img_h // stride) * (img_w // stride)
            parts += [_conv(cin, c2, 3, hw), _conv(c2, c2, 3, hw), _conv(c2, 4 * graph.reg_max, 1, hw, bn=False, bias=True)]
            parts += [_conv(cin, c3, 3, hw), _conv(c3, c3, 3, hw), _conv(c3, graph.nc, 1, hw, bn=False, bias=True)]
        return _sum(*parts)
    h, w = img_h // node.stride, img_w // node.stride
    hw = h * w
    if node.kind == "Conv":
        return _conv(node.c_in, node.c_out, node.k, hw)
    if node.kind == "C2f":
        return _c2f(node.c_in, node.c_out, node.repeats, hw)
    if node.kind == "SPPF":
        return _sppf(node.c_in, node.c_out, hw)
    if node.kind == "BMS_SPPF":
        return _sum(_sppf(node.c_in, node.c_out, hw), bms_attention_cost(node.c_out, h, w, node.bms))
    raise ValueError(f"unknown block kind {node.kind!r}")


def analyze(graph: ModelGraph, input_hw=(640, 640), batch: int = 1) -> CostReport:
    h, w = input_hw
    if h % 32 or w % 32:
        raise ValueError(f"input size {h}x{w} must be divisible by 32")
    nodes = []
    for i, node in enumerate(graph.nodes):
        p, f = _node_cost(graph, node, h, w)
        nodes.append(NodeCost(i, node.kind, p, f * batch))
    return CostReport(sum(n.params for n in nodes), sum(n.flops for n in nodes), (h, w), batch, nodes)


def count_params(graph: ModelGraph) -> CostReport:
    return analyze(graph)


def count_flops(graph: ModelGraph, input_hw=(640, 640), batch: int = 1) -> CostReport:
    return analyze(graph, input_hw, batch)


def estimate_size(report: CostReport | int, bytes_per_param: int = 2) -> int:
    params = report if isinstance(report, int) else report.params
    return bytes_per_param * params + SIZE_OVERHEAD_BYTES


def reduction(ref: float, new: float) -> float:
    """Fractional reduction ``(ref - new) / ref``; 0 when ``ref`` is 0."""
    return 0.0 if ref == 0 else (ref - new) / ref


def diff_configs(ref: CostReport, new: CostReport) -> dict[str, float]:
    return {
        "params": reduction(ref.params, new.params),
        "flops": reduction(ref.flops, new.flops),
        "size_f16": reduction(ref.size_bytes_f16, new.size_bytes_f16),
    }


def bms_sensitivity(graph: ModelGraph) -> dict[str, int]:
    """Parameter delta of the whole model under alternative BMS-SPPF settings."""
    node = next((n for n in graph.nodes if n.kind == "BMS_SPPF"), None)
    if node is None:
        return {}
    base = count_params(graph).params
    cfg = node.bms
    variants = {
        "qkv_bias": replace(cfg, mhsa=replace(cfg.mhsa, qkv_bias=True)),
        "unify_dense": replace(cfg, cap=replace(cfg.cap, unify_groups=1)),
        "cap_pool": replace(cfg, cap=replace(cfg.cap, strategy="pool")),
        "heads_2": replace(cfg, mhsa=replace(cfg.mhsa, heads=2)),
        "heads_8": replace(cfg, mhsa=replace(cfg.mhsa, heads=8)),
        "gate_gn_8": replace(cfg, mssa=replace(cfg.mssa, gn_groups=8)),
    }
    out = {}
    for name, v in variants.items():
        try:
            g = build_graph(replace(graph.policy, bms=v), graph.nc, graph.scale)
        except ValueError:
            continue
        out[name] = count_params(g).params - base
    return out


def format_report(
    report: CostReport,
    *,
    name: str = "",
    ref: CostReport | None = None,
    ref_name: str = "",
    sensitivity: dict[str, int] | None = None,
    fmt: str = "text",
) -> str:
    h, w = report.input_hw
    if fmt == "kv":
        lines = [
            f"config={name}",
            f"params={report.params}",
            f"params_m={report.params / 1e6:.4f}",
            f"flops={report.flops}",
            f"gflops={report.gflops:.4f}",
            f"input={h}x{w}",
            f"size_f16_bytes={report.size_bytes_f16}",
            f"size_f16_mb={report.size_bytes_f16 / MB:.4f}",
            f"size_f32_bytes={report.size_bytes_f32}",
            f"size_f32_mb={report.size_bytes_f32 / MB:.4f}",
        ]
        if ref is not None:
            d = diff_configs(ref, report)
            lines += [f"ref_config={ref_name}"]
            lines += [f"reduction_{k}_pct={100 * v:.2f}" for k, v in d.items()]
        for k, v in (sensitivity or {}).items():
            lines.append(f"sensitivity_{k}={v:+d}")
        return "\n".join(lines) + "\n"

    lines = [
        f"model        {name}",
        f"params       {report.params:,} ({report.params / 1e6:.2f} M)",
        f"GFLOPs       {report.gflops:.2f} @ {h}x{w}",
        f"size (f16)   {report.size_bytes_f16 / MB:.2f} MB",
        f"size (f32)   {report.size_bytes_f32 / MB:.2f} MB",
        "",
        f"{'node':>4}  {'kind':<9} {'params':>10} {'MFLOPs':>10}",
    ]
    lines += [f"{n.index:>4}  {n.kind:<9} {n.params:>10,} {n.flops / 1e6:>10.1f}" for n in report.nodes]
    if ref is not None:
        d = diff_configs(ref, report)
        lines += ["", f"reduction vs {ref_name}:"]
        lines += [f"  {k:<9} {100 * v:6.1f} %" for k, v in d.items()]
    if sensitivity:
        lines += ["", "BMS-SPPF parameter sensitivity (delta vs current):"]
        lines += [f"  {k:<12} {v:+,d}" for k, v in sensitivity.items()]
    return "\n".join(lines) + "\n"
