import numpy as np
import pytest

from yoloroc.analysis import (
    SIZE_OVERHEAD_BYTES,
    _conv,
    analyze,
    bms_attention_cost,
    bms_sensitivity,
    count_flops,
    count_params,
    diff_configs,
    estimate_size,
    format_report,
)
from yoloroc.bms_sppf import BmsSppfConfig, init_bms_sppf
from yoloroc.graph import BASELINE_POLICY, ROC_POLICY, build_graph, init_weights, ladder_policy
from yoloroc.params import learnable

# Frozen from the closed-form counter; cross-checked against weight-store enumeration below.
GOLDEN = {
    "baseline": (3_011_612, 8_084_889_600),
    "roc": (902_324, 2_641_879_040),
    "roc_1024": (2_963_612, 7_579_156_480),
    "roc_256": (353_140, 1_328_926_720),
    "roc_128": (199_540, 976_732_160),
}
POLICIES = {
    "baseline": BASELINE_POLICY,
    "roc": ROC_POLICY,
    "roc_1024": ladder_policy(1024),
    "roc_256": ladder_policy(256),
    "roc_128": ladder_policy(128),
}


def test_single_conv_examples():
    assert _conv(16, 32, 3, 64 * 64) == (4672, 37_748_736)


def naive_conv_macs(ci, co, k, h, w):
    macs = 0
    for _ in range(co):
        for _ in range(h * w):
            macs += ci * k * k
    return macs


def test_conv_flops_vs_loop_counter():
    assert _conv(3, 5, 3, 6 * 7)[1] == 2 * naive_conv_macs(3, 5, 3, 6, 7)
    assert _conv(8, 8, 1, 16, groups=4)[1] == 2 * naive_conv_macs(2, 8, 1, 4, 4)


@pytest.mark.parametrize("name", list(GOLDEN))
def test_golden_counts(name):
    rep = analyze(build_graph(POLICIES[name], 4))
    assert (rep.params, rep.flops) == GOLDEN[name]


@pytest.mark.parametrize("name", ["baseline", "roc", "roc_128"])
@pytest.mark.parametrize("nc", [1, 4, 80])
def test_params_equal_weight_store(name, nc):
    g = build_graph(POLICIES[name], nc)
    store = init_weights(g)
    buffers = {n for n, _, buf in g.slots() if buf}
    assert count_params(g).params == sum(v.size for k, v in store.items() if k not in buffers)


def test_bms_attention_cost_matches_params():
    cfg = BmsSppfConfig()
    p = init_bms_sppf(np.random.default_rng(0), 64, 64, cfg, bn=True)
    total = sum(np.size(v) for k, v in learnable(p).items() if not k.startswith(("cv1", "cv2")))
    assert bms_attention_cost(64, 8, 8, cfg)[0] == total


def test_flops_additive_and_linear_in_batch():
    g = build_graph(ROC_POLICY, 4)
    r1 = count_flops(g, (320, 320))
    assert r1.flops == sum(n.flops for n in r1.nodes)
    assert count_flops(g, (320, 320), batch=3).flops == 3 * r1.flops


def test_ladder_monotone():
    params = [analyze(build_graph(POLICIES[n], 4)).params for n in ("roc_128", "roc_256", "roc", "roc_1024")]
    assert params == sorted(params) and len(set(params)) == 4


def test_size_estimates():
    assert estimate_size(0) == SIZE_OVERHEAD_BYTES
    roc = analyze(build_graph(ROC_POLICY, 4))
    base = analyze(build_graph(BASELINE_POLICY, 4))
    assert abs(roc.size_bytes_f16 / 1e6 - 2.0) / 2.0 < 0.10
    assert abs(base.size_bytes_f16 / 1e6 - 6.3) / 6.3 < 0.10
    assert roc.size_bytes_f32 == 4 * roc.params + SIZE_OVERHEAD_BYTES


def test_diff_configs():
    base = analyze(build_graph(BASELINE_POLICY, 4))
    roc = analyze(build_graph(ROC_POLICY, 4))
    assert diff_configs(base, base) == {"params": 0.0, "flops": 0.0, "size_f16": 0.0}
    d = diff_configs(base, roc)
    assert abs(100 * d["params"] - 70.04) < 0.01
    assert abs(100 * d["flops"] - 67.32) < 0.01


def test_sensitivity_reports_deltas():
    g = build_graph(ROC_POLICY, 4)
    s = bms_sensitivity(g)
    assert s["qkv_bias"] == 3 * 128
    assert s["unify_dense"] == 128 * 512 - 128 * 4
    assert s["cap_pool"] == -128 * 4
    assert bms_sensitivity(build_graph(BASELINE_POLICY, 4)) == {}


def test_analyze_rejects_bad_size():
    with pytest.raises(ValueError):
        analyze(build_graph(ROC_POLICY, 4), (100, 100))


def test_format_report():
    base = analyze(build_graph(BASELINE_POLICY, 4))
    roc = analyze(build_graph(ROC_POLICY, 4))
    kv = format_report(roc, name="roc", ref=base, ref_name="baseline", fmt="kv")
    fields = dict(line.split("=", 1) for line in kv.strip().splitlines())
    assert fields["params"] == "902324" and fields["reduction_params_pct"] == "70.04"
    text = format_report(roc, name="roc", ref=base, ref_name="baseline")
    assert "reduction vs baseline" in text and "GFLOPs" in text
