"""Acceptance criteria. Each test prints exactly one PASS/FAIL summary line.

Sub-checks are listed under the summary line so a failure shows which part
missed and by how much. Tolerances are the stated ones; nothing is relaxed.
"""

import time

import numpy as np
import pytest

from oracles import brute_force_ap, toy_fixture
from yoloroc.analysis import analyze, diff_configs, estimate_size
from yoloroc.bms_sppf import (
    BmsSppfConfig,
    MssaConfig,
    bms_sppf_forward,
    channel_to_space,
    init_bms_sppf,
    init_mssa,
    mssa_forward,
    space_to_channel,
)
from yoloroc.graph import fold_batchnorm, forward, init_weights
from yoloroc.io import read_config
from yoloroc.metrics import IOU_THRESHOLDS, Truth, evaluate
from yoloroc.nn import maxpool2d
from yoloroc.postprocess import Detection, nms
from yoloroc.toy import TARGETS, gradcheck, overfit_toy, sign_flip


def report(capsys, number, title, checks, elapsed, budget):
    """Print the summary and sub-check lines; return overall pass."""
    checks = list(checks) + [(f"runtime {elapsed:.1f}s < {budget:g}s", elapsed < budget)]
    ok = all(c[1] for c in checks)
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {title}")
        for name, good in checks:
            print(f"    [{'ok' if good else 'FAIL'}] {name}")
    return ok


def within(value, target, rel):
    return abs(value - target) <= rel * target


# ---------------------------------------------------------------- criterion 1

COST_TARGETS = {
    # name: (params M, GFLOPs, param tolerance, FLOP tolerance)
    "baseline": (3.01, 8.1, 0.015, 0.05),
    "roc": (0.89, 2.6, 0.02, 0.08),
    "roc_1024": (2.91, 7.6, 0.02, 0.08),
    "roc_256": (0.35, 1.3, 0.02, 0.08),
    "roc_128": (0.20, 1.0, 0.02, 0.08),
}


def test_criterion_1_cost_reproduction(capsys):
    checks, reports = [], {}
    worst = 0.0
    for name, (pm, gf, tp, tf) in COST_TARGETS.items():
        t0 = time.perf_counter()
        rep = analyze(read_config(name).build(4), (640, 640))
        worst = max(worst, time.perf_counter() - t0)
        reports[name] = rep
        p, g = rep.params / 1e6, rep.flops / 1e9
        checks.append((f"{name} params {p:.4f}M vs {pm}M +-{tp:.1%}", within(p, pm, tp)))
        checks.append((f"{name} GFLOPs {g:.4f} vs {gf} +-{tf:.0%}", within(g, gf, tf)))
    size = estimate_size(reports["roc"]) / 1e6
    checks.append((f"roc f16 size {size:.4f} MB vs 2.0 MB +-10%", within(size, 2.0, 0.10)))
    ladder = [reports[n] for n in ("roc_1024", "roc", "roc_256", "roc_128")]
    mono = all(a.params > b.params and a.flops > b.flops for a, b in zip(ladder, ladder[1:]))
    checks.append(("ladder strictly monotone 1024 > 512 > 256 > 128", mono))
    d = diff_configs(reports["baseline"], reports["roc"])
    dp, df = 100 * d["params"], 100 * d["flops"]
    checks.append((f"params reduction {dp:.2f}% vs 70.4 +-0.5 pp", abs(dp - 70.4) <= 0.5))
    checks.append((f"FLOPs reduction {df:.2f}% vs 67.9 +-0.5 pp", abs(df - 67.9) <= 0.5))
    assert report(capsys, 1, "cost reproduction", checks, worst, 5.0)


# ---------------------------------------------------------------- criterion 2


def test_criterion_2_bms_mechanism(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    checks = []

    gap = 0.0
    for _ in range(20):
        c = 4 * int(rng.integers(1, 5))
        x = rng.standard_normal((int(rng.integers(1, 3)), c, int(rng.integers(2, 10)), int(rng.integers(2, 10))))
        xp, _, _ = mssa_forward(x, MssaConfig(), init_mssa(rng, c, MssaConfig(), np.float64, zero=True))
        gap = max(gap, float(np.max(np.abs(xp - 0.25 * x))))
    checks.append((f"MSSA zero-init output = 0.25 input, max gap {gap:.2e} < 1e-6", gap < 1e-6))

    bijective = True
    for _ in range(200):
        s = int(rng.integers(1, 5))
        shape = (int(rng.integers(1, 3)), int(rng.integers(1, 7)), s * int(rng.integers(1, 6)), s * int(rng.integers(1, 6)))
        x = rng.standard_normal(shape).astype(np.float32)
        bijective &= channel_to_space(space_to_channel(x, s), s).tobytes() == x.tobytes()
    checks.append(("space_to_channel round trip bitwise over 200 random cases", bijective))

    cfg = BmsSppfConfig()
    row_err, gates_ok, ratio_spread = 0.0, True, 0.0
    for _ in range(10):
        p = init_bms_sppf(rng, 16, 16, cfg, dtype=np.float64)
        tr = bms_sppf_forward(rng.standard_normal((2, 16, 8, 8)) * rng.uniform(0.5, 5), cfg, p, trace=True)
        row_err = max(row_err, float(np.max(np.abs(tr.attention.sum(-1) - 1))))
        gates_ok &= all(bool(np.all((g > 0) & (g < 1))) for g in (tr.a_h, tr.a_w, tr.a_c))
        mask = np.abs(tr.x_prime) > 1e-6
        ratio = tr.out / np.where(mask, tr.x_prime, 1)
        hi = np.where(mask, ratio, -np.inf).max((2, 3))
        lo = np.where(mask, ratio, np.inf).min((2, 3))
        live = mask.any((2, 3))
        ratio_spread = max(ratio_spread, float(np.max(hi[live] - lo[live])))
    checks.append((f"softmax rows sum to 1, max error {row_err:.1e} <= 1e-6", row_err <= 1e-6))
    checks.append(("all sigmoid gates strictly inside (0, 1)", gates_ok))
    checks.append((f"X_out / X' constant per channel, spread {ratio_spread:.1e} < 1e-6", ratio_spread < 1e-6))

    cascade = True
    for _ in range(20):
        x = rng.standard_normal((1, 3, 16, 16)).astype(np.float32)
        y = maxpool2d(maxpool2d(maxpool2d(x, 5, 1, 2), 5, 1, 2), 5, 1, 2)
        cascade &= y.tobytes() == maxpool2d(x, 13, 1, 6).tobytes()
    checks.append(("three k=5 pools == one k=13 pool, bitwise", cascade))
    assert report(capsys, 2, "BMS-SPPF mechanism suite", checks, time.perf_counter() - t0, 60.0)


# ---------------------------------------------------------------- criterion 3


def test_criterion_3_gradients(capsys):
    t0 = time.perf_counter()
    checks = []
    for target in TARGETS:
        rep = gradcheck(target)
        checks.append((f"gradcheck {target}: max rel err {rep.max_error:.2e} < 1e-5", rep.passed))
        if target == "bms":
            dead = [k for k, v in rep.nonzero.items() if not v]
            checks.append((f"every bms_sppf parameter has a nonzero gradient ({len(rep.nonzero)} slots)", not dead))
    control = gradcheck("bms", hooks=sign_flip("sigmoid"))
    checks.append((f"corrupted sigmoid backward detected (max rel err {control.max_error:.2e})", not control.passed))
    assert report(capsys, 3, "gradient suite", checks, time.perf_counter() - t0, 120.0)


# ---------------------------------------------------------------- criterion 4


def test_criterion_4_toy_trainability(capsys):
    t0 = time.perf_counter()
    run = overfit_toy(steps=500, lr=0.01, seed=0)
    again = overfit_toy(steps=500, lr=0.01, seed=0)
    steps = len(run.losses) - 1
    checks = [
        (f"loss {run.losses[0]:.4f} -> {run.losses[-1]:.4f}, reduction {run.reduction:.2%} >= 90%", run.reduction >= 0.9),
        (f"reached in {steps} <= 500 steps without divergence", steps <= 500 and run.diverged_at is None),
        ("trace bitwise identical across two runs with the same seed", run.trace_text() == again.trace_text()),
    ]
    assert report(capsys, 4, "toy trainability", checks, time.perf_counter() - t0, 300.0)


# ---------------------------------------------------------------- criterion 5


def test_criterion_5_evaluation(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    checks = []

    truths = [[Truth(0, (0, 0, 10, 10)), Truth(3, (20, 20, 40, 50))], [Truth(1, (5, 5, 9, 9)), Truth(2, (1, 1, 60, 30))]]
    dets = [[Detection(t.cls, 1.0, t.box) for t in ts] for ts in truths]
    rep = evaluate(dets, truths, 4)
    checks.append(("perfect predictions give mAP50 = mAP50:95 = 1.0 exactly", rep.map50 == 1.0 and rep.map50_95 == 1.0))

    worst = 0.0
    for _ in range(200):
        dets, truths = toy_fixture(rng, n_truth=int(rng.integers(1, 5)), n_det=5)
        rep = evaluate(dets, truths, 1)
        ref50 = brute_force_ap(dets, truths, 0, 0.5)
        ref = np.mean([brute_force_ap(dets, truths, 0, t) for t in IOU_THRESHOLDS])
        worst = max(worst, abs(rep.map50 - ref50), abs(rep.map50_95 - ref))
    checks.append((f"5-box fixtures vs brute-force AP oracle, max gap {worst:.1e} <= 1e-9", worst <= 1e-9))

    dominated = True
    for _ in range(1000):
        nc = int(rng.integers(1, 4))
        dets, truths = [], []
        for _ in range(int(rng.integers(1, 3))):
            ds, ts = toy_fixture(rng, n_truth=int(rng.integers(1, 4)), n_det=int(rng.integers(0, 6)), cls=int(rng.integers(nc)))
            dets += ds
            truths += ts
        rep = evaluate(dets, truths, nc)
        dominated &= rep.map50 >= rep.map50_95
    checks.append(("mAP50 >= mAP50:95 on 1000 random fixtures", dominated))

    a, b, c = Detection(0, 0.9, (0, 0, 6, 1)), Detection(0, 0.8, (0, 0, 10, 1)), Detection(0, 0.7, (4, 0, 10, 1))
    checks.append(("NMS chain A>B>C keeps [A, C]", nms([c, b, a], 0.5) == [a, c]))
    assert report(capsys, 5, "evaluation pipeline", checks, time.perf_counter() - t0, 120.0)


# ---------------------------------------------------------------- criterion 6


def test_criterion_6_forward_contract(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    checks = []
    for name in ("roc", "baseline"):
        cfg = read_config(name)
        graph = cfg.build(4)
        store = init_weights(graph, seed=0)
        for size in (640, 512):
            maps = forward(graph, store, rng.random((1, 3, size, size)).astype(np.float32))
            want = [(1, 64 + graph.nc, size // s, size // s) for s in (8, 16, 32)]
            got = [m.shape for m in maps]
            checks.append((f"{name} {size}x{size} -> {got}", got == want and all(np.all(np.isfinite(m)) for m in maps)))

    graph = read_config("roc").build(4)
    store = init_weights(graph, seed=1)
    imgs = rng.random((3, 3, 256, 256)).astype(np.float32)
    batched = forward(graph, store, imgs)
    gap = max(
        float(np.max(np.abs(b[i : i + 1] - s)))
        for i in range(3)
        for b, s in zip(batched, forward(graph, store, imgs[i : i + 1]))
    )
    checks.append((f"batched vs sequential max gap {gap:.1e} <= 1e-6", gap <= 1e-6))

    store = init_weights(graph, seed=2, dtype=np.float64)
    for k, v in store.items():
        if k.endswith(("bn.gamma", "bn.var")):
            store[k] = rng.uniform(0.5, 1.5, v.shape)
        elif k.endswith(("bn.beta", "bn.mean")):
            store[k] = 0.1 * rng.standard_normal(v.shape)
    img = rng.random((1, 3, 256, 256))
    ref = forward(graph, store, img)
    got = forward(graph, fold_batchnorm(graph, store), img)
    rel = max(float(np.max(np.abs(a - b)) / np.max(np.abs(a))) for a, b in zip(ref, got))
    checks.append((f"BN folding relative change {rel:.1e} <= 1e-4", rel <= 1e-4))
    assert report(capsys, 6, "forward-pass shape contract", checks, time.perf_counter() - t0, 300.0)


# ---------------------------------------------------------------- criterion 7


def test_criterion_7_accuracy_not_reproducible(capsys):
    with capsys.disabled():
        print(
            "\nN/A  criterion 7: trained accuracy, loss curves, qualitative figures and absolute FPS"
            " need full-scale training on the road-damage data; not reproduced here"
        )
    pytest.skip("requires full-scale training; the property and oracle suites stand in for it")
