import numpy as np
import pytest

from yoloroc.loss import iou
from yoloroc.metrics import IOU_THRESHOLDS, Truth, average_precision, evaluate
from yoloroc.postprocess import Detection, decode, nms

from oracles import brute_force_ap, toy_fixture


def empty_maps(n=1, nc=4, size=64):
    return [np.zeros((n, 64 + nc, size // s, size // s)) for s in (8, 16, 32)]


def test_decode_uniform_bins_and_saturation():
    maps = empty_maps()
    maps[0][:, 64 + 2, 3, 4] = 50.0  # class 2 at stride-8 cell (row 3, col 4)
    dets = decode(maps, 0.9, 4, (64, 64))[0]
    assert len(dets) == 1
    d = dets[0]
    assert d.cls == 2 and d.confidence == pytest.approx(1.0)
    cx, cy = 4.5 * 8, 3.5 * 8
    # half-extent 7.5 * stride = 60, clipped to the 64 px image
    assert d.box == pytest.approx((max(0, cx - 60), max(0, cy - 60), min(64, cx + 60), min(64, cy + 60)))


def test_decode_unclipped_half_extent():
    maps = [np.zeros((1, 65, 640 // s, 640 // s)) for s in (8, 16, 32)]
    maps[0][:, 64, 40, 40] = 50.0
    (d,) = decode(maps, 0.5, 1, (640, 640))[0]
    assert d.box == pytest.approx((324 - 60, 324 - 60, 324 + 60, 324 + 60))


def test_decode_threshold_and_errors():
    maps = empty_maps()
    assert decode(maps, 1.0, 4, (64, 64)) == [[]]
    assert len(decode(maps, 0.4, 4, (64, 64))[0]) == 4 * (64 + 16 + 4)
    with pytest.raises(ValueError):
        decode(maps, 0.5, 3, (64, 64))
    with pytest.raises(ValueError):
        decode(maps[:2], 0.5, 4, (64, 64))
    with pytest.raises(ValueError):
        decode(maps, 0.5, 4, (96, 64))


def test_detection_validation():
    with pytest.raises(ValueError):
        Detection(0, 1.5, (0, 0, 1, 1))
    with pytest.raises(ValueError):
        Detection(0, 0.5, (2, 0, 1, 1))
    assert Detection(3, 0.5, (0, 0, 1, 1)).label() == "D40"


def test_nms_examples():
    a = Detection(0, 0.9, (0, 0, 10, 10))
    b = Detection(0, 0.8, (0, 0, 10, 10))
    assert nms([b, a], 0.5) == [a]
    c = Detection(1, 0.8, (0, 0, 10, 10))
    assert set(nms([a, c], 0.5)) == {a, c}


def test_nms_chain():
    # IoU(A,B) = IoU(B,C) = 0.6 and IoU(A,C) = 0.2 (the smallest value the Jaccard metric allows)
    A = Detection(0, 0.9, (0, 0, 6, 1))
    B = Detection(0, 0.8, (0, 0, 10, 1))
    C = Detection(0, 0.7, (4, 0, 10, 1))
    assert nms([C, B, A], 0.5) == [A, C]


def test_nms_properties(rng):
    dets = [
        Detection(int(rng.integers(0, 3)), float(rng.uniform()), tuple(np.r_[xy, xy + rng.uniform(5, 30, 2)]))
        for xy in rng.uniform(0, 100, (200, 2))
    ]
    kept = nms(dets, 0.45)
    assert set(kept) <= set(dets)
    for i, a in enumerate(kept):
        for b in kept[i + 1 :]:
            if a.cls == b.cls:
                assert iou(a.box, b.box) <= 0.45
    assert nms(list(reversed(dets)), 0.45) == kept
    ties = [Detection(0, 0.5, (5, 0, 6, 1)), Detection(0, 0.5, (1, 0, 2, 1))]
    assert [d.box[0] for d in nms(ties, 0.5)] == [1, 5]


def test_perfect_and_empty_predictor():
    truths = [[Truth(0, (0, 0, 10, 10)), Truth(2, (20, 20, 40, 50))], [Truth(1, (5, 5, 9, 9))]]
    dets = [[Detection(t.cls, 1.0, t.box) for t in ts] for ts in truths]
    rep = evaluate(dets, truths, 4)
    assert rep.precision == rep.recall == rep.map50 == rep.map50_95 == 1.0
    assert (rep.tp, rep.fp, rep.fn) == (3, 0, 0)
    rep = evaluate([[], []], truths, 4)
    assert rep.recall == 0 and rep.map50 == 0 and rep.fn == 3
    with pytest.raises(ValueError):
        evaluate([[Detection(5, 0.5, (0, 0, 1, 1))]], [[]], 4)


def test_three_truth_four_det_matches_brute_force(rng):
    for _ in range(50):
        dets, truths = toy_fixture(rng)
        rep = evaluate(dets, truths, 1)
        assert rep.map50 == pytest.approx(brute_force_ap(dets, truths, 0, 0.5), abs=1e-9)
        oracle = np.mean([brute_force_ap(dets, truths, 0, t) for t in IOU_THRESHOLDS])
        assert rep.map50_95 == pytest.approx(oracle, abs=1e-9)


def test_map50_dominates_and_order_invariance(rng):
    for _ in range(100):
        dets, truths = toy_fixture(rng, n_truth=int(rng.integers(1, 4)), n_det=int(rng.integers(1, 6)), n_img=3)
        rep = evaluate(dets, truths, 1)
        assert rep.map50 >= rep.map50_95
        perm = rng.permutation(3)
        rep2 = evaluate([dets[i] for i in perm], [truths[i] for i in perm], 1)
        assert rep2.map50_95 == rep.map50_95 and rep2.precision == rep.precision


def test_ap_monotone_under_confident_correct_detection(rng):
    for _ in range(50):
        dets, truths = toy_fixture(rng, n_truth=3, n_det=3)
        before = evaluate(dets, truths, 1).map50
        claimed = set()
        # an exact hit on a truth no detection matches, above every confidence
        for d in sorted(dets[0], key=lambda d: -d.confidence):
            best = max(range(3), key=lambda j: -1 if j in claimed else iou(d.box, truths[0][j].box))
            if iou(d.box, truths[0][best].box) >= 0.5 and best not in claimed:
                claimed.add(best)
        free = [j for j in range(3) if j not in claimed]
        if not free:
            continue
        extra = Detection(0, 0.99, truths[0][free[0]].box)
        after = evaluate([dets[0] + [extra]], truths, 1).map50
        assert after >= before - 1e-12


def test_average_precision_edge_cases():
    assert average_precision([], 3) == 0.0
    assert average_precision([(0.9, True)], 0) == 0.0
    assert average_precision([(0.9, True), (0.8, False)], 1) == 1.0
    # one hit of two truths after a miss: precision 0.5 up to recall 0.5
    assert average_precision([(0.9, False), (0.8, True)], 2) == pytest.approx(0.5 * 51 / 101)


def test_report_kv_names():
    truths = [[Truth(0, (0, 0, 10, 10))]]
    rep = evaluate([[Detection(0, 0.9, (0, 0, 10, 10))]], truths, 4)
    kv = rep.as_kv(("D00", "D10", "D20", "D40"))
    assert "ap50_D00=1.000000" in kv and "map50_95=1.000000" in kv
