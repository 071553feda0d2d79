"""Independent reference implementations used by the evaluation tests."""

import numpy as np

from yoloroc.metrics import Truth
from yoloroc.postprocess import Detection


def py_iou(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def brute_force_ap(dets_per_image, truths_per_image, cls, thr):
    """AP by enumerating every confidence cut and re-matching from scratch.

    Requires distinct confidences. For each cut the kept detections are
    matched greedily (highest confidence first, best unclaimed truth), which
    yields one (precision, recall) point; AP is the 101-point mean of the
    best precision reachable at each recall level.
    """
    confs = sorted({d.confidence for dets in dets_per_image for d in dets if d.cls == cls}, reverse=True)
    n_truth = sum(1 for ts in truths_per_image for t in ts if t.cls == cls)
    if n_truth == 0 or not confs:
        return 0.0
    points = []
    for cut in confs:
        tp = fp = 0
        for dets, truths in zip(dets_per_image, truths_per_image):
            kept = sorted((d for d in dets if d.cls == cls and d.confidence >= cut), key=lambda d: -d.confidence)
            ts = [t for t in truths if t.cls == cls]
            claimed = [False] * len(ts)
            for d in kept:
                best, best_j = -1.0, -1
                for j, t in enumerate(ts):
                    if not claimed[j]:
                        v = py_iou(d.box, t.box)
                        if v >= thr and v > best:
                            best, best_j = v, j
                if best_j >= 0:
                    claimed[best_j] = True
                    tp += 1
                else:
                    fp += 1
        points.append((tp / (tp + fp), tp / n_truth))
    total = 0.0
    for r in np.linspace(0, 1, 101):
        total += max((p for p, rec in points if rec >= r), default=0.0)
    return total / 101


def toy_fixture(rng, n_truth=3, n_det=4, n_img=1, cls=0):
    """Random boxes in one class; detections are jittered copies of truths with distinct confidences."""
    truths, dets = [], []
    confs = iter(rng.permutation(np.linspace(0.05, 0.95, n_det * n_img)))
    for _ in range(n_img):
        ts = []
        for _ in range(n_truth):
            xy = rng.uniform(0, 60, 2)
            ts.append(Truth(cls, tuple(np.r_[xy, xy + rng.uniform(10, 30, 2)])))
        ds = []
        for _ in range(n_det):
            base = ts[rng.integers(len(ts))].box
            jitter = rng.normal(0, 3, 4)
            box = np.array(base) + jitter
            box[2:] = np.maximum(box[2:], box[:2] + 1)
            ds.append(Detection(cls, float(next(confs)), tuple(box)))
        truths.append(ts)
        dets.append(ds)
    return dets, truths
