"""Precision, recall and COCO-style 101-point average precision."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .loss import iou_matrix

IOU_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass(frozen=True)
class Truth:
    cls: int
    box: tuple[float, float, float, float]


@dataclass
class EvalReport:
    precision: float
    recall: float
    map50: float
    map50_95: float
    ap50: dict[int, float] = field(default_factory=dict)
    ap50_95: dict[int, float] = field(default_factory=dict)
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def as_kv(self, names=None) -> str:
        lines = [
            f"precision={self.precision:.6f}",
            f"recall={self.recall:.6f}",
            f"map50={self.map50:.6f}",
            f"map50_95={self.map50_95:.6f}",
            f"tp={self.tp}",
            f"fp={self.fp}",
            f"fn={self.fn}",
        ]
        for c in sorted(self.ap50):
            label = names[c] if names and c < len(names) else str(c)
            lines.append(f"ap50_{label}={self.ap50[c]:.6f}")
            lines.append(f"ap50_95_{label}={self.ap50_95[c]:.6f}")
        return "\n".join(lines) + "\n"


def match_image(dets: Sequence, truths: Sequence[Truth], cls: int, threshold: float) -> list[tuple[float, bool]]:
    """Greedy matching for one image and class.

    Detections are visited by descending confidence; each claims the
    unclaimed truth with the highest IoU provided it reaches ``threshold``.
    Returns ``(confidence, is_true_positive)`` per detection.
    """
    d = sorted((x for x in dets if x.cls == cls), key=lambda x: (-x.confidence, x.box[0], x.box[1]))
    t = [x for x in truths if x.cls == cls]
    if not d:
        return []
    if not t:
        return [(x.confidence, False) for x in d]
    ious = iou_matrix([x.box for x in d], [x.box for x in t])
    claimed = np.zeros(len(t), dtype=bool)
    out = []
    for i, det in enumerate(d):
        cand = np.where(~claimed & (ious[i] >= threshold), ious[i], -1.0)
        j = int(np.argmax(cand))
        if cand[j] >= 0:
            claimed[j] = True
            out.append((det.confidence, True))
        else:
            out.append((det.confidence, False))
    return out


def average_precision(records: list[tuple[float, bool]], n_truth: int) -> float:
    """101-point interpolated AP from ``(confidence, tp)`` records."""
    if n_truth == 0 or not records:
        return 0.0
    # ties: true positives first, so the result does not depend on record order
    order = sorted(range(len(records)), key=lambda i: (-records[i][0], not records[i][1]))
    tp = np.array([records[i][1] for i in order], dtype=np.float64)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_truth
    precision = ctp / (ctp + cfp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def evaluate(
    dets_per_image: Sequence[Sequence],
    truths_per_image: Sequence[Sequence[Truth]],
    nc: int,
    report_conf: float = 0.25,
) -> EvalReport:
    """Detection metrics over a dataset.

    ``mAP`` averages over classes that occur in the ground truth. P and R are
    taken at IoU 0.5 over detections with confidence >= ``report_conf`` and
    averaged over the same classes.
    """
    if len(dets_per_image) != len(truths_per_image):
        raise ValueError("need one detection list and one truth list per image")
    for group in (*dets_per_image, *truths_per_image):
        for x in group:
            if not 0 <= x.cls < nc:
                raise ValueError(f"class id {x.cls} out of range for nc={nc}")

    n_truth = np.zeros(nc, dtype=int)
    for truths in truths_per_image:
        for t in truths:
            n_truth[t.cls] += 1
    present = [c for c in range(nc) if n_truth[c] > 0]

    ap = np.zeros((nc, len(IOU_THRESHOLDS)))
    tp = fp = 0
    p_cls, r_cls = [], []
    for c in present:
        for k, thr in enumerate(IOU_THRESHOLDS):
            records = []
            for dets, truths in zip(dets_per_image, truths_per_image):
                records += match_image(dets, truths, c, thr)
            ap[c, k] = average_precision(records, n_truth[c])
            if k == 0:
                kept = [r for r in records if r[0] >= report_conf]
                ctp = sum(1 for r in kept if r[1])
                cfp = len(kept) - ctp
                tp, fp = tp + ctp, fp + cfp
                p_cls.append(ctp / (ctp + cfp) if kept else 0.0)
                r_cls.append(ctp / n_truth[c])
    # false positives of classes absent from the ground truth still count
    for c in range(nc):
        if n_truth[c] == 0:
            fp += sum(1 for dets in dets_per_image for d in dets if d.cls == c and d.confidence >= report_conf)

    if not present:
        return EvalReport(0.0, 0.0, 0.0, 0.0, tp=0, fp=fp, fn=0)
    ap50 = {c: float(ap[c, 0]) for c in present}
    ap5095 = {c: float(ap[c].mean()) for c in present}
    return EvalReport(
        precision=float(np.mean(p_cls)),
        recall=float(np.mean(r_cls)),
        map50=float(np.mean(list(ap50.values()))),
        map50_95=float(np.mean(list(ap5095.values()))),
        ap50=ap50,
        ap50_95=ap5095,
        tp=tp,
        fp=fp,
        fn=int(n_truth.sum()) - tp,
    )
