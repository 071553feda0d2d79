"""Decode raw head maps into detections and apply class-aware NMS."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import DAMAGE_CLASSES, REG_MAX, STRIDES
from .loss import iou_matrix


@dataclass(frozen=True)
class Detection:
    cls: int
    confidence: float
    box: tuple[float, float, float, float]  # x1, y1, x2, y2 in pixels

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        x1, y1, x2, y2 = self.box
        if x2 < x1 or y2 < y1:
            raise ValueError(f"invalid box {self.box}")

    def label(self, names=DAMAGE_CLASSES) -> str:
        return names[self.cls] if self.cls < len(names) else str(self.cls)


def _softmax(x, axis):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def decode(maps, conf_threshold: float, nc: int, image_hw, strides=STRIDES, reg_max: int = REG_MAX) -> list[list[Detection]]:
    """Per-image detections (before NMS) from the three head maps.

    Box sides are the expectation of a softmax over ``reg_max`` bins, in
    stride units, measured from the cell centre.
    """
    if len(maps) != len(strides):
        raise ValueError(f"expected {len(strides)} head maps, got {len(maps)}")
    img_h, img_w = image_hw
    n = maps[0].shape[0]
    per_image: list[list[Detection]] = [[] for _ in range(n)]
    bins = np.arange(reg_max, dtype=np.float64)
    for m, stride in zip(maps, strides):
        m = np.asarray(m, dtype=np.float64)
        if m.ndim != 4 or m.shape[1] != 4 * reg_max + nc or m.shape[0] != n:
            raise ValueError(f"malformed head map of shape {m.shape} for nc={nc}")
        _, _, h, w = m.shape
        if h * stride != img_h or w * stride != img_w:
            raise ValueError(f"map {h}x{w} at stride {stride} does not match image {img_h}x{img_w}")
        dist = _softmax(m[:, : 4 * reg_max].reshape(n, 4, reg_max, h, w), axis=2)
        side = np.einsum("nkbhw,b->nkhw", dist, bins) * stride
        scores = 1.0 / (1.0 + np.exp(-m[:, 4 * reg_max :]))
        cy, cx = np.meshgrid((np.arange(h) + 0.5) * stride, (np.arange(w) + 0.5) * stride, indexing="ij")
        x1 = np.clip(cx - side[:, 0], 0, img_w)
        y1 = np.clip(cy - side[:, 1], 0, img_h)
        x2 = np.clip(cx + side[:, 2], 0, img_w)
        y2 = np.clip(cy + side[:, 3], 0, img_h)
        for b, c, i, j in zip(*np.nonzero(scores > conf_threshold)):
            per_image[b].append(
                Detection(int(c), float(scores[b, c, i, j]), (float(x1[b, i, j]), float(y1[b, i, j]), float(x2[b, i, j]), float(y2[b, i, j])))
            )
    return per_image


def _order_key(d: Detection):
    return (-d.confidence, d.box[0], d.box[1])


def nms(dets: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy per-class suppression; survivors within a class overlap by at most ``iou_threshold``."""
    keep: list[Detection] = []
    for c in sorted({d.cls for d in dets}):
        cand = sorted((d for d in dets if d.cls == c), key=_order_key)
        boxes = np.array([d.box for d in cand], dtype=np.float64).reshape(-1, 4)
        alive = np.ones(len(cand), dtype=bool)
        for i in range(len(cand)):
            if not alive[i]:
                continue
            keep.append(cand[i])
            rest = np.nonzero(alive[i + 1 :])[0] + i + 1
            if rest.size:
                alive[rest] = iou_matrix(boxes[i], boxes[rest])[0] <= iou_threshold
    return sorted(keep, key=_order_key)
