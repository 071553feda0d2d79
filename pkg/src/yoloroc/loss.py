"""Box IoU, CIoU regression loss, BCE classification loss and their weighted sum.

Boxes are ``(..., 4)`` arrays of ``x1, y1, x2, y2``. Losses return the value
together with the analytic gradient w.r.t. the prediction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EPS = 1e-7
_V_SCALE = 4.0 / math.pi**2


@dataclass(frozen=True)
class LossWeights:
    cls: float = 0.5
    loc: float = 7.5
    obj: float = 0.0

    def __post_init__(self):
        if min(self.cls, self.loc, self.obj) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.cls == self.loc == self.obj == 0:
            raise ValueError("at least one loss weight must be nonzero")


def validate_boxes(b) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    if b.shape[-1] != 4:
        raise ValueError(f"boxes need 4 coordinates, got shape {b.shape}")
    if np.any(b[..., 2] < b[..., 0]) or np.any(b[..., 3] < b[..., 1]):
        raise ValueError("boxes must satisfy x2 >= x1 and y2 >= y1")
    return b


def iou(a, b) -> np.ndarray:
    """Pairwise-aligned IoU; zero-area boxes give 0."""
    a, b = validate_boxes(a), validate_boxes(b)
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


def iou_matrix(a, b) -> np.ndarray:
    """IoU between every box of ``a`` (M, 4) and every box of ``b`` (K, 4)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    return iou(a[:, None, :], b[None, :, :])


@dataclass
class CiouTerms:
    loss: np.ndarray
    iou: np.ndarray
    rho2: np.ndarray
    c2: np.ndarray
    v: np.ndarray
    alpha: np.ndarray


def _ciou_terms(pred, target, alpha=None) -> tuple[CiouTerms, dict]:
    p, t = pred, target
    x1, y1, x2, y2 = (p[..., i] for i in range(4))
    tx1, ty1, tx2, ty2 = (t[..., i] for i in range(4))
    w, h = x2 - x1, y2 - y1
    tw, th = tx2 - tx1, ty2 - ty1

    ix1, ix2 = np.maximum(x1, tx1), np.minimum(x2, tx2)
    iy1, iy2 = np.maximum(y1, ty1), np.minimum(y2, ty2)
    iw, ih = np.clip(ix2 - ix1, 0, None), np.clip(iy2 - iy1, 0, None)
    inter = iw * ih
    union = w * h + tw * th - inter + EPS
    iou_ = inter / union

    cw = np.maximum(x2, tx2) - np.minimum(x1, tx1)
    ch = np.maximum(y2, ty2) - np.minimum(y1, ty1)
    c2 = cw**2 + ch**2 + EPS
    dx = x1 + x2 - tx1 - tx2
    dy = y1 + y2 - ty1 - ty2
    rho2 = (dx**2 + dy**2) / 4

    he, the = h + EPS, th + EPS
    dang = np.arctan(tw / the) - np.arctan(w / he)
    v = _V_SCALE * dang**2
    if alpha is None:
        alpha = v / (v - iou_ + (1 + EPS))
    loss = 1 - iou_ + rho2 / c2 + alpha * v
    ctx = dict(
        x1=x1, y1=y1, x2=x2, y2=y2, tx1=tx1, ty1=ty1, tx2=tx2, ty2=ty2, w=w, he=he,
        iw=iw, ih=ih, inter=inter, union=union, cw=cw, ch=ch, dx=dx, dy=dy, dang=dang,
    )
    return CiouTerms(loss, iou_, rho2, c2, v, alpha), ctx


def ciou_loss(pred, target, alpha=None) -> tuple[np.ndarray, np.ndarray]:
    """CIoU loss per box pair and its gradient w.r.t. ``pred``.

    The aspect-ratio weight ``alpha`` is treated as a constant in the
    gradient. Passing ``alpha`` freezes it in the value as well, which makes
    the returned gradient exact for the returned value.
    """
    pred = validate_boxes(pred)
    target = validate_boxes(target)
    terms, c = _ciou_terms(pred, target, alpha)
    one = np.ones_like(c["x1"])
    zero = np.zeros_like(one)

    # intersection extents: d/d(x1, y1, x2, y2)
    in_w = c["iw"] > 0
    in_h = c["ih"] > 0
    diw = np.stack([np.where(in_w & (c["x1"] > c["tx1"]), -one, zero), zero,
                    np.where(in_w & (c["x2"] < c["tx2"]), one, zero), zero], -1)
    dih = np.stack([zero, np.where(in_h & (c["y1"] > c["ty1"]), -one, zero), zero,
                    np.where(in_h & (c["y2"] < c["ty2"]), one, zero)], -1)
    dinter = diw * c["ih"][..., None] + dih * c["iw"][..., None]
    h = c["he"] - EPS
    darea = np.stack([-h, -c["w"], h, c["w"]], -1)
    dunion = darea - dinter
    diou = (dinter * c["union"][..., None] - c["inter"][..., None] * dunion) / c["union"][..., None] ** 2

    # enclosing diagonal
    dcw = np.stack([np.where(c["x1"] < c["tx1"], -one, zero), zero,
                    np.where(c["x2"] > c["tx2"], one, zero), zero], -1)
    dch = np.stack([zero, np.where(c["y1"] < c["ty1"], -one, zero), zero,
                    np.where(c["y2"] > c["ty2"], one, zero)], -1)
    dc2 = 2 * c["cw"][..., None] * dcw + 2 * c["ch"][..., None] * dch
    drho2 = np.stack([c["dx"] / 2, c["dy"] / 2, c["dx"] / 2, c["dy"] / 2], -1)
    dpen = (drho2 * terms.c2[..., None] - terms.rho2[..., None] * dc2) / terms.c2[..., None] ** 2

    # aspect ratio: v = k * (atan(tw/th) - atan(w/he))^2
    denom = c["w"] ** 2 + c["he"] ** 2
    datan = np.stack([-c["he"] / denom, c["w"] / denom, c["he"] / denom, -c["w"] / denom], -1)
    dv = -2 * _V_SCALE * c["dang"][..., None] * datan

    grad = -diou + dpen + terms.alpha[..., None] * dv
    return terms.loss, grad


def ciou_alpha(pred, target) -> np.ndarray:
    terms, _ = _ciou_terms(validate_boxes(pred), validate_boxes(target))
    return terms.alpha


def bce_loss(logits, targets) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy on logits and its gradient (log-sum-exp form)."""
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    if np.any((t < 0) | (t > 1)):
        raise ValueError("targets must lie in [0, 1]")
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    e = np.exp(-np.abs(z))
    sig = np.where(z >= 0, 1 / (1 + e), e / (1 + e))
    return float(per.mean()), (sig - t) / z.size


@dataclass
class LossTerm:
    value: float
    grad: np.ndarray | None = None


def total_loss(
    cls: LossTerm, loc: LossTerm, obj: LossTerm | None = None, weights: LossWeights = LossWeights()
) -> tuple[float, dict[str, np.ndarray | None]]:
    """Weighted sum of the three components; gradients scale with their weights."""
    obj = obj or LossTerm(0.0, None)
    parts = {"cls": (weights.cls, cls), "loc": (weights.loc, loc), "obj": (weights.obj, obj)}
    for name, (_, term) in parts.items():
        if not np.isfinite(term.value):
            raise ValueError(f"{name} loss is not finite")
    total = sum(w * term.value for w, term in parts.values())
    grads = {k: None if term.grad is None else w * term.grad for k, (w, term) in parts.items()}
    return float(total), grads
