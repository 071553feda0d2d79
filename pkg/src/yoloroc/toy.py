"""Gradient checks and a synthetic overfit run for the BMS-SPPF block."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autograd import Tape, value
from .bms_sppf import (
    BmsSppfConfig,
    CapConfig,
    MhsaConfig,
    MssaConfig,
    bms_sppf_forward,
    cap_forward,
    conv_block,
    init_bms_sppf,
    init_cap,
    init_conv_block,
    init_mhsa,
    init_mssa,
    mhsa_channel_forward,
    mssa_forward,
)
from .loss import bce_loss, ciou_alpha, ciou_loss
from .nn import Conv2dParams, conv2d
from .params import iter_slots, map_arrays, watch_learnable
from .tensor import reduce_mean

FD_STEP = 1e-6
GRAD_TOL = 1e-5
TARGETS = ("mssa", "cap", "cap_pool", "mhsa", "bms", "ciou", "bce")
CLI_TARGETS = {
    "mssa": ("mssa",),
    "cap": ("cap", "cap_pool"),
    "mhsa": ("mhsa",),
    "bms": ("bms",),
    "loss": ("ciou", "bce"),
}


# ------------------------------------------------------------------ gradcheck


@dataclass
class GradcheckReport:
    target: str
    step: float
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)
    nonzero: dict[str, bool] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return bool(self.errors) and self.max_error < self.tolerance

    @property
    def all_nonzero(self) -> bool:
        return all(self.nonzero.values())

    def format(self) -> str:
        lines = [f"target={self.target}", f"step={self.step:g}", f"tolerance={self.tolerance:g}"]
        for name, err in self.errors.items():
            nz = "" if name not in self.nonzero else ("" if self.nonzero[name] else "  ZERO-GRAD")
            lines.append(f"  {name:<36} rel_err={err:.3e}{nz}")
        lines.append(f"max_rel_err={self.max_error:.3e}")
        lines.append(f"status={'pass' if self.passed else 'fail'}")
        return "\n".join(lines) + "\n"


def _rel(a: float, n: float) -> float:
    return abs(a - n) / (abs(a) + 1e-8)


def _check_tape(target, fn, params, inputs, rng, step, tol, hooks, directions=3) -> GradcheckReport:
    """Directional central differences against tape gradients.

    ``fn(params, inputs)`` returns a tensor ``out``; the scalar under test is
    ``sum(out * R)`` for a fixed random ``R``. For every parameter (and input)
    ``p`` and random direction ``u``, compare ``<grad_p, u>`` with
    ``(f(p + h u) - f(p - h u)) / 2h``.
    """
    with Tape(hooks=dict(hooks or {})) as tape:
        wp, tracked = watch_learnable(params, tape)
        wx = {k: tape.watch(v, name=k) for k, v in inputs.items()}
        out = fn(wp, wx)
    r = rng.standard_normal(value(out).shape)
    tape.backward(out, r)
    grads = {f"param.{k}": tape.grad(v) for k, v in tracked.items()}
    grads.update({f"input.{k}": tape.grad(v) for k, v in wx.items()})

    def scalar(p, x):
        return float(np.sum(value(fn(p, x)) * r))

    report = GradcheckReport(target, step, tol)
    for name, g in grads.items():
        kind, slot = name.split(".", 1)
        worst = 0.0
        for _ in range(directions):
            u = rng.standard_normal(g.shape)

            def shifted(delta):
                if kind == "input":
                    return params, {**inputs, slot: inputs[slot] + delta * u}
                return map_arrays(params, lambda n, a, b: a + delta * u if n == slot else a), inputs

            num = (scalar(*shifted(step)) - scalar(*shifted(-step))) / (2 * step)
            worst = max(worst, _rel(float(np.sum(g * u)), num))
        report.errors[name] = worst
        if kind == "param":
            report.nonzero[name] = bool(np.any(g != 0))
    return report


def _check_closed_form(target, f, grad, x, rng, step, tol, directions=5) -> GradcheckReport:
    report = GradcheckReport(target, step, tol)
    worst = 0.0
    for _ in range(directions):
        u = rng.standard_normal(x.shape)
        num = (f(x + step * u) - f(x - step * u)) / (2 * step)
        worst = max(worst, _rel(float(np.sum(grad * u)), num))
    report.errors["input.pred" if target == "ciou" else "input.logits"] = worst
    report.nonzero["input"] = bool(np.any(grad != 0))
    return report


def _random_boxes(rng, n):
    xy = rng.uniform(0, 50, (n, 2))
    wh = rng.uniform(5, 40, (n, 2))
    return np.concatenate([xy, xy + wh], axis=1)


def gradcheck(
    target: str,
    shape: tuple[int, ...] | None = None,
    tol: float = GRAD_TOL,
    seed: int = 0,
    hooks: dict[str, Callable] | None = None,
    step: float = FD_STEP,
) -> GradcheckReport:
    """Analytic vs central-difference gradients in f64 for one component.

    ``hooks`` are forwarded to the tape (used to corrupt a backward rule for
    negative controls); they do not affect the closed-form loss targets.
    """
    if target not in TARGETS:
        raise ValueError(f"unknown gradcheck target {target!r}; choose from {TARGETS}")
    rng = np.random.default_rng(seed)
    f64 = np.float64

    if target == "ciou":
        n = (shape or (8,))[0]
        pred, tgt = _random_boxes(rng, n), _random_boxes(rng, n)
        alpha = ciou_alpha(pred, tgt)
        _, g = ciou_loss(pred, tgt, alpha)
        return _check_closed_form(target, lambda p: float(ciou_loss(p, tgt, alpha)[0].sum()), g, pred, rng, step, tol)
    if target == "bce":
        z = rng.standard_normal(shape or (4, 5)) * 3
        t = rng.uniform(0, 1, z.shape)
        _, g = bce_loss(z, t)
        return _check_closed_form(target, lambda zz: bce_loss(zz, t)[0], g, z, rng, step, tol)

    if target == "bms":
        shape = shape or (1, 16, 8, 8)
        cfg = BmsSppfConfig()
        params = init_bms_sppf(rng, shape[1], shape[1], cfg, bn=False, dtype=f64)
        fn = lambda p, x: bms_sppf_forward(x["x"], cfg, p)  # noqa: E731
    elif target == "mssa":
        shape = shape or (1, 8, 8, 8)
        cfg = MssaConfig()
        params = init_mssa(rng, shape[1], cfg, f64)
        fn = lambda p, x: mssa_forward(x["x"], cfg, p)[0]  # noqa: E731
    elif target in ("cap", "cap_pool"):
        shape = shape or (1, 8, 8, 8)
        cfg = CapConfig(strategy="recombine" if target == "cap" else "pool")
        params = init_cap(rng, shape[1], cfg, 4, f64)
        params = map_arrays(params, lambda n, a, b: a + 0.1 * rng.standard_normal(a.shape) if "gn" in n else a)
        fn = lambda p, x: cap_forward(x["x"], cfg, p)  # noqa: E731
    else:  # mhsa
        shape = shape or (1, 8, 4, 4)
        cfg = MhsaConfig()
        params = init_mhsa(rng, shape[1], cfg, f64)
        fn = lambda p, x: mhsa_channel_forward(x["x"], cfg, p)  # noqa: E731
    x = rng.standard_normal(shape)
    return _check_tape(target, fn, params, {"x": x}, rng, step, tol, hooks)


def sign_flip(op: str) -> dict[str, Callable]:
    """Tape hooks that negate every input gradient of ``op``."""
    return {op: lambda grads: [None if g is None else -g for g in grads]}


# ------------------------------------------------------------------ toy model


@dataclass
class ToyNet:
    stem: object
    bms: object
    head: Conv2dParams


TOY_CHANNELS = 16
TOY_SIZE = 16


def init_toy(seed: int = 0, channels: int = TOY_CHANNELS, zero_mssa: bool = False) -> ToyNet:
    """``zero_mssa`` zeroes the directional kernels so both gates start at exactly 0.5."""
    rng = np.random.default_rng(seed)
    stem = init_conv_block(rng, 1, channels, 3, bn=False, dtype=np.float64)
    bms = init_bms_sppf(rng, channels, channels, bn=False, dtype=np.float64)
    if zero_mssa:
        bms = dataclasses.replace(bms, mssa=init_mssa(rng, channels, MssaConfig(), np.float64, zero=True))
    head = Conv2dParams(rng.standard_normal((1, channels, 1, 1)) * math.sqrt(1.0 / channels), np.zeros(1))
    return ToyNet(stem, bms, head)


def toy_forward(net: ToyNet, x, cfg: BmsSppfConfig = BmsSppfConfig()):
    """(N, 1, H, W) -> logits (N, 1, 1, 1)."""
    h = conv_block(x, net.stem)
    h = bms_sppf_forward(h, cfg, net.bms)
    return conv2d(reduce_mean(h, (2, 3)), net.head)


def directional_dataset(seed: int = 0, size: int = TOY_SIZE, n: int = 8, noise: float = 0.05):
    """``n`` images of one vertical (label 1) or horizontal (label 0) line."""
    rng = np.random.default_rng(seed)
    x = noise * rng.standard_normal((n, 1, size, size))
    y = np.zeros((n, 1, 1, 1))
    positions = np.linspace(2, size - 3, n // 2 + n % 2).round().astype(int)
    for i in range(n):
        pos = positions[i // 2]
        if i % 2 == 0:
            x[i, 0, :, pos] += 1.0
            y[i] = 1.0
        else:
            x[i, 0, pos, :] += 1.0
    return x, y


@dataclass
class ToyRun:
    losses: list[float]
    net: ToyNet
    diverged_at: int | None = None

    @property
    def reduction(self) -> float:
        if not self.losses or self.losses[0] == 0:
            return 0.0
        return 1.0 - self.losses[-1] / self.losses[0]

    def smoothed(self, window: int = 5) -> np.ndarray:
        a = np.asarray(self.losses)
        if len(a) < window:
            return a
        return np.convolve(a, np.ones(window) / window, mode="valid")

    def trace_text(self) -> str:
        return "".join(f"{i} {loss:.9g}\n" for i, loss in enumerate(self.losses))


class DivergenceError(FloatingPointError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became {loss} at step {step}")
        self.step = step


def overfit_toy(
    steps: int = 500,
    lr: float = 0.01,
    seed: int = 0,
    momentum: float = 0.937,
    freeze: tuple[str, ...] = (),
    target_reduction: float | None = 0.9,
    raise_on_nan: bool = False,
    zero_mssa: bool = False,
) -> ToyRun:
    """Full-batch SGD with momentum on the directional-line set.

    Parameters whose slot name starts with any prefix in ``freeze`` are not
    updated (e.g. ``"bms.mssa"``). Stops early once the loss has fallen by
    ``target_reduction``; pass ``None`` to always run ``steps`` steps. The
    loss trace is bitwise deterministic for a fixed seed.
    """
    if steps < 0 or lr < 0:
        raise ValueError("steps and lr must be non-negative")
    x, y = directional_dataset(seed)
    net = init_toy(seed, zero_mssa=zero_mssa)
    velocity: dict[str, np.ndarray] = {}
    losses: list[float] = []
    for step in range(steps + 1):
        with Tape() as tape, np.errstate(over="ignore", invalid="ignore"):  # divergence is detected below
            wnet, tracked = watch_learnable(net, tape)
            logits = toy_forward(wnet, x)
        lv = value(logits)
        loss, dlogits = bce_loss(lv, y) if np.all(np.isfinite(lv)) else (math.nan, None)
        if not math.isfinite(loss):
            if raise_on_nan:
                raise DivergenceError(step, loss)
            return ToyRun(losses, net, diverged_at=step)
        losses.append(loss)
        if step == steps or (target_reduction is not None and loss <= (1 - target_reduction) * losses[0]):
            break
        tape.backward(logits, dlogits)
        updates = {}
        for name, var in tracked.items():
            if any(name.startswith(p) for p in freeze):
                continue
            v = momentum * velocity.get(name, 0.0) + tape.grad(var)
            velocity[name] = v
            updates[name] = v
        net = map_arrays(net, lambda n, a, b: a - lr * updates[n] if n in updates else a)
    return ToyRun(losses, net)


def toy_param_names(net: ToyNet) -> list[str]:
    return [n for n, _, buf in iter_slots(net) if not buf]
