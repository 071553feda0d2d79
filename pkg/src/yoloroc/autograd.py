"""Tape-based reverse-mode differentiation.

Kernels stay plain numpy functions. When a :class:`Tape` is active and at
least one input of a kernel is a :class:`Var`, the kernel output is wrapped in
a ``Var`` and a tape entry is recorded with the kernel's backward closure.
Outside a tape everything runs on bare ``ndarray`` values with no overhead.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "yoloroc_active_tape", default=None
)


class UnsupportedOpError(RuntimeError):
    """Raised when backward reaches an op that has no gradient rule."""


class Var:
    """A value tracked by the active tape."""

    __slots__ = ("value", "name")

    def __init__(self, value, name: str | None = None):
        self.value = np.asarray(value)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.value.shape}, dtype={self.value.dtype})"


def value(x):
    """Unwrap a ``Var``; pass arrays and ``None`` through."""
    return x.value if isinstance(x, Var) else x


@dataclass
class TapeEntry:
    op: str
    inputs: tuple
    output: Var
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None


@dataclass
class Tape:
    """Records differentiable ops executed inside ``with tape:``.

    ``hooks`` maps an op name to a callable applied to the list of input
    gradients that op produces; it exists for negative-control experiments
    (e.g. flipping the sign of one op's backward).
    """

    hooks: dict[str, Callable[[list], list]] = field(default_factory=dict)
    entries: list[TapeEntry] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)

    def watch(self, array, name: str | None = None) -> Var:
        return Var(np.asarray(array), name=name)

    def backward(self, output: Var, output_grad=None) -> dict[int, np.ndarray]:
        """Reverse-accumulate gradients from ``output``.

        Returns a mapping ``id(var) -> gradient`` covering every ``Var`` that
        the output depends on; use :meth:`grad` for lookup.
        """
        if not isinstance(output, Var):
            raise TypeError("backward needs a Var produced under this tape")
        if output_grad is None:
            output_grad = np.ones_like(output.value)
        grads: dict[int, np.ndarray] = {id(output): np.asarray(output_grad, dtype=output.value.dtype)}
        for entry in reversed(self.entries):
            g = grads.get(id(entry.output))
            if g is None:
                continue
            if entry.backward is None:
                raise UnsupportedOpError(f"unsupported op on tape: {entry.op}")
            in_grads = list(entry.backward(g))
            hook = self.hooks.get(entry.op)
            if hook is not None:
                in_grads = list(hook(in_grads))
            for inp, ig in zip(entry.inputs, in_grads):
                if not isinstance(inp, Var) or ig is None:
                    continue
                prev = grads.get(id(inp))
                grads[id(inp)] = ig if prev is None else prev + ig
        self._grads = grads
        return grads

    def grad(self, var: Var) -> np.ndarray:
        """Gradient of the last backward output w.r.t. ``var`` (zeros if unreached)."""
        g = self._grads.get(id(var))
        return np.zeros_like(var.value) if g is None else g


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def record(op: str, out: np.ndarray, inputs: Iterable, backward=None):
    """Wrap ``out`` and register ``backward`` if any input is tracked.

    ``backward`` receives the output gradient and returns one gradient (or
    ``None``) per entry of ``inputs``. Pass ``backward=None`` for ops that are
    forward-only; reaching them during backward raises
    :class:`UnsupportedOpError`.
    """
    tape = _ACTIVE_TAPE.get()
    inputs = tuple(inputs)
    if tape is None or not any(isinstance(i, Var) for i in inputs):
        return out
    result = Var(out)
    tape.entries.append(TapeEntry(op, inputs, result, backward))
    return result
