"""Dense NCHW tensors and the shape-level primitives the kernels build on.

Tensors are plain row-major ``numpy.ndarray`` values of rank <= 4 in float32
or float64. Every function here accepts either arrays or tracked
:class:`~yoloroc.autograd.Var` values and records a gradient rule when a tape
is active.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autograd import Var, record, value

PRECISIONS = {"f32": np.float32, "f64": np.float64}
MAX_RANK = 4


class ShapeError(ValueError):
    """Incompatible tensor shapes."""


def as_tensor(data, precision: str = "f32") -> np.ndarray:
    """Validate and convert ``data`` into a contiguous tensor."""
    if precision not in PRECISIONS:
        raise ValueError(f"precision must be one of {sorted(PRECISIONS)}, got {precision!r}")
    arr = np.ascontiguousarray(data, dtype=PRECISIONS[precision])
    if arr.ndim > MAX_RANK:
        raise ShapeError(f"rank {arr.ndim} exceeds {MAX_RANK}")
    if any(n < 1 for n in arr.shape):
        raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
    return arr


def precision_of(x) -> str:
    return "f64" if value(x).dtype == np.float64 else "f32"


def _broadcast_shape_ok(a_shape, b_shape) -> bool:
    if len(b_shape) > len(a_shape):
        return False
    padded = (1,) * (len(a_shape) - len(b_shape)) + tuple(b_shape)
    return all(bs == as_ or bs == 1 for as_, bs in zip(a_shape, padded))


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of extent-1 stretching)."""
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def elementwise_mul(a, b):
    """``a * b`` where ``b`` may stretch along extent-1 axes; output has ``a``'s shape."""
    av, bv = value(a), value(b)
    if not _broadcast_shape_ok(av.shape, bv.shape):
        raise ShapeError(f"cannot broadcast {bv.shape} onto {av.shape}")
    out = av * bv

    def backward(g):
        return g * bv, _unbroadcast(g * av, bv.shape)

    return record("elementwise_mul", out, (a, b), backward)


def add(a, b):
    """``a + b`` with the same broadcasting rule as :func:`elementwise_mul`."""
    av, bv = value(a), value(b)
    if not _broadcast_shape_ok(av.shape, bv.shape):
        raise ShapeError(f"cannot broadcast {bv.shape} onto {av.shape}")
    out = av + bv
    return record("add", out, (a, b), lambda g: (g, _unbroadcast(g, bv.shape)))


def scale(x, factor: float):
    """Multiply by a Python scalar."""
    return record("scale", value(x) * factor, (x,), lambda g: (g * factor,))


def concat(tensors: Sequence, axis: int = 1):
    """Join tensors along ``axis``; all other extents must agree."""
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    vals = [value(t) for t in tensors]
    ref = vals[0].shape
    for v in vals[1:]:
        if v.ndim != len(ref) or any(
            i != axis % len(ref) and x != y for i, (x, y) in enumerate(zip(v.shape, ref))
        ):
            raise ShapeError(f"concat axis {axis}: mismatched shapes {ref} and {v.shape}")
    out = np.concatenate(vals, axis=axis)
    offsets = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def backward(g):
        return np.split(g, offsets, axis=axis)

    return record("concat", out, tensors, backward)


def split(x, sizes: Sequence[int], axis: int = 1) -> list:
    """Split ``x`` into consecutive chunks of the given extents along ``axis``."""
    xv = value(x)
    if sum(sizes) != xv.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover extent {xv.shape[axis]}")
    parts = []
    start = 0
    for n in sizes:
        index = [slice(None)] * xv.ndim
        index[axis] = slice(start, start + n)
        index = tuple(index)

        def backward(g, index=index):
            full = np.zeros_like(xv)
            full[index] = g
            return (full,)

        parts.append(record("split", xv[index].copy(), (x,), backward))
        start += n
    return parts


def reduce_mean(x, axis, keepdims: bool = True):
    """Arithmetic mean over ``axis`` (int or tuple)."""
    xv = value(x)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    for a in axes:
        if not -xv.ndim <= a < xv.ndim:
            raise ShapeError(f"axis {a} out of range for rank {xv.ndim}")
    count = int(np.prod([xv.shape[a] for a in axes]))
    out = xv.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, tuple(a % xv.ndim for a in axes))
        return (np.broadcast_to(g / count, xv.shape).copy(),)

    return record("reduce_mean", out, (x,), backward)


def reshape_view(x, new_shape):
    """Reinterpret the row-major buffer under ``new_shape``."""
    xv = value(x)
    new_shape = tuple(int(n) for n in new_shape)
    if int(np.prod(new_shape)) != xv.size:
        raise ShapeError(f"cannot view {xv.shape} ({xv.size} elements) as {new_shape}")
    out = xv.reshape(new_shape)
    return record("reshape", out, (x,), lambda g: (g.reshape(xv.shape),))


def transpose(x, axis_a: int, axis_b: int):
    """Swap two axes (returns a contiguous copy)."""
    out = np.ascontiguousarray(np.swapaxes(value(x), axis_a, axis_b))
    return record("transpose", out, (x,), lambda g: (np.swapaxes(g, axis_a, axis_b),))


def matmul(a, b):
    """Batched matrix product over the last two axes."""
    av, bv = value(a), value(b)
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {av.shape} @ {bv.shape}")
    out = av @ bv

    def backward(g):
        return g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g

    return record("matmul", out, (a, b), backward)


__all__ = [
    "PRECISIONS",
    "ShapeError",
    "Var",
    "add",
    "as_tensor",
    "concat",
    "elementwise_mul",
    "matmul",
    "precision_of",
    "reduce_mean",
    "reshape_view",
    "scale",
    "split",
    "transpose",
]
