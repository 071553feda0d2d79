"""Flatten and rebuild nested parameter records.

Parameter records are dataclasses whose array-valued fields may be nested
dataclasses or lists of them. Slot names are the dotted field path, which is
also the naming used by the weights file.
"""

from __future__ import annotations

import dataclasses
from typing import Callable, Iterator

import numpy as np

from .autograd import Var


def _is_array(v) -> bool:
    return isinstance(v, (np.ndarray, Var))


def iter_slots(obj, prefix: str = "") -> Iterator[tuple[str, object, bool]]:
    """Yield ``(name, array, is_buffer)`` for every array leaf of ``obj``."""
    if dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            name = f"{prefix}.{f.name}" if prefix else f.name
            if _is_array(v):
                yield name, v, bool(f.metadata.get("buffer", False))
            elif v is not None:
                yield from iter_slots(v, name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from iter_slots(item, f"{prefix}.{i}" if prefix else str(i))


def learnable(obj, prefix: str = "") -> dict[str, object]:
    return {n: v for n, v, buf in iter_slots(obj, prefix) if not buf}


def map_arrays(obj, fn: Callable[[str, object, bool], object], prefix: str = ""):
    """Return a copy of ``obj`` with every array leaf replaced by ``fn(name, leaf, is_buffer)``."""
    if dataclasses.is_dataclass(obj):
        changes = {}
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            name = f"{prefix}.{f.name}" if prefix else f.name
            if _is_array(v):
                changes[f.name] = fn(name, v, bool(f.metadata.get("buffer", False)))
            elif v is not None and (dataclasses.is_dataclass(v) or isinstance(v, (list, tuple))):
                changes[f.name] = map_arrays(v, fn, name)
        return dataclasses.replace(obj, **changes)
    if isinstance(obj, (list, tuple)):
        return type(obj)(
            map_arrays(item, fn, f"{prefix}.{i}" if prefix else str(i)) for i, item in enumerate(obj)
        )
    return obj


def watch_learnable(obj, tape) -> tuple[object, dict[str, Var]]:
    """Wrap every learnable leaf in a tape ``Var``; buffers stay plain arrays."""
    tracked: dict[str, Var] = {}

    def wrap(name, leaf, is_buffer):
        if is_buffer:
            return leaf
        v = tape.watch(leaf, name=name)
        tracked[name] = v
        return v

    return map_arrays(obj, wrap), tracked
