"""Flatten parameter records to ``name -> array`` maps and back."""
from __future__ import annotations

import dataclasses

import numpy as np


def flatten(obj, prefix: str = "") -> dict[str, np.ndarray]:
    """Walk dataclasses and lists, collecting every ndarray under a dotted name."""
    out: dict[str, np.ndarray] = {}
    _walk(obj, prefix, out)
    return out


def _walk(obj, name, out):
    if isinstance(obj, np.ndarray):
        out[name] = obj
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            _walk(getattr(obj, f.name), f"{name}.{f.name}" if name else f.name, out)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            _walk(item, f"{name}.{i}" if name else str(i), out)


def unflatten(template, state: dict[str, np.ndarray], prefix: str = ""):
    """Return a copy of ``template`` with its arrays taken from ``state``.

    Names and shapes must match exactly; extra or missing entries raise.
    """
    used: set[str] = set()
    result = _rebuild(template, prefix, state, used)
    extra = set(state) - used
    if extra:
        raise KeyError(f"unexpected tensors: {sorted(extra)[:5]}")
    return result


def _rebuild(obj, name, state, used):
    if isinstance(obj, np.ndarray):
        if name not in state:
            raise KeyError(f"missing tensor {name!r}")
        arr = np.asarray(state[name])
        if arr.shape != obj.shape:
            raise ValueError(f"tensor {name!r} has shape {arr.shape}, expected {obj.shape}")
        used.add(name)
        return arr.astype(obj.dtype, copy=False)
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        changes = {}
        for f in dataclasses.fields(obj):
            if not f.init:
                continue
            child = f"{name}.{f.name}" if name else f.name
            changes[f.name] = _rebuild(getattr(obj, f.name), child, state, used)
        return dataclasses.replace(obj, **changes)
    if isinstance(obj, list):
        return [_rebuild(item, f"{name}.{i}" if name else str(i), state, used) for i, item in enumerate(obj)]
    return obj


def count_params(obj) -> int:
    return sum(a.size for a in flatten(obj).values())
