"""Traversal helpers for parameter containers.

Parameter state lives in small dataclasses (and dicts/lists of them) holding
float ndarrays. These helpers walk that structure in a fixed order so the
same flat names serve gradient extraction, optimizer state, and checkpoints.
"""

from __future__ import annotations

import dataclasses

import numpy as np


def _is_param_array(value) -> bool:
    return isinstance(value, np.ndarray) and value.dtype == np.float64


def _children(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            yield f.name, getattr(obj, f.name)
    elif isinstance(obj, dict):
        for k, v in obj.items():
            yield str(k), v
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            yield str(i), v


def walk_arrays(obj, prefix: str = ""):
    """Yield (flat_name, ndarray) for every float64 array in the structure."""
    if _is_param_array(obj):
        yield prefix, obj
        return
    for name, child in _children(obj):
        key = f"{prefix}.{name}" if prefix else name
        yield from walk_arrays(child, key)


def bind(tape, obj, out_map: dict, prefix: str = ""):
    """Rebuild the structure with arrays replaced by tape leaves.

    Records flat_name -> Tensor into out_map so gradients can be read back
    after the backward pass.
    """
    if _is_param_array(obj):
        leaf = tape.leaf(obj)
        out_map[prefix] = leaf
        return leaf
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        kwargs = {}
        for f in dataclasses.fields(obj):
            key = f"{prefix}.{f.name}" if prefix else f.name
            kwargs[f.name] = bind(tape, getattr(obj, f.name), out_map, key)
        return dataclasses.replace(obj, **kwargs)
    if isinstance(obj, dict):
        return {k: bind(tape, v, out_map, f"{prefix}.{k}" if prefix else str(k)) for k, v in obj.items()}
    if isinstance(obj, list):
        return [bind(tape, v, out_map, f"{prefix}.{i}" if prefix else str(i)) for i, v in enumerate(obj)]
    if isinstance(obj, tuple):
        return tuple(bind(tape, v, out_map, f"{prefix}.{i}" if prefix else str(i)) for i, v in enumerate(obj))
    return obj


def set_arrays(obj, updates: dict, prefix: str = ""):
    """Write new arrays back into the structure by flat name."""
    for name, child in _children(obj):
        key = f"{prefix}.{name}" if prefix else name
        if _is_param_array(child):
            if key in updates:
                new = np.asarray(updates[key], dtype=np.float64)
                if new.shape != child.shape:
                    raise ValueError(f"{key}: shape {new.shape} != {child.shape}")
                if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
                    setattr(obj, name, new)
                elif isinstance(obj, dict):
                    obj[name] = new
                else:
                    obj[int(name)] = new
        else:
            set_arrays(child, updates, key)
