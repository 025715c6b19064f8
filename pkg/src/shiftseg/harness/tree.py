"""Helpers for nested dict/list parameter trees with ndarray leaves."""

from __future__ import annotations

import numpy as np


def flatten(tree, prefix: str = "") -> dict:
    """Dotted-path view of every leaf array (arrays are shared, not copied)."""
    out = {}
    if isinstance(tree, dict):
        items = tree.items()
    elif isinstance(tree, (list, tuple)):
        items = enumerate(tree)
    else:
        return {prefix: tree}
    for key, sub in items:
        out.update(flatten(sub, f"{prefix}.{key}" if prefix else str(key)))
    return out


def tree_map(fn, tree, *rest):
    if isinstance(tree, dict):
        return {k: tree_map(fn, tree[k], *(r[k] for r in rest)) for k in tree}
    if isinstance(tree, (list, tuple)):
        return [tree_map(fn, t, *(r[i] for r in rest)) for i, t in enumerate(tree)]
    return fn(tree, *rest)


def tree_add(a, b):
    """Elementwise sum where either side may be None (no contribution)."""
    if a is None:
        return b
    if b is None:
        return a
    return tree_map(lambda x, y: x + y, a, b)


def accumulate(dst, src) -> None:
    """In-place ``dst += src`` over the subtree that ``src`` covers."""
    items = src.items() if isinstance(src, dict) else enumerate(src)
    for k, v in items:
        if isinstance(v, np.ndarray):
            dst[k] += v
        else:
            accumulate(dst[k], v)


def zeros_like(tree):
    return tree_map(np.zeros_like, tree)


def load_flat(tree, flat: dict) -> None:
    """Copy values from a flat mapping into ``tree`` in place."""
    for key, leaf in flatten(tree).items():
        if key not in flat:
            raise KeyError(f"missing parameter {key}")
        if flat[key].shape != leaf.shape:
            raise ValueError(f"{key}: stored shape {flat[key].shape} vs model {leaf.shape}")
        leaf[...] = flat[key]


def count_params(tree) -> int:
    return sum(v.size for v in flatten(tree).values())
