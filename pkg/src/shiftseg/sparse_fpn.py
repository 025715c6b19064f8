"""SparseMLP row/column/identity mixing and the feature pyramid built on it."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import (
    ShapeError,
    channel_project,
    channel_project_backward,
    init_linear,
    record_macs,
)


@dataclass(frozen=True)
class FpnConfig:
    out_channels: int = 64
    sparse_blocks: int = 2

    def __post_init__(self):
        if self.out_channels <= 0:
            raise ValueError("out_channels must be positive")


def init_sparse_mlp(rng: np.random.Generator, c: int, h: int, w: int) -> dict:
    return {
        "row": init_linear(rng, w, w),
        "col": init_linear(rng, h, h),
        "fuse": init_linear(rng, 3 * c, c),
    }


def _check_sparse(x, p):
    _, c, h, w = x.shape
    if p["row"]["weight"].shape != (w, w) or p["col"]["weight"].shape != (h, h):
        raise ShapeError(f"sparse mlp mixes sized for {p['col']['weight'].shape[0]}x"
                         f"{p['row']['weight'].shape[0]}, input is {h}x{w}")
    if p["fuse"]["weight"].shape[0] != 3 * c:
        raise ShapeError(f"fuse expects {p['fuse']['weight'].shape[0]} channels, got 3*{c}")


def mix_rows(x: np.ndarray, m: dict) -> np.ndarray:
    """Mix along the width axis with one weight shared by every row and channel."""
    n, c, h, w = x.shape
    record_macs(n * c * h * w * m["weight"].shape[1])
    return np.einsum("nchw,wv->nchv", x, m["weight"], optimize=True) + m["bias"]


def mix_cols(x: np.ndarray, m: dict) -> np.ndarray:
    n, c, h, w = x.shape
    record_macs(n * c * h * w * m["weight"].shape[1])
    return np.einsum("nchw,hg->ncgw", x, m["weight"], optimize=True) + m["bias"][:, None]


def sparse_mlp_forward(x: np.ndarray, p: dict):
    _check_sparse(x, p)
    cat = np.concatenate([mix_cols(x, p["col"]), mix_rows(x, p["row"]), x], axis=1)
    return channel_project(cat, p["fuse"]), cat


def sparse_mlp_block(x: np.ndarray, p: dict) -> np.ndarray:
    """FC(concat(X_H, X_W, X)) with the same shape as ``x``."""
    return sparse_mlp_forward(x, p)[0]


def sparse_mlp_backward(dout, x, cat, p):
    c = x.shape[1]
    dcat, g_fuse = channel_project_backward(dout, cat, p["fuse"])
    dxh, dxw, dx = dcat[:, :c], dcat[:, c:2 * c], dcat[:, 2 * c:].copy()
    dx += np.einsum("ncgw,hg->nchw", dxh, p["col"]["weight"], optimize=True)
    dx += np.einsum("nchv,wv->nchw", dxw, p["row"]["weight"], optimize=True)
    g_col = {"weight": np.einsum("nchw,ncgw->hg", x, dxh, optimize=True), "bias": dxh.sum(axis=(0, 1, 3))}
    g_row = {"weight": np.einsum("nchw,nchv->wv", x, dxw, optimize=True), "bias": dxw.sum(axis=(0, 1, 2))}
    return dx, {"row": g_row, "col": g_col, "fuse": g_fuse}


def count_macs_sparse(h: int, w: int, c: int) -> int:
    """Closed form HWC(H+W) + 3HWC^2."""
    return h * w * c * (h + w) + 3 * h * w * c * c


def receptive_field_mask(depth: int, h: int, w: int, probe, channels: int = 4, seed: int = 0,
                         threshold: float = 1e-12) -> np.ndarray:
    """Positions whose input perturbation reaches output ``probe`` after ``depth`` blocks.

    Uses exact Jacobian rows obtained by backpropagating a one-hot gradient
    per output channel through randomly initialised blocks.
    """
    i, j = probe
    if not (0 <= i < h and 0 <= j < w):
        raise ValueError(f"probe {probe} outside {h}x{w} grid")
    rng = np.random.default_rng(seed)
    blocks = [init_sparse_mlp(rng, channels, h, w) for _ in range(depth)]
    x = rng.standard_normal((1, channels, h, w))
    caches = []
    for p in blocks:
        caches.append(x)
        x, cat = sparse_mlp_forward(x, p)
        caches[-1] = (caches[-1], cat)
    support = np.zeros((h, w), dtype=bool)
    for k in range(channels):
        d = np.zeros((1, channels, h, w))
        d[0, k, i, j] = 1.0
        for p, (xin, cat) in zip(reversed(blocks), reversed(caches)):
            d, _ = sparse_mlp_backward(d, xin, cat, p)
        support |= np.abs(d[0]).max(axis=0) > threshold
    return support


# ---------------------------------------------------------------------------
# Feature pyramid
# ---------------------------------------------------------------------------

def upsample2(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample2_backward(dout: np.ndarray) -> np.ndarray:
    n, c, h, w = dout.shape
    return dout.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def init_fpn(rng: np.random.Generator, stage_shapes: Sequence[tuple], cfg: FpnConfig) -> dict:
    """``stage_shapes`` are (c, h, w) per backbone stage, finest first."""
    oc = cfg.out_channels
    return {
        "lateral": [init_linear(rng, c, oc) for c, _, _ in stage_shapes],
        "sparse": [[init_sparse_mlp(rng, oc, h, w) for _ in range(cfg.sparse_blocks)]
                   for _, h, w in stage_shapes],
        "out": [init_linear(rng, oc, oc) for _ in stage_shapes],
    }


def fpn_forward(stages: Sequence[np.ndarray], cfg: FpnConfig, params: dict):
    """Lateral projections, top-down nearest 2x fusion, SparseMLPs, 1x1 output.

    Returns (pyramid, cache), pyramid finest first.
    """
    if len(stages) != len(params["lateral"]):
        raise ShapeError(f"{len(stages)} stages for {len(params['lateral'])} laterals")
    for fine, coarse in zip(stages[:-1], stages[1:]):
        if fine.shape[2] != 2 * coarse.shape[2] or fine.shape[3] != 2 * coarse.shape[3]:
            raise ShapeError(f"stage resolutions {fine.shape[2:]} and {coarse.shape[2:]} are not 2x nested")
    lat = [channel_project(s, m) for s, m in zip(stages, params["lateral"])]
    merged = [None] * len(stages)
    merged[-1] = lat[-1]
    for k in reversed(range(len(stages) - 1)):
        merged[k] = lat[k] + upsample2(merged[k + 1])
    pyramid, level_caches = [], []
    for k, x in enumerate(merged):
        steps = []
        for p in params["sparse"][k]:
            y, cat = sparse_mlp_forward(x, p)
            steps.append((x, cat))
            x = y
        level_caches.append((steps, x))
        pyramid.append(channel_project(x, params["out"][k]))
    return pyramid, {"stages": list(stages), "levels": level_caches}


def fpn_backward(dpyr: Sequence[np.ndarray | None], cache: dict, params: dict):
    stages = cache["stages"]
    n_levels = len(stages)
    grads = {"lateral": [None] * n_levels, "sparse": [None] * n_levels, "out": [None] * n_levels}
    dmerged = []
    for k in range(n_levels):
        steps, pre_out = cache["levels"][k]
        d = dpyr[k] if dpyr[k] is not None else np.zeros(
            (pre_out.shape[0], params["out"][k]["weight"].shape[1]) + pre_out.shape[2:])
        d, grads["out"][k] = channel_project_backward(d, pre_out, params["out"][k])
        gs = [None] * len(steps)
        for b in reversed(range(len(steps))):
            x, cat = steps[b]
            d, gs[b] = sparse_mlp_backward(d, x, cat, params["sparse"][k][b])
        grads["sparse"][k] = gs
        dmerged.append(d)
    dstages = [None] * n_levels
    # merged[k] feeds merged[k - 1], so totals accumulate from the finest level up
    carry = None
    for k in range(n_levels):
        dlat = dmerged[k] if carry is None else dmerged[k] + carry
        dstages[k], grads["lateral"][k] = channel_project_backward(dlat, stages[k], params["lateral"][k])
        carry = upsample2_backward(dlat)
    return dstages, grads


def fpn(stages, cfg, params):
    return fpn_forward(stages, cfg, params)[0]
