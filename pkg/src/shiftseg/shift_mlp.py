"""Axial-shift MLP backbone: patch embedding, shift token mixing and staged blocks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import (
    ShapeError,
    channel_project,
    channel_project_backward,
    gelu,
    gelu_backward,
    init_linear,
    init_norm,
    layer_norm,
    layer_norm_backward,
)

HORIZONTAL = "horizontal"
VERTICAL = "vertical"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ShiftSpec:
    axis: str = HORIZONTAL
    size: int = 3

    def __post_init__(self):
        if self.axis not in (HORIZONTAL, VERTICAL):
            raise ConfigError(f"unknown shift axis {self.axis!r}")
        if self.size < 1 or self.size % 2 == 0:
            raise ConfigError(f"shift size must be odd and positive, got {self.size}")

    def offsets(self) -> list[int]:
        half = (self.size - 1) // 2
        return [g - half for g in range(self.size)]


@dataclass(frozen=True)
class BackboneConfig:
    patch_size: int = 4
    widths: tuple = (48, 96, 192, 384)
    depths: tuple = (2, 2, 4, 2)
    downsample: int = 2
    # ratio 1 keeps the block at exactly four CxC projections (4HWC^2)
    mlp_ratio: int = 1
    shift_size: int = 3
    eps: float = 1e-6

    def __post_init__(self):
        if len(self.widths) != len(self.depths) or not self.widths:
            raise ConfigError("widths and depths must have the same non-zero length")
        if self.patch_size < 1 or self.downsample < 1 or self.mlp_ratio < 1:
            raise ConfigError("patch size, downsample factor and mlp ratio must be positive")

    @property
    def total_stride(self) -> int:
        return self.patch_size * self.downsample ** (len(self.widths) - 1)


# ---------------------------------------------------------------------------
# Axial shift
# ---------------------------------------------------------------------------

def _translate(x: np.ndarray, offset: int, axis: int) -> np.ndarray:
    """out[..., k, ...] = x[..., k - offset, ...], zero where that is outside."""
    out = np.zeros_like(x)
    n = x.shape[axis]
    if abs(offset) >= n:
        return out
    dst = [slice(None)] * x.ndim
    src = [slice(None)] * x.ndim
    if offset >= 0:
        dst[axis], src[axis] = slice(offset, n), slice(0, n - offset)
    else:
        dst[axis], src[axis] = slice(0, n + offset), slice(-offset, n)
    out[tuple(dst)] = x[tuple(src)]
    return out


def axial_shift(x: np.ndarray, spec: ShiftSpec, reverse: bool = False) -> np.ndarray:
    """Translate channel group g by ``g - (s-1)/2`` pixels along the spec axis.

    ``reverse=True`` applies the opposite offsets, which is also the adjoint
    (backward pass) of the forward shift.
    """
    c = x.shape[1]
    if c % spec.size:
        raise ConfigError(f"{c} channels not divisible by shift size {spec.size}")
    axis = 3 if spec.axis == HORIZONTAL else 2
    g = c // spec.size
    out = np.empty_like(x)
    for k, off in enumerate(spec.offsets()):
        out[:, k * g:(k + 1) * g] = _translate(x[:, k * g:(k + 1) * g], -off if reverse else off, axis)
    return out


def axial_shift_backward(dout: np.ndarray, spec: ShiftSpec) -> np.ndarray:
    return axial_shift(dout, spec, reverse=True)


# ---------------------------------------------------------------------------
# Stone block
# ---------------------------------------------------------------------------

def init_stone_block(rng: np.random.Generator, c: int, mlp_ratio: int = 1) -> dict:
    return {
        "norm1": init_norm(c),
        "wh": init_linear(rng, c, c),
        "wv": init_linear(rng, c, c),
        "norm2": init_norm(c),
        "fc1": init_linear(rng, c, mlp_ratio * c),
        "fc2": init_linear(rng, mlp_ratio * c, c),
    }


def shift_token_mix(x: np.ndarray, p: dict, shift: int = 3) -> np.ndarray:
    """Y = shift_h(x) W_h + shift_v(x) W_v."""
    xh = axial_shift(x, ShiftSpec(HORIZONTAL, shift))
    xv = axial_shift(x, ShiftSpec(VERTICAL, shift))
    return channel_project(xh, p["wh"]) + channel_project(xv, p["wv"])


def shift_token_mix_backward(dout, x, p, shift=3):
    sh, sv = ShiftSpec(HORIZONTAL, shift), ShiftSpec(VERTICAL, shift)
    dxh, gh = channel_project_backward(dout, axial_shift(x, sh), p["wh"])
    dxv, gv = channel_project_backward(dout, axial_shift(x, sv), p["wv"])
    dx = axial_shift_backward(dxh, sh) + axial_shift_backward(dxv, sv)
    return dx, {"wh": gh, "wv": gv}


def stone_block_forward(x: np.ndarray, p: dict, shift: int = 3, eps: float = 1e-6):
    n1 = layer_norm(x, p["norm1"]["gamma"], p["norm1"]["beta"], eps)
    y = x + shift_token_mix(n1, p, shift)
    n2 = layer_norm(y, p["norm2"]["gamma"], p["norm2"]["beta"], eps)
    h = channel_project(n2, p["fc1"])
    out = y + channel_project(gelu(h), p["fc2"])
    return out, (x, n1, y, n2, h)


def stone_block(x: np.ndarray, p: dict, shift: int = 3, eps: float = 1e-6) -> np.ndarray:
    if p["wh"]["weight"].shape[0] != p["wh"]["weight"].shape[1] or p["fc2"]["weight"].shape[1] != x.shape[1]:
        raise ShapeError("stone block projections must be square over the input width")
    return stone_block_forward(x, p, shift, eps)[0]


def stone_block_backward(dout, cache, p, shift=3, eps=1e-6):
    x, n1, y, n2, h = cache
    dact, g_fc2 = channel_project_backward(dout, gelu(h), p["fc2"])
    dn2, g_fc1 = channel_project_backward(gelu_backward(dact, h), n2, p["fc1"])
    dy_norm, g_norm2 = layer_norm_backward(dn2, y, p["norm2"]["gamma"], p["norm2"]["beta"], eps)
    dy = dout + dy_norm
    dn1, g_mix = shift_token_mix_backward(dy, n1, p, shift)
    dx_norm, g_norm1 = layer_norm_backward(dn1, x, p["norm1"]["gamma"], p["norm1"]["beta"], eps)
    grads = {"norm1": g_norm1, "norm2": g_norm2, "fc1": g_fc1, "fc2": g_fc2, **g_mix}
    return dy + dx_norm, grads


# ---------------------------------------------------------------------------
# Patch embedding / merging
# ---------------------------------------------------------------------------

def space_to_depth(x: np.ndarray, p: int) -> np.ndarray:
    """Flatten each non-overlapping p x p patch into channels, ordered (c, row, col)."""
    n, c, h, w = x.shape
    if h % p or w % p:
        raise ShapeError(f"spatial dims {h}x{w} not divisible by patch size {p}")
    t = x.reshape(n, c, h // p, p, w // p, p).transpose(0, 1, 3, 5, 2, 4)
    return t.reshape(n, c * p * p, h // p, w // p)


def depth_to_space(x: np.ndarray, p: int) -> np.ndarray:
    n, cpp, hp, wp = x.shape
    c = cpp // (p * p)
    t = x.reshape(n, c, p, p, hp, wp).transpose(0, 1, 4, 2, 5, 3)
    return t.reshape(n, c, hp * p, wp * p)


def patch_embed(img: np.ndarray, m: dict, patch: int = 4) -> np.ndarray:
    return channel_project(space_to_depth(img, patch), m)


def patch_embed_backward(dout, img, m, patch=4):
    dpatches, g = channel_project_backward(dout, space_to_depth(img, patch), m)
    return depth_to_space(dpatches, patch), g


# ---------------------------------------------------------------------------
# Full backbone
# ---------------------------------------------------------------------------

def init_backbone(rng: np.random.Generator, cfg: BackboneConfig, in_channels: int = 3) -> dict:
    stages = []
    prev = None
    for k, (width, depth) in enumerate(zip(cfg.widths, cfg.depths)):
        stage = {"blocks": [init_stone_block(rng, width, cfg.mlp_ratio) for _ in range(depth)]}
        if k > 0:
            stage["merge"] = init_linear(rng, prev * cfg.downsample**2, width)
        stages.append(stage)
        prev = width
    return {"embed": init_linear(rng, in_channels * cfg.patch_size**2, cfg.widths[0]), "stages": stages}


def backbone_forward(img: np.ndarray, cfg: BackboneConfig, params: dict):
    """Returns (per-stage feature maps, cache for backbone_backward)."""
    h, w = img.shape[2:]
    if h % cfg.total_stride or w % cfg.total_stride:
        raise ShapeError(f"image {h}x{w} not divisible by total stride {cfg.total_stride}")
    x = patch_embed(img, params["embed"], cfg.patch_size)
    outs, cache = [], {"img": img, "stages": []}
    for k, stage in enumerate(params["stages"]):
        sc = {}
        if k > 0:
            sc["pre_merge"] = x
            x = patch_embed(x, stage["merge"], cfg.downsample)
        sc["blocks"] = []
        for bp in stage["blocks"]:
            x, bc = stone_block_forward(x, bp, cfg.shift_size, cfg.eps)
            sc["blocks"].append(bc)
        sc["out_shape"] = x.shape
        cache["stages"].append(sc)
        outs.append(x)
    return outs, cache


def backbone_backward(douts: Sequence[np.ndarray | None], cache: dict, cfg: BackboneConfig, params: dict):
    """Backpropagate per-stage output gradients; returns (dimg, grads)."""
    grads = {"stages": [None] * len(params["stages"])}
    carry = None
    for k in reversed(range(len(params["stages"]))):
        stage, sc = params["stages"][k], cache["stages"][k]
        d = douts[k]
        if carry is not None:
            d = carry if d is None else d + carry
        if d is None:
            d = np.zeros(sc["out_shape"])
        g_stage = {"blocks": [None] * len(stage["blocks"])}
        for b in reversed(range(len(stage["blocks"]))):
            d, g_stage["blocks"][b] = stone_block_backward(d, sc["blocks"][b], stage["blocks"][b], cfg.shift_size, cfg.eps)
        if k > 0:
            d, g_stage["merge"] = patch_embed_backward(d, sc["pre_merge"], stage["merge"], cfg.downsample)
        grads["stages"][k] = g_stage
        carry = d
    dimg, grads["embed"] = patch_embed_backward(carry, cache["img"], params["embed"], cfg.patch_size)
    return dimg, grads


def backbone(img: np.ndarray, cfg: BackboneConfig, params: dict) -> list[np.ndarray]:
    return backbone_forward(img, cfg, params)[0]


# ---------------------------------------------------------------------------
# Complexity
# ---------------------------------------------------------------------------

def count_macs_stone(h: int, w: int, c: int) -> int:
    """Closed-form projection MACs of one block: 4HWC^2."""
    return 4 * h * w * c * c
