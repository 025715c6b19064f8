"""Seeded ore-like scenes: overlapping rotated ellipses with blurred edges."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .rng import SplitMix64, stream_seed

POLYGON_VERTICES = 64


class SceneGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    min_instances: int = 2
    max_instances: int = 5
    min_axis: float = 6.0
    max_axis: float = 14.0
    max_overlap: float = 0.25
    blur_sigma: float = 1.0
    noise: float = 6.0
    seed: int = 0
    max_attempts: int = 200
    max_restarts: int = 20

    def __post_init__(self):
        if not 0 < self.min_instances <= self.max_instances:
            raise ValueError("need 0 < min_instances <= max_instances")
        if not 0 < self.min_axis <= self.max_axis:
            raise ValueError("need 0 < min_axis <= max_axis")
        if not 0 <= self.max_overlap < 1:
            raise ValueError("max_overlap must lie in [0, 1)")
        if self.blur_sigma < 0 or self.noise < 0:
            raise ValueError("blur sigma and noise must be non-negative")


@dataclass
class InstanceAnnotation:
    id: int
    mask: np.ndarray            # bool (h, w)
    polygon: np.ndarray         # (K, 2) image-normalised (x, y), positive signed area
    box: tuple                  # (x0, y0, x1, y1) pixel bounds, x1/y1 exclusive
    empty: bool = False

    def box_normalized(self) -> np.ndarray:
        h, w = self.mask.shape
        x0, y0, x1, y1 = self.box
        return np.array([x0 / w, y0 / h, x1 / w, y1 / h])

    def __eq__(self, other):
        return (
            isinstance(other, InstanceAnnotation)
            and self.id == other.id
            and self.box == other.box
            and self.empty == other.empty
            and np.array_equal(self.mask, other.mask)
            and np.array_equal(self.polygon, other.polygon)
        )


@dataclass
class Scene:
    index: int
    image: np.ndarray           # uint8 (h, w)
    instances: list = field(default_factory=list)

    def __eq__(self, other):
        return (
            isinstance(other, Scene)
            and self.index == other.index
            and self.image.dtype == other.image.dtype
            and np.array_equal(self.image, other.image)
            and self.instances == other.instances
        )

    def image_tensor(self) -> np.ndarray:
        """(1, 3, h, w) float image, grey level replicated to three channels."""
        g = self.image.astype(np.float64) / 255.0
        g = (g - 0.5) / 0.25
        return np.repeat(g[None, None], 3, axis=1)


def mask_box(mask: np.ndarray):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    return (int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


def rasterize_instance(cx, cy, a, b, theta, height, width, inst_id=0,
                       vertices: int = POLYGON_VERTICES) -> InstanceAnnotation:
    """Pixel-centre inclusion mask plus an angular polygon of the ellipse.

    Geometry is in pixel units; pixel (i, j) has its centre at (j + .5, i + .5).
    """
    if a <= 0 or b <= 0:
        raise ValueError("ellipse semi-axes must be positive")
    ys, xs = np.mgrid[0:height, 0:width] + 0.5
    c, s = math.cos(theta), math.sin(theta)
    dx, dy = xs - cx, ys - cy
    u = (dx * c + dy * s) / a
    v = (-dx * s + dy * c) / b
    mask = u * u + v * v <= 1.0
    phi = 2.0 * np.pi * np.arange(vertices) / vertices
    px = cx + a * c * np.cos(phi) - b * s * np.sin(phi)
    py = cy + a * s * np.cos(phi) + b * c * np.sin(phi)
    polygon = np.stack([px / width, py / height], axis=1)
    box = mask_box(mask)
    if box is None:
        return InstanceAnnotation(inst_id, mask, polygon, (0, 0, 0, 0), empty=True)
    return InstanceAnnotation(inst_id, mask, polygon, box)


def overlap_fraction(m1: np.ndarray, m2: np.ndarray) -> float:
    inter = np.logical_and(m1, m2).sum()
    return float(inter) / max(min(m1.sum(), m2.sum()), 1)


def generate_scene(spec: SceneSpec, index: int) -> Scene:
    rng = SplitMix64(stream_seed(spec.seed, index))
    h, w = spec.height, spec.width
    margin = spec.max_axis + 1.0
    if 2 * margin >= min(h, w):
        raise SceneGenerationError(f"max_axis {spec.max_axis} does not fit a {h}x{w} frame")
    count = rng.integer(spec.min_instances, spec.max_instances)
    # crowded frames can paint themselves into a corner; start the layout over a few times
    for _ in range(spec.max_restarts + 1):
        instances = _place(spec, count, rng)
        if instances is not None:
            break
    else:
        raise SceneGenerationError(
            f"scene {index}: could not place {count} instances within max_overlap={spec.max_overlap} "
            f"after {spec.max_restarts + 1} layouts of {spec.max_attempts} attempts per instance")
    return Scene(index, _render(spec, instances, rng), instances)


def _place(spec: SceneSpec, count: int, rng: SplitMix64):
    """Rejection-sample ``count`` ellipses; None if one cannot be placed."""
    h, w = spec.height, spec.width
    margin = spec.max_axis + 1.0
    instances = []
    for k in range(count):
        for _ in range(spec.max_attempts):
            a, b = rng.uniform(2, spec.min_axis, spec.max_axis)
            theta = float(rng.uniform(1, 0.0, math.pi)[0])
            cx = float(rng.uniform(1, margin, w - margin)[0])
            cy = float(rng.uniform(1, margin, h - margin)[0])
            ann = rasterize_instance(cx, cy, float(a), float(b), theta, h, w, inst_id=k)
            if ann.empty:
                continue
            if all(overlap_fraction(ann.mask, o.mask) <= spec.max_overlap for o in instances):
                instances.append(ann)
                break
        else:
            return None
    return instances


def _render(spec: SceneSpec, instances, rng: SplitMix64) -> np.ndarray:
    h, w = spec.height, spec.width
    img = np.full((h, w), float(rng.uniform(1, 30.0, 70.0)[0]))
    for ann in instances:
        level = float(rng.uniform(1, 110.0, 230.0)[0])
        alpha = ann.mask.astype(np.float64)
        if spec.blur_sigma > 0:
            alpha = gaussian_filter(alpha, spec.blur_sigma, mode="constant")
        img = img * (1.0 - alpha) + level * alpha
    img = img + spec.noise * rng.normal(h * w).reshape(h, w)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate_dataset(spec: SceneSpec, count: int) -> list:
    return [generate_scene(spec, i) for i in range(count)]
