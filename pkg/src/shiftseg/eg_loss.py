"""Edge guidance loss terms, boundary resampling and nearest-point matching.

Point sets are ``(N, 2)`` arrays of (x, y).  Every differentiable term has a
``*_with_grad`` variant returning ``(loss, gradient)``; the plain function
returns only the value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    ShapeError,
    binary_cross_entropy_with_logits,
    softmax_cross_entropy_with_grad,
)


class DegeneratePolygonError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.5
    beta: float = 1.0
    smooth_l1_delta: float = 1.0
    gt_resample_count: int = 32

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")
        if self.gt_resample_count < 3:
            raise ValueError("need at least 3 resampled boundary points")
        if self.smooth_l1_delta <= 0:
            raise ValueError("smooth-L1 delta must be positive")


@dataclass(frozen=True)
class LossBreakdown:
    l_cls_b: float
    l_ploc_b: float
    l_coarse_m: float
    l_pmat_m: float
    total: float

    def as_dict(self) -> dict:
        return {
            "l_cls_b": self.l_cls_b,
            "l_ploc_b": self.l_ploc_b,
            "l_coarse_m": self.l_coarse_m,
            "l_pmat_m": self.l_pmat_m,
            "total": self.total,
        }


# ---------------------------------------------------------------------------
# Classification terms
# ---------------------------------------------------------------------------

def loss_cls_box(logits, labels) -> float:
    """Softmax cross-entropy with foreground (1) / background (0) labels."""
    return softmax_cross_entropy_with_grad(logits, labels)[0]


def loss_cls_box_with_grad(logits, labels):
    return softmax_cross_entropy_with_grad(logits, labels)


def loss_coarse_with_grad(coarse_logits, gt_grid):
    """Mean per-cell logistic cross-entropy against a {0, 1} occupancy grid."""
    coarse_logits = np.asarray(coarse_logits, dtype=np.float64)
    gt_grid = np.asarray(gt_grid, dtype=np.float64)
    if coarse_logits.shape != gt_grid.shape:
        raise ShapeError(f"coarse grid {coarse_logits.shape} vs target {gt_grid.shape}")
    return binary_cross_entropy_with_logits(coarse_logits, gt_grid)


def loss_coarse(coarse_logits, gt_grid) -> float:
    return loss_coarse_with_grad(coarse_logits, gt_grid)[0]


# ---------------------------------------------------------------------------
# Point localisation (sorted pairing)
# ---------------------------------------------------------------------------

def lexsort_points(pts: np.ndarray) -> np.ndarray:
    """Order indices by x, then y."""
    return np.lexsort((pts[:, 1], pts[:, 0]))


def loss_ploc_with_grad(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 2 or len(pred) == 0:
        raise ShapeError(f"point sets must both be (n, 2) with n >= 1, got {pred.shape} and {gt.shape}")
    pi = lexsort_points(pred)
    gi = lexsort_points(gt)
    diff = pred[pi] - gt[gi]
    dist = np.sqrt((diff**2).sum(axis=1))
    n = len(pred)
    safe = np.where(dist > 0, dist, 1.0)
    grad = np.zeros_like(pred)
    grad[pi] = np.where(dist[:, None] > 0, diff / safe[:, None], 0.0) / n
    return float(dist.mean()), grad


def loss_ploc(pred, gt) -> float:
    """Mean Euclidean distance between index-paired points after sorting both sets."""
    return loss_ploc_with_grad(pred, gt)[0]


# ---------------------------------------------------------------------------
# Boundary resampling and matching
# ---------------------------------------------------------------------------

def resample_boundary(polygon, m: int) -> np.ndarray:
    """``m`` points evenly spaced by arc length around the closed polygon.

    Starts at vertex 0.  A repeated closing vertex is ignored.
    """
    poly = np.asarray(polygon, dtype=np.float64)
    if len(poly) > 1 and np.array_equal(poly[0], poly[-1]):
        poly = poly[:-1]
    if len(poly) < 3:
        raise DegeneratePolygonError(f"polygon needs at least 3 vertices, got {len(poly)}")
    if m < 1:
        raise ValueError("resample count must be positive")
    closed = np.vstack([poly, poly[:1]])
    seg = np.sqrt((np.diff(closed, axis=0) ** 2).sum(axis=1))
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    perimeter = cum[-1]
    if perimeter <= 0:
        raise DegeneratePolygonError("polygon has zero perimeter")
    targets = np.arange(m) * (perimeter / m)
    k = np.clip(np.searchsorted(cum, targets, side="right") - 1, 0, len(seg) - 1)
    t = np.where(seg[k] > 0, (targets - cum[k]) / np.where(seg[k] > 0, seg[k], 1.0), 0.0)
    return closed[k] + t[:, None] * (closed[k + 1] - closed[k])


def nearest_match(pred_in, gt_ipt) -> np.ndarray:
    """Index of the Euclidean-nearest target for each predicted point (lowest index on ties)."""
    pred_in = np.asarray(pred_in, dtype=np.float64).reshape(-1, 2)
    gt_ipt = np.asarray(gt_ipt, dtype=np.float64).reshape(-1, 2)
    if len(gt_ipt) == 0 or len(pred_in) == 0:
        raise ShapeError("nearest_match needs non-empty point sets")
    dx = pred_in[:, None, 0] - gt_ipt[None, :, 0]
    dy = pred_in[:, None, 1] - gt_ipt[None, :, 1]
    return np.argmin(np.sqrt(dx * dx + dy * dy), axis=1)


# ---------------------------------------------------------------------------
# Point guidance
# ---------------------------------------------------------------------------

def smooth_l1(d, delta: float = 1.0):
    d = np.asarray(d, dtype=np.float64)
    ad = np.abs(d)
    out = np.where(ad < delta, 0.5 * d * d / delta, ad - 0.5 * delta)
    return float(out) if out.ndim == 0 else out


def smooth_l1_grad(d, delta: float = 1.0):
    d = np.asarray(d, dtype=np.float64)
    return np.where(np.abs(d) < delta, d / delta, np.sign(d))


def loss_pg_with_grad(pred_out, gt_ipt, match, delta: float = 1.0):
    pred_out = np.asarray(pred_out, dtype=np.float64).reshape(-1, 2)
    match = np.asarray(match, dtype=np.int64)
    if len(pred_out) == 0:
        return 0.0, np.zeros_like(pred_out)
    if match.shape != (len(pred_out),):
        raise ShapeError("need one match index per predicted point")
    diff = pred_out - np.asarray(gt_ipt, dtype=np.float64)[match]
    n = len(pred_out)
    return float(smooth_l1(diff, delta).sum() / n), smooth_l1_grad(diff, delta) / n


def loss_pg(pred_out, gt_ipt, match, delta: float = 1.0) -> float:
    """Mean over points of smooth-L1(dx) + smooth-L1(dy) to the matched target."""
    return loss_pg_with_grad(pred_out, gt_ipt, match, delta)[0]


def loss_pmat(l_pcls: float, l_pg: float) -> float:
    return 0.5 * (l_pcls + l_pg)


def loss_total(l_cls_b, l_ploc_b, l_coarse_m, l_pmat_m, cfg: LossConfig = LossConfig()) -> LossBreakdown:
    parts = (l_cls_b, l_ploc_b, l_coarse_m, l_pmat_m)
    if not all(np.isfinite(parts)):
        raise ValueError(f"non-finite loss component in {parts}")
    total = l_cls_b + cfg.alpha * l_ploc_b + cfg.beta * l_coarse_m + l_pmat_m
    return LossBreakdown(float(l_cls_b), float(l_ploc_b), float(l_coarse_m), float(l_pmat_m), float(total))


def loss_total_grad(cfg: LossConfig = LossConfig()) -> dict:
    """Partial derivatives of the total with respect to each component."""
    return {"l_cls_b": 1.0, "l_ploc_b": cfg.alpha, "l_coarse_m": cfg.beta, "l_pmat_m": 1.0}
