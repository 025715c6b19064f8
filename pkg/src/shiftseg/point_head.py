"""Box-driven RoI features, coarse masks and uncertainty-guided point refinement.

Boxes are (x0, y0, x1, y1) in image-normalised coordinates.  Point sets in
this module live in the RoI frame: (0, 0) is the box's top-left corner and
(1, 1) its bottom-right.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    ShapeError,
    bilinear_sample,
    bilinear_sample_backward,
    channel_project,
    channel_project_backward,
    gelu,
    gelu_backward,
    init_linear,
    linear,
    linear_backward,
    sigmoid,
)


@dataclass(frozen=True)
class RoI:
    box: tuple
    level: int = 0

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate box {self.box}")


def assign_level(box, n_levels: int, level0: int = 3) -> int:
    """floor(level0 + log2(sqrt(area))) with area in normalised units, clamped."""
    x0, y0, x1, y1 = box
    area = max((x1 - x0) * (y1 - y0), 1e-12)
    return int(min(max(math.floor(level0 + math.log2(math.sqrt(area))), 0), n_levels - 1))


def roi_to_image(pts: np.ndarray, box) -> np.ndarray:
    x0, y0, x1, y1 = box
    pts = np.asarray(pts, dtype=np.float64)
    return np.stack([x0 + pts[:, 0] * (x1 - x0), y0 + pts[:, 1] * (y1 - y0)], axis=1)


def image_to_roi(pts: np.ndarray, box) -> np.ndarray:
    x0, y0, x1, y1 = box
    pts = np.asarray(pts, dtype=np.float64)
    return np.stack([(pts[:, 0] - x0) / (x1 - x0), (pts[:, 1] - y0) / (y1 - y0)], axis=1)


def grid_centers(m: int) -> np.ndarray:
    """Row-major (x, y) centres of an m x m grid on the unit square."""
    c = (np.arange(m) + 0.5) / m
    yy, xx = np.meshgrid(c, c, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


# ---------------------------------------------------------------------------
# RoI extraction
# ---------------------------------------------------------------------------

def roi_extract(feat: np.ndarray, box, out_res: int, batch: int = 0) -> np.ndarray:
    """Bilinear resample of ``feat[batch]`` on an out_res x out_res grid inside ``box``."""
    RoI(tuple(box))
    pts = roi_to_image(grid_centers(out_res), box)
    vals = bilinear_sample(feat, pts, batch)
    return vals.T.reshape(1, feat.shape[1], out_res, out_res)


def roi_extract_backward(dout: np.ndarray, feat_shape, box, out_res: int, batch: int = 0):
    pts = roi_to_image(grid_centers(out_res), box)
    return bilinear_sample_backward(dout.reshape(feat_shape[1], -1).T, feat_shape, pts, batch)


def roi_extract_pyramid(pyr, roi: RoI, out_res: int, batch: int = 0) -> np.ndarray:
    return roi_extract(pyr[roi.level], roi.box, out_res, batch)


# ---------------------------------------------------------------------------
# Per-RoI heads
# ---------------------------------------------------------------------------

def init_coarse_head(rng, c: int, hidden: int = 64) -> dict:
    return {"fc1": init_linear(rng, c, hidden), "fc2": init_linear(rng, hidden, 1)}


def coarse_mask_head_forward(roi_feat: np.ndarray, p: dict):
    h = channel_project(roi_feat, p["fc1"])
    logits = channel_project(gelu(h), p["fc2"])[0, 0]
    return logits, h


def coarse_mask_head(roi_feat: np.ndarray, p: dict) -> np.ndarray:
    """Per-cell foreground logits (m, m)."""
    return coarse_mask_head_forward(roi_feat, p)[0]


def coarse_mask_head_backward(dlogits, roi_feat, h, p):
    dact, g2 = channel_project_backward(dlogits[None, None], gelu(h), p["fc2"])
    droi, g1 = channel_project_backward(gelu_backward(dact, h), roi_feat, p["fc1"])
    return droi, {"fc1": g1, "fc2": g2}


def init_box_cls_head(rng, c: int) -> dict:
    return {"fc": init_linear(rng, c, 2)}


def box_cls_head(roi_feat: np.ndarray, p: dict) -> np.ndarray:
    """Background/foreground logits (2,) from the mean-pooled RoI feature."""
    return linear(roi_feat.mean(axis=(2, 3)), p["fc"])[0]


def box_cls_head_backward(dlogits, roi_feat, p):
    pooled = roi_feat.mean(axis=(2, 3))
    dpooled, g = linear_backward(dlogits[None], pooled, p["fc"])
    r2 = roi_feat.shape[2] * roi_feat.shape[3]
    return np.broadcast_to(dpooled[:, :, None, None] / r2, roi_feat.shape).copy(), {"fc": g}


def contour_template(n: int) -> np.ndarray:
    """Ellipse inscribed in the RoI, n points by increasing angle from (1, 0.5)."""
    phi = 2.0 * np.pi * np.arange(n) / n
    return np.stack([0.5 + 0.5 * np.cos(phi), 0.5 + 0.5 * np.sin(phi)], axis=1)


def init_contour_head(c: int, res: int, n_points: int) -> dict:
    # zero init: predictions start on the inscribed template
    return {"fc": {"weight": np.zeros((c * res * res, 2 * n_points)), "bias": np.zeros(2 * n_points)}}


def contour_head(roi_feat: np.ndarray, p: dict) -> np.ndarray:
    """Boundary points (P, 2) in the RoI frame: template plus predicted offsets."""
    n_points = p["fc"]["bias"].size // 2
    offsets = linear(roi_feat.reshape(1, -1), p["fc"]).reshape(n_points, 2)
    return contour_template(n_points) + offsets


def contour_head_backward(dpts, roi_feat, p):
    dflat, g = linear_backward(dpts.reshape(1, -1), roi_feat.reshape(1, -1), p["fc"])
    return dflat.reshape(roi_feat.shape), {"fc": g}


# ---------------------------------------------------------------------------
# Point selection
# ---------------------------------------------------------------------------

def uncertainty(p):
    """-|p - 0.5|: larger means less certain."""
    return -np.abs(np.asarray(p, dtype=np.float64) - 0.5)


def _coarse_as_map(coarse_logits: np.ndarray) -> np.ndarray:
    return np.asarray(coarse_logits, dtype=np.float64)[None, None]


def select_points_train(coarse_logits: np.ndarray, n: int, k: float, beta_frac: float,
                        rng: np.random.Generator) -> np.ndarray:
    """Oversample k*n uniform points, keep the most uncertain ceil(beta_frac*n), refill uniformly."""
    if n < 1 or k < 1 or not 0 <= beta_frac <= 1:
        raise ValueError("need n >= 1, k >= 1 and beta_frac in [0, 1]")
    n_important = min(math.ceil(round(beta_frac * n, 9)), n)
    cand = rng.uniform(size=(int(math.ceil(k * n)), 2))
    probs = bilinear_sample(_coarse_as_map(sigmoid(coarse_logits)), cand)[:, 0]
    order = np.argsort(-uncertainty(probs), kind="stable")[:n_important]
    fresh = rng.uniform(size=(n - n_important, 2))
    return np.concatenate([cand[order], fresh], axis=0)


def select_cells_infer(coarse_logits: np.ndarray, n: int) -> np.ndarray:
    """Row-major indices of the n most uncertain cells, ties to the lower index."""
    m = coarse_logits.size
    if n > m:
        raise ValueError(f"cannot select {n} points from {m} cells")
    score = uncertainty(sigmoid(np.asarray(coarse_logits).ravel()))
    return np.argsort(-score, kind="stable")[:n]


def select_points_infer(coarse_logits: np.ndarray, n: int) -> np.ndarray:
    m = coarse_logits.shape[0]
    return grid_centers(m)[select_cells_infer(coarse_logits, n)]


# ---------------------------------------------------------------------------
# Point features and classifier
# ---------------------------------------------------------------------------

def point_features(feat: np.ndarray, coarse_logits: np.ndarray, pts: np.ndarray, box, batch: int = 0):
    """Fine features sampled in the image frame plus the coarse logit -> (P, c + 1)."""
    fine = bilinear_sample(feat, roi_to_image(pts, box), batch)
    coarse = bilinear_sample(_coarse_as_map(coarse_logits), pts)
    return np.concatenate([fine, coarse], axis=1)


def point_features_backward(dout, feat_shape, coarse_shape, pts, box, batch: int = 0):
    dfeat = bilinear_sample_backward(dout[:, :-1], feat_shape, roi_to_image(pts, box), batch)
    dcoarse = bilinear_sample_backward(dout[:, -1:], (1, 1) + tuple(coarse_shape), pts)[0, 0]
    return dfeat, dcoarse


def init_point_head(rng, in_dim: int, hidden: int = 64) -> dict:
    return {
        "fc1": init_linear(rng, in_dim, hidden),
        "fc2": init_linear(rng, hidden, hidden),
        "fc3": init_linear(rng, hidden, 1),
    }


def point_classify_forward(feats: np.ndarray, p: dict):
    if feats.ndim != 2 or feats.shape[1] != p["fc1"]["weight"].shape[0]:
        raise ShapeError(f"point features {feats.shape} vs classifier input {p['fc1']['weight'].shape[0]}")
    h1 = linear(feats, p["fc1"])
    h2 = linear(gelu(h1), p["fc2"])
    out = linear(gelu(h2), p["fc3"])[:, 0]
    return out, (feats, h1, h2)


def point_classify(feats: np.ndarray, p: dict) -> np.ndarray:
    """Shared three-layer MLP giving one foreground logit per point."""
    return point_classify_forward(feats, p)[0]


def point_classify_backward(dout, cache, p):
    feats, h1, h2 = cache
    da2, g3 = linear_backward(dout[:, None], gelu(h2), p["fc3"])
    da1, g2 = linear_backward(gelu_backward(da2, h2), gelu(h1), p["fc2"])
    dfeats, g1 = linear_backward(gelu_backward(da1, h1), feats, p["fc1"])
    return dfeats, {"fc1": g1, "fc2": g2, "fc3": g3}


# ---------------------------------------------------------------------------
# Ground-truth lookups
# ---------------------------------------------------------------------------

def mask_at(mask: np.ndarray, pts_image: np.ndarray) -> np.ndarray:
    """Occupancy of the pixel containing each image-normalised point."""
    h, w = mask.shape
    cols = np.clip(np.floor(pts_image[:, 0] * w).astype(np.int64), 0, w - 1)
    rows = np.clip(np.floor(pts_image[:, 1] * h).astype(np.int64), 0, h - 1)
    return mask[rows, cols].astype(np.float64)


def coarse_target(mask: np.ndarray, box, m: int) -> np.ndarray:
    return mask_at(mask, roi_to_image(grid_centers(m), box)).reshape(m, m)
