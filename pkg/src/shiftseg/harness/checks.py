"""Finite-difference gradient checks for every differentiable operation.

Each check builds a small random instance, reduces the operation output to
a scalar with a fixed random cotangent, and compares the hand-written
gradient against central differences at random probe entries.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .. import eg_loss
from ..gradcheck import GradCheckReport, check_gradients
from ..point_head import (
    coarse_mask_head_backward,
    coarse_mask_head_forward,
    contour_head,
    contour_head_backward,
    init_coarse_head,
    init_point_head,
    point_classify_backward,
    point_classify_forward,
    point_features,
    point_features_backward,
    roi_extract,
    roi_extract_backward,
)
from ..shift_mlp import (
    BackboneConfig,
    backbone_backward,
    backbone_forward,
    init_backbone,
    init_stone_block,
    stone_block_backward,
    stone_block_forward,
)
from ..sparse_fpn import FpnConfig, fpn_backward, fpn_forward, init_fpn, init_sparse_mlp, sparse_mlp_backward, sparse_mlp_forward
from ..tensor import init_linear, layer_norm, layer_norm_backward
from .tree import flatten

PROBES = 10
REL_TOL = 1e-5


def _randomise(tree, rng, scale=0.5):
    """Replace every leaf with random values so no gradient path is trivially zero."""
    for v in flatten(tree).values():
        v[...] = rng.uniform(-scale, scale, size=v.shape)
    return tree


def _named(prefix, tree):
    return {f"{prefix}.{k}": v for k, v in flatten(tree).items()}


def check_layer_norm(rng, probes=PROBES):
    x = rng.standard_normal((2, 6, 3, 3))
    gamma, beta = rng.standard_normal(6), rng.standard_normal(6)
    cot = rng.standard_normal(x.shape)
    dx, g = layer_norm_backward(cot, x, gamma, beta)
    arrays = {"x": x, "gamma": gamma, "beta": beta}
    grads = {"x": dx, "gamma": g["gamma"], "beta": g["beta"]}
    return check_gradients(lambda: float((layer_norm(x, gamma, beta) * cot).sum()), arrays, grads, rng, probes)


def check_stone_block(rng, probes=PROBES):
    c = 6
    p = _randomise(init_stone_block(rng, c, mlp_ratio=2), rng)
    x = rng.standard_normal((2, c, 4, 5))
    cot = rng.standard_normal(x.shape)
    out, cache = stone_block_forward(x, p)
    dx, g = stone_block_backward(cot, cache, p)
    arrays = {"x": x, **_named("p", p)}
    grads = {"x": dx, **_named("p", g)}
    return check_gradients(lambda: float((stone_block_forward(x, p)[0] * cot).sum()), arrays, grads, rng, probes)


def check_backbone(rng, probes=PROBES):
    cfg = BackboneConfig(patch_size=2, widths=(6, 9), depths=(1, 1))
    p = _randomise(init_backbone(rng, cfg), rng, 0.3)
    img = rng.standard_normal((1, 3, 8, 8))
    outs, cache = backbone_forward(img, cfg, p)
    cots = [rng.standard_normal(o.shape) for o in outs]
    dimg, g = backbone_backward(cots, cache, cfg, p)

    def f():
        return float(sum((o * c).sum() for o, c in zip(backbone_forward(img, cfg, p)[0], cots)))

    return check_gradients(f, {"img": img, **_named("p", p)}, {"img": dimg, **_named("p", g)}, rng, probes)


def check_sparse_mlp_block(rng, probes=PROBES):
    c, h, w = 3, 4, 5
    p = _randomise(init_sparse_mlp(rng, c, h, w), rng)
    x = rng.standard_normal((2, c, h, w))
    cot = rng.standard_normal(x.shape)
    _, cat = sparse_mlp_forward(x, p)
    dx, g = sparse_mlp_backward(cot, x, cat, p)
    return check_gradients(lambda: float((sparse_mlp_forward(x, p)[0] * cot).sum()),
                           {"x": x, **_named("p", p)}, {"x": dx, **_named("p", g)}, rng, probes)


def check_fpn(rng, probes=PROBES):
    cfg = FpnConfig(out_channels=4)
    shapes = [(5, 8, 8), (6, 4, 4), (7, 2, 2)]
    p = _randomise(init_fpn(rng, shapes, cfg), rng)
    stages = [rng.standard_normal((1, c, h, w)) for c, h, w in shapes]
    pyr, cache = fpn_forward(stages, cfg, p)
    cots = [rng.standard_normal(o.shape) for o in pyr]
    dstages, g = fpn_backward(cots, cache, p)

    def f():
        return float(sum((o * c).sum() for o, c in zip(fpn_forward(stages, cfg, p)[0], cots)))

    arrays = {**{f"stage{k}": s for k, s in enumerate(stages)}, **_named("p", p)}
    grads = {**{f"stage{k}": d for k, d in enumerate(dstages)}, **_named("p", g)}
    return check_gradients(f, arrays, grads, rng, probes)


def check_roi_extract(rng, probes=PROBES):
    feat = rng.standard_normal((2, 3, 6, 6))
    box = (0.1, 0.2, 0.7, 0.9)
    cot = rng.standard_normal((1, 3, 4, 4))
    dfeat = roi_extract_backward(cot, feat.shape, box, 4, batch=1)
    return check_gradients(lambda: float((roi_extract(feat, box, 4, batch=1) * cot).sum()),
                           {"feat": feat}, {"feat": dfeat}, rng, probes)


def check_coarse_mask_head(rng, probes=PROBES):
    roi = rng.standard_normal((1, 6, 5, 5))
    p = _randomise(init_coarse_head(rng, 6, 8), rng)
    cot = rng.standard_normal((5, 5))
    _, h = coarse_mask_head_forward(roi, p)
    droi, g = coarse_mask_head_backward(cot, roi, h, p)
    return check_gradients(lambda: float((coarse_mask_head_forward(roi, p)[0] * cot).sum()),
                           {"roi": roi, **_named("p", p)}, {"roi": droi, **_named("p", g)}, rng, probes)


def check_contour_head(rng, probes=PROBES):
    roi = rng.standard_normal((1, 3, 4, 4))
    p = {"fc": init_linear(rng, 48, 10)}
    cot = rng.standard_normal((5, 2))
    droi, g = contour_head_backward(cot, roi, p)
    return check_gradients(lambda: float((contour_head(roi, p) * cot).sum()),
                           {"roi": roi, **_named("p", p)}, {"roi": droi, **_named("p", g)}, rng, probes)


def check_point_features(rng, probes=PROBES):
    feat = rng.standard_normal((1, 4, 6, 6))
    coarse = rng.standard_normal((5, 5))
    pts = rng.uniform(size=(12, 2))
    box = (0.15, 0.1, 0.8, 0.75)
    cot = rng.standard_normal((12, 5))
    dfeat, dcoarse = point_features_backward(cot, feat.shape, coarse.shape, pts, box)
    return check_gradients(lambda: float((point_features(feat, coarse, pts, box) * cot).sum()),
                           {"feat": feat, "coarse": coarse}, {"feat": dfeat, "coarse": dcoarse}, rng, probes)


def check_point_classify(rng, probes=PROBES):
    feats = rng.standard_normal((9, 5))
    p = _randomise(init_point_head(rng, 5, 7), rng)
    cot = rng.standard_normal(9)
    _, cache = point_classify_forward(feats, p)
    dfeats, g = point_classify_backward(cot, cache, p)
    return check_gradients(lambda: float((point_classify_forward(feats, p)[0] * cot).sum()),
                           {"feats": feats, **_named("p", p)}, {"feats": dfeats, **_named("p", g)}, rng, probes)


def check_loss_coarse(rng, probes=PROBES):
    logits = rng.standard_normal((7, 7)) * 2
    target = (rng.uniform(size=(7, 7)) > 0.5).astype(float)
    _, d = eg_loss.loss_coarse_with_grad(logits, target)
    return check_gradients(lambda: eg_loss.loss_coarse(logits, target), {"logits": logits}, {"logits": d}, rng, probes)


def _well_separated(rng, n, min_gap=1e-3):
    """Points whose x coordinates differ by more than ``min_gap`` (no sort-order flips under h)."""
    while True:
        pts = rng.uniform(size=(n, 2))
        xs = np.sort(pts[:, 0])
        if np.min(np.diff(xs)) > min_gap:
            return pts


def check_loss_ploc(rng, probes=PROBES):
    pred = _well_separated(rng, 16)
    gt = _well_separated(rng, 16)
    _, d = eg_loss.loss_ploc_with_grad(pred, gt)
    return check_gradients(lambda: eg_loss.loss_ploc(pred, gt), {"pred": pred}, {"pred": d}, rng, probes)


def _pg_instance(rng, delta):
    """Prediction/target pair with residuals away from the smooth-L1 kink and match boundaries."""
    gt = eg_loss.resample_boundary(rng.uniform(size=(6, 2)) * 3, 32)
    while True:
        pred = rng.uniform(-1, 4, size=(12, 2))
        match = eg_loss.nearest_match(pred, gt)
        d = np.abs(pred - gt[match]) / delta
        dist = np.sqrt(((pred[:, None] - gt[None]) ** 2).sum(-1))
        part = np.sort(dist, axis=1)
        if np.all((d < 0.99) | (d > 1.01)) and np.all(part[:, 1] - part[:, 0] > 1e-3):
            return pred, gt, match


def check_loss_pg(rng, probes=PROBES):
    delta = 1.0
    pred, gt, match = _pg_instance(rng, delta)
    _, d = eg_loss.loss_pg_with_grad(pred, gt, match, delta)

    def f():
        # matching is recomputed on the detached prediction each evaluation
        return eg_loss.loss_pg(pred, gt, eg_loss.nearest_match(pred.copy(), gt), delta)

    return check_gradients(f, {"pred": pred}, {"pred": d}, rng, probes)


def check_loss_total(rng, probes=PROBES):
    parts = rng.uniform(0, 3, size=4)
    cfg = eg_loss.LossConfig(alpha=float(rng.uniform(0, 2)), beta=float(rng.uniform(0, 3)))
    w = eg_loss.loss_total_grad(cfg)
    grad = np.array([w["l_cls_b"], w["l_ploc_b"], w["l_coarse_m"], w["l_pmat_m"]])
    return check_gradients(lambda: eg_loss.loss_total(*parts, cfg).total, {"parts": parts}, {"parts": grad}, rng, probes)


def check_full_model(rng, probes=PROBES):
    """End-to-end: every parameter of a tiny model against the total loss."""
    from ..synth.scene import SceneSpec, generate_scene
    from .config import ModelConfig
    from .model import forward_backward, init_model

    cfg = ModelConfig(backbone=BackboneConfig(widths=(6, 12), depths=(1, 1)), fpn=FpnConfig(out_channels=6),
                      image_size=32, roi_res=4, coarse_hidden=5, point_hidden=5, train_points=8,
                      infer_points=4, contour_points=8, level0=2, negatives_per_image=1)
    loss_cfg = eg_loss.LossConfig(gt_resample_count=8)
    scene = generate_scene(SceneSpec(height=32, width=32, min_instances=2, max_instances=2,
                                     min_axis=4, max_axis=7, seed=int(rng.integers(1 << 30))), 0)
    params = init_model(cfg, int(rng.integers(1 << 30)))
    _randomise(params["head"]["contour"], rng, 0.05)
    _, grads = forward_backward(params, cfg, [scene], loss_cfg)
    return check_gradients(lambda: forward_backward(params, cfg, [scene], loss_cfg, with_grad=False)[0].total,
                           flatten(params), flatten(grads), rng, probes)


# names from the acceptance list first, then supporting operations
CHECKS: dict[str, Callable[[np.random.Generator, int], GradCheckReport]] = {
    "stone_block": check_stone_block,
    "sparse_mlp_block": check_sparse_mlp_block,
    "fpn_forward": check_fpn,
    "coarse_mask_head": check_coarse_mask_head,
    "point_classify": check_point_classify,
    "loss_coarse": check_loss_coarse,
    "loss_ploc": check_loss_ploc,
    "loss_pg": check_loss_pg,
    "loss_total": check_loss_total,
    "layer_norm": check_layer_norm,
    "backbone_forward": check_backbone,
    "roi_extract": check_roi_extract,
    "contour_head": check_contour_head,
    "point_features": check_point_features,
    "full_model": check_full_model,
}


def run_all(seed: int = 0, probes: int = PROBES, names=None) -> dict:
    out = {}
    for name, fn in CHECKS.items():
        if names is None or name in names:
            out[name] = fn(np.random.default_rng([seed, len(name)]), probes)
    return out
