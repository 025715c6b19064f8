"""Full instance-segmentation model wired for ground-truth boxes.

backbone -> feature pyramid -> per-box heads (box classifier, coarse mask,
contour points, point refinement), with the complete backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import eg_loss
from ..eg_loss import LossConfig
from ..point_head import (
    assign_level,
    box_cls_head,
    box_cls_head_backward,
    coarse_mask_head_forward,
    coarse_mask_head_backward,
    coarse_target,
    contour_head,
    contour_head_backward,
    grid_centers,
    image_to_roi,
    init_box_cls_head,
    init_coarse_head,
    init_contour_head,
    init_point_head,
    mask_at,
    point_classify,
    point_classify_backward,
    point_classify_forward,
    point_features,
    point_features_backward,
    roi_extract,
    roi_extract_backward,
    roi_to_image,
    select_cells_infer,
    select_points_train,
)
from ..shift_mlp import backbone_backward, backbone_forward, init_backbone
from ..sparse_fpn import fpn_backward, fpn_forward, init_fpn
from ..synth.scene import Scene, mask_box
from ..tensor import bilinear_sample, binary_cross_entropy_with_logits, sigmoid, softmax_cross_entropy_with_grad
from .config import ModelConfig
from .metrics import box_iou
from .tree import accumulate, zeros_like


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value: float):
        super().__init__(f"loss term {term} became non-finite ({value})")
        self.term = term


@dataclass
class Detection:
    box: tuple            # pixel bounds (x0, y0, x1, y1), exclusive ends
    mask: np.ndarray      # bool (h, w)
    score: float


def stage_shapes(cfg: ModelConfig):
    bb = cfg.backbone
    side = cfg.image_size // bb.patch_size
    return [(w, side // bb.downsample**k, side // bb.downsample**k) for k, w in enumerate(bb.widths)]


def init_model(cfg: ModelConfig, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    oc = cfg.fpn.out_channels
    return {
        "backbone": init_backbone(rng, cfg.backbone),
        "fpn": init_fpn(rng, stage_shapes(cfg), cfg.fpn),
        "head": {
            "cls": init_box_cls_head(rng, oc),
            "coarse": init_coarse_head(rng, oc, cfg.coarse_hidden),
            "contour": init_contour_head(oc, cfg.roi_res, cfg.contour_points),
            "point": init_point_head(rng, oc + 1, cfg.point_hidden),
        },
    }


def images_tensor(scenes) -> np.ndarray:
    return np.concatenate([s.image_tensor() for s in scenes], axis=0)


def pyramid_forward(params, cfg: ModelConfig, images):
    stages, bcache = backbone_forward(images, cfg.backbone, params["backbone"])
    pyr, fcache = fpn_forward(stages, cfg.fpn, params["fpn"])
    return pyr, (bcache, fcache)


def pyramid_backward(dpyr, caches, params, cfg: ModelConfig):
    bcache, fcache = caches
    dstages, g_fpn = fpn_backward(dpyr, fcache, params["fpn"])
    _, g_bb = backbone_backward(dstages, bcache, cfg.backbone, params["backbone"])
    return {"backbone": g_bb, "fpn": g_fpn}


def gt_boundary(ann, box, m: int):
    """Ground-truth polygon resampled to m points in the RoI frame, or None if degenerate."""
    if len(ann.polygon) < 3:
        return None
    roi_poly = np.clip(image_to_roi(ann.polygon, box), 0.0, 1.0)
    try:
        return eg_loss.resample_boundary(roi_poly, m)
    except eg_loss.DegeneratePolygonError:
        return None


def sample_negative_boxes(gt_boxes, count: int, rng: np.random.Generator, max_iou: float = 0.3):
    out = []
    for _ in range(20 * count):
        if len(out) == count:
            break
        sw, sh = rng.uniform(0.1, 0.4, size=2)
        x0, y0 = rng.uniform(0, 1 - sw), rng.uniform(0, 1 - sh)
        box = (x0, y0, x0 + sw, y0 + sh)
        if all(box_iou(box, g) < max_iou for g in gt_boxes):
            out.append(box)
    return out


def forward_backward(params, cfg: ModelConfig, scenes, loss_cfg: LossConfig, seed: int = 0,
                     step: int = 0, with_grad: bool = True):
    """Edge-guidance loss over a batch of scenes; returns (LossBreakdown, grads | None)."""
    images = images_tensor(scenes)
    pyr, caches = pyramid_forward(params, cfg, images)
    hp = params["head"]
    n_levels = len(pyr)
    r = cfg.roi_res

    records, cls_logits, cls_labels, cls_src = [], [], [], []
    for b, scene in enumerate(scenes):
        anns = [a for a in scene.instances if not a.empty]
        gt_boxes = [tuple(a.box_normalized()) for a in anns]
        for i, ann in enumerate(anns):
            rng = np.random.default_rng([seed, step, b, i])
            box = gt_boxes[i]
            level = assign_level(box, n_levels, cfg.level0)
            feat = pyr[level]
            roi = roi_extract(feat, box, r, b)
            coarse, coarse_h = coarse_mask_head_forward(roi, hp["coarse"])
            contour = contour_head(roi, hp["contour"])
            pts = select_points_train(coarse, cfg.train_points, cfg.oversample, cfg.importance_frac, rng)
            pf = point_features(feat, coarse, pts, box, b)
            plog, pcache = point_classify_forward(pf, hp["point"])
            rec = dict(b=b, box=box, level=level, roi=roi, coarse=coarse, coarse_h=coarse_h,
                       contour=contour, pts=pts, pcache=pcache)
            rec["l_coarse"], rec["d_coarse"] = eg_loss.loss_coarse_with_grad(coarse, coarse_target(ann.mask, box, r))
            rec["l_pcls"], rec["d_plog"] = binary_cross_entropy_with_logits(
                plog, mask_at(ann.mask, roi_to_image(pts, box)))
            gt_ipt = gt_boundary(ann, box, loss_cfg.gt_resample_count)
            rec["valid"] = gt_ipt is not None and len(contour) == len(gt_ipt)
            if rec["valid"]:
                rec["l_ploc"], rec["d_ploc"] = eg_loss.loss_ploc_with_grad(contour, gt_ipt)
                match = eg_loss.nearest_match(contour.copy(), gt_ipt)
                rec["l_pg"], rec["d_pg"] = eg_loss.loss_pg_with_grad(contour, gt_ipt, match, loss_cfg.smooth_l1_delta)
            records.append(rec)
            cls_logits.append(box_cls_head(roi, hp["cls"]))
            cls_labels.append(1)
            cls_src.append((b, box, level, roi, len(records) - 1))
        neg_rng = np.random.default_rng([seed, step, b, 1_000_003])
        for box in sample_negative_boxes(gt_boxes, cfg.negatives_per_image, neg_rng):
            level = assign_level(box, n_levels, cfg.level0)
            roi = roi_extract(pyr[level], box, r, b)
            cls_logits.append(box_cls_head(roi, hp["cls"]))
            cls_labels.append(0)
            cls_src.append((b, box, level, roi, None))

    n_inst = len(records)
    valid = [rec for rec in records if rec["valid"]]
    l_cls, d_cls = softmax_cross_entropy_with_grad(np.array(cls_logits).reshape(-1, 2), np.array(cls_labels))
    l_coarse = float(np.mean([rec["l_coarse"] for rec in records])) if records else 0.0
    l_pcls = float(np.mean([rec["l_pcls"] for rec in records])) if records else 0.0
    l_ploc = float(np.mean([rec["l_ploc"] for rec in valid])) if valid else 0.0
    l_pg = float(np.mean([rec["l_pg"] for rec in valid])) if valid else 0.0
    l_pmat = eg_loss.loss_pmat(l_pcls, l_pg)
    for name, value in (("l_cls_b", l_cls), ("l_ploc_b", l_ploc), ("l_coarse_m", l_coarse), ("l_pmat_m", l_pmat)):
        if not np.isfinite(value):
            raise NonFiniteLossError(name, value)
    breakdown = eg_loss.loss_total(l_cls, l_ploc, l_coarse, l_pmat, loss_cfg)
    if not with_grad:
        return breakdown, None

    w = eg_loss.loss_total_grad(loss_cfg)
    w_coarse = w["l_coarse_m"] / n_inst if n_inst else 0.0
    w_pcls = w["l_pmat_m"] * 0.5 / n_inst if n_inst else 0.0
    w_ploc = w["l_ploc_b"] / len(valid) if valid else 0.0
    w_pg = w["l_pmat_m"] * 0.5 / len(valid) if valid else 0.0

    dpyr = [np.zeros_like(p) for p in pyr]
    g_head = zeros_like(hp)
    droi_extra = {}
    for k, (b, box, level, roi, rec_idx) in enumerate(cls_src):
        droi, g = box_cls_head_backward(w["l_cls_b"] * d_cls[k], roi, hp["cls"])
        accumulate(g_head, {"cls": g})
        if rec_idx is None:
            dpyr[level] += roi_extract_backward(droi, pyr[level].shape, box, r, b)
        else:
            droi_extra[rec_idx] = droi
    for idx, rec in enumerate(records):
        b, box, level, roi = rec["b"], rec["box"], rec["level"], rec["roi"]
        feat_shape = pyr[level].shape
        dpf, g_point = point_classify_backward(w_pcls * rec["d_plog"], rec["pcache"], hp["point"])
        dfeat, dcoarse_pf = point_features_backward(dpf, feat_shape, rec["coarse"].shape, rec["pts"], box, b)
        dcoarse = w_coarse * rec["d_coarse"] + dcoarse_pf
        droi, g_coarse = coarse_mask_head_backward(dcoarse, roi, rec["coarse_h"], hp["coarse"])
        dcontour = np.zeros_like(rec["contour"])
        if rec["valid"]:
            dcontour = w_ploc * rec["d_ploc"] + w_pg * rec["d_pg"]
        droi_c, g_contour = contour_head_backward(dcontour, roi, hp["contour"])
        droi = droi + droi_c + droi_extra.get(idx, 0.0)
        dpyr[level] += dfeat + roi_extract_backward(droi, feat_shape, box, r, b)
        accumulate(g_head, {"point": g_point, "coarse": g_coarse, "contour": g_contour})
    grads = pyramid_backward(dpyr, caches, params, cfg)
    grads["head"] = g_head
    return breakdown, grads


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def refine_instance(pyr, b: int, box, params, cfg: ModelConfig):
    """Coarse grid with its most uncertain cells replaced by point-head logits -> (m, m) probs."""
    hp = params["head"]
    level = assign_level(box, len(pyr), cfg.level0)
    feat = pyr[level]
    roi = roi_extract(feat, box, cfg.roi_res, b)
    coarse, _ = coarse_mask_head_forward(roi, hp["coarse"])
    m = coarse.shape[0]
    cells = select_cells_infer(coarse, min(cfg.infer_points, m * m))
    pts = grid_centers(m)[cells]
    refined = coarse.ravel().copy()
    refined[cells] = point_classify(point_features(feat, coarse, pts, box, b), hp["point"])
    return sigmoid(refined.reshape(m, m))


def render_mask(prob_grid: np.ndarray, box, height: int, width: int) -> np.ndarray:
    """Bilinear upsample of the RoI probability grid onto image pixels, thresholded at 0.5."""
    x0, y0, x1, y1 = box
    mask = np.zeros((height, width), dtype=bool)
    c0, c1 = int(np.floor(x0 * width)), int(np.ceil(x1 * width))
    r0, r1 = int(np.floor(y0 * height)), int(np.ceil(y1 * height))
    if c1 <= c0 or r1 <= r0:
        return mask
    ys, xs = np.mgrid[r0:r1, c0:c1]
    centers = np.stack([(xs.ravel() + 0.5) / width, (ys.ravel() + 0.5) / height], axis=1)
    inside = (centers[:, 0] >= x0) & (centers[:, 0] <= x1) & (centers[:, 1] >= y0) & (centers[:, 1] <= y1)
    probs = bilinear_sample(prob_grid[None, None], image_to_roi(centers, box))[:, 0]
    sub = (probs >= 0.5) & inside
    mask[ys.ravel()[sub], xs.ravel()[sub]] = True
    return mask


def predict_boxes(params, cfg: ModelConfig, image: np.ndarray, boxes) -> list:
    """Detections for the given normalised boxes on one (1, 3, h, w) image tensor."""
    pyr, _ = pyramid_forward(params, cfg, image)
    h, w = image.shape[2:]
    dets = []
    for box in boxes:
        probs = refine_instance(pyr, 0, box, params, cfg)
        mask = render_mask(probs, box, h, w)
        tight = mask_box(mask)
        if tight is None:
            continue
        rows, cols = np.nonzero(mask)
        pix = np.stack([(cols + 0.5) / w, (rows + 0.5) / h], axis=1)
        score = float(bilinear_sample(probs[None, None], image_to_roi(pix, box))[:, 0].mean())
        dets.append(Detection(tight, mask, score))
    return dets


def predict_scene(params, cfg: ModelConfig, scene: Scene) -> list:
    boxes = [tuple(a.box_normalized()) for a in scene.instances if not a.empty]
    return predict_boxes(params, cfg, scene.image_tensor(), boxes)
