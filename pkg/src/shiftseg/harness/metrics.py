"""IoU and single-class AP at IoU 0.5 for boxes and masks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

IOU_THRESHOLD = 0.5


def _is_box(a) -> bool:
    arr = np.asarray(a)
    return arr.ndim == 1 and arr.shape[0] == 4


def box_iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = map(float, a)
    bx0, by0, bx1, by1 = map(float, b)
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


def iou(a, b) -> float:
    """|a & b| / |a | b| for two boxes (x0, y0, x1, y1) or two 2-D masks; empty union gives 0."""
    if _is_box(a) and _is_box(b):
        return box_iou(a, b)
    if np.asarray(a).ndim == 2 and np.asarray(b).ndim == 2:
        return mask_iou(np.asarray(a, dtype=bool), np.asarray(b, dtype=bool))
    raise TypeError("iou needs two boxes or two masks")


@dataclass
class EvalResult:
    ap50_box: float
    ap50_mask: float
    curves: dict = field(default_factory=dict)        # kind -> (precision, recall)
    per_scene_iou: list = field(default_factory=list)  # mask IoU of each prediction with its best GT

    def to_text(self) -> str:
        lines = [f"ap50_box = {self.ap50_box:.6f}", f"ap50_mask = {self.ap50_mask:.6f}"]
        for kind, (prec, rec) in self.curves.items():
            lines.append(f"{kind}.precision = " + ", ".join(f"{v:.4f}" for v in prec))
            lines.append(f"{kind}.recall = " + ", ".join(f"{v:.4f}" for v in rec))
        for i, ious in enumerate(self.per_scene_iou):
            lines.append(f"scene.{i}.mask_iou = " + ", ".join(f"{v:.4f}" for v in ious))
        return "\n".join(lines)


def average_precision(predictions, ground_truth, kind: str, threshold: float = IOU_THRESHOLD):
    """All-point interpolated AP plus the raw (precision, recall) curve.

    ``predictions[s]`` holds objects with ``box``, ``mask`` and ``score`` for
    scene s; ``ground_truth[s]`` holds objects with ``box`` and ``mask``.
    No ground truth and no predictions scores 1.0 by convention.
    """
    attr = "box" if kind == "box" else "mask"
    n_gt = sum(len(g) for g in ground_truth)
    order = sorted(
        ((p.score, s, k) for s, preds in enumerate(predictions) for k, p in enumerate(preds)),
        key=lambda t: -t[0],
    )
    if n_gt == 0:
        return (1.0 if not order else 0.0), (np.zeros(0), np.zeros(0))
    matched = [np.zeros(len(g), dtype=bool) for g in ground_truth]
    tp = np.zeros(len(order))
    for i, (_, s, k) in enumerate(order):
        pred = getattr(predictions[s][k], attr)
        best, best_j = threshold, -1
        for j, gt in enumerate(ground_truth[s]):
            if matched[s][j]:
                continue
            v = iou(pred, getattr(gt, attr))
            if v >= best and (best_j < 0 or v > best):
                best, best_j = v, j
        if best_j >= 0:
            matched[s][best_j] = True
            tp[i] = 1.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(order) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    ap = float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))
    return ap, (precision, recall)


def eval_ap50(predictions, ground_truth) -> EvalResult:
    ap_box, curve_box = average_precision(predictions, ground_truth, "box")
    ap_mask, curve_mask = average_precision(predictions, ground_truth, "mask")
    per_scene = [
        [max((mask_iou(p.mask, g.mask) for g in gts), default=0.0) for p in preds]
        for preds, gts in zip(predictions, ground_truth)
    ]
    return EvalResult(ap_box, ap_mask, {"box": curve_box, "mask": curve_mask}, per_scene)
