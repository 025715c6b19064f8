"""SGD training loop, checkpoints and dataset evaluation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as config_mod
from .config import TrainConfig
from .metrics import EvalResult, eval_ap50
from .model import forward_backward, init_model, predict_scene
from .tree import flatten, load_flat, tree_map

log = logging.getLogger(__name__)

LOSS_KEYS = ("l_cls_b", "l_ploc_b", "l_coarse_m", "l_pmat_m", "total")


def sgd_step(params, grads, lr: float):
    """Return ``params - lr * grads`` leaf by leaf."""
    def step(p, g):
        if p.shape != g.shape:
            raise ValueError(f"parameter {p.shape} and gradient {g.shape} differ")
        return p - lr * g
    return tree_map(step, params, grads)


@dataclass
class TrainResult:
    params: dict
    trace: list = field(default_factory=list)


def train_loop(scenes, cfg: TrainConfig, progress=None) -> TrainResult:
    if not scenes:
        raise ValueError("training needs at least one scene")
    params = init_model(cfg.model, cfg.seed)
    trace = []
    for step in range(cfg.steps):
        batch = [scenes[(step * cfg.batch_size + j) % len(scenes)] for j in range(cfg.batch_size)]
        lr = cfg.lr_at(step)
        losses, grads = forward_backward(params, cfg.model, batch, cfg.loss, seed=cfg.seed, step=step)
        params = sgd_step(params, grads, lr)
        rec = {"step": step, "lr": lr, **losses.as_dict()}
        trace.append(rec)
        if progress is not None:
            progress(rec)
        log.debug("step %d lr %.2e total %.5f", step, lr, losses.total)
    return TrainResult(params, trace)


def evaluate(params, cfg: TrainConfig, scenes) -> EvalResult:
    preds = [predict_scene(params, cfg.model, s) for s in scenes]
    gts = [[a for a in s.instances if not a.empty] for s in scenes]
    return eval_ap50(preds, gts)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_checkpoint(path, params, cfg: TrainConfig) -> Path:
    path = Path(path)
    flat = {k: v for k, v in flatten(params).items()}
    flat["__config__"] = np.frombuffer(config_mod.dump(cfg).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **flat)
    return path


def load_checkpoint(path):
    with np.load(path) as data:
        cfg = config_mod.build(TrainConfig, config_mod.parse_kv(bytes(data["__config__"]).decode("utf-8")))
        params = init_model(cfg.model, cfg.seed)
        load_flat(params, {k: data[k] for k in data.files if k != "__config__"})
    return params, cfg


def write_trace(path, trace) -> None:
    with open(path, "w") as fh:
        for rec in trace:
            fh.write(json.dumps(rec) + "\n")
