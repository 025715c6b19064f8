"""Command-line entry point: ``shiftseg <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .. import shift_mlp, sparse_fpn
from ..synth import SceneSpec, generate_dataset, read_dataset, read_pgm, write_dataset, write_pgm
from ..synth.io import decode_annotations
from ..tensor import count_macs
from . import config as config_mod
from .checks import CHECKS, REL_TOL, run_all
from .config import TrainConfig
from .model import init_model, predict_boxes, stage_shapes
from .train import evaluate, load_checkpoint, save_checkpoint, train_loop, write_trace
from .tree import count_params

log = logging.getLogger("shiftseg")


def _overrides(args) -> dict:
    return {"seed": str(args.seed)} if getattr(args, "seed", None) is not None else {}


def cmd_gen_data(args) -> int:
    values = config_mod.parse_kv(Path(args.spec_file).read_text())
    count = int(values.pop("scenes", "16"))
    values.update(_overrides(args))
    spec = config_mod.build(SceneSpec, values)
    write_dataset(generate_dataset(spec, count), args.out_dir, spec)
    print(f"wrote {count} scenes to {args.out_dir}")
    return 0


def cmd_train(args) -> int:
    cfg = config_mod.load(args.config_file, TrainConfig, _overrides(args))
    scenes = read_dataset(args.data_dir)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def progress(rec):
        if rec["step"] % max(1, cfg.steps // 20) == 0 or rec["step"] == cfg.steps - 1:
            print(f"step {rec['step']:5d} lr {rec['lr']:.2e} total {rec['total']:.5f} "
                  f"cls {rec['l_cls_b']:.4f} ploc {rec['l_ploc_b']:.4f} "
                  f"coarse {rec['l_coarse_m']:.4f} pmat {rec['l_pmat_m']:.4f}")

    result = train_loop(scenes, cfg, progress)
    save_checkpoint(out / "checkpoint.npz", result.params, cfg)
    write_trace(out / "trace.jsonl", result.trace)
    print(f"checkpoint: {out / 'checkpoint.npz'}")
    return 0


def cmd_eval(args) -> int:
    params, cfg = load_checkpoint(args.checkpoint)
    print(evaluate(params, cfg, read_dataset(args.data_dir)).to_text())
    return 0


def cmd_gradcheck(args) -> int:
    reports = run_all(seed=args.seed or 0, probes=args.probes)
    failed = 0
    for name, rep in reports.items():
        ok = rep.passed(REL_TOL)
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'} {name:18s} max_rel_err={rep.max_rel_err:.3e} "
              f"max_abs_err={rep.max_abs_err:.3e} h={rep.h:g}")
    print(f"{len(reports) - failed}/{len(reports)} gradient checks passed (rel tol {REL_TOL:g})")
    return 1 if failed else 0


def cmd_bench(args) -> int:
    rng = np.random.default_rng(0)
    print("block      h   w    c   counted      formula")
    for h, w, c in [(8, 8, 48), (16, 16, 48), (4, 4, 192), (2, 2, 384)]:
        p = shift_mlp.init_stone_block(rng, c)
        with count_macs() as counter:
            shift_mlp.stone_block(rng.standard_normal((1, c, h, w)), p)
        print(f"stone   {h:4d}{w:4d}{c:5d}{counter.total:10d}{shift_mlp.count_macs_stone(h, w, c):13d}")
    for h, w, c in [(8, 8, 16), (16, 16, 64), (8, 8, 64), (2, 2, 64)]:
        p = sparse_fpn.init_sparse_mlp(rng, c, h, w)
        with count_macs() as counter:
            sparse_fpn.sparse_mlp_block(rng.standard_normal((1, c, h, w)), p)
        print(f"sparse  {h:4d}{w:4d}{c:5d}{counter.total:10d}{sparse_fpn.count_macs_sparse(h, w, c):13d}")
    cfg = TrainConfig().model
    params = init_model(cfg)
    print(f"parameters: backbone {count_params(params['backbone'])}, fpn {count_params(params['fpn'])}, "
          f"heads {count_params(params['head'])}, total {count_params(params)}")
    print("stage shapes (c, h, w): " + ", ".join(str(s) for s in stage_shapes(cfg)))
    return 0


def _parse_boxes(text: str, h: int, w: int):
    boxes = []
    for chunk in text.split(";"):
        x0, y0, x1, y1 = (float(v) for v in chunk.split(","))
        boxes.append((x0 / w, y0 / h, x1 / w, y1 / h))
    return boxes


def cmd_infer(args) -> int:
    params, cfg = load_checkpoint(args.checkpoint)
    image = read_pgm(args.image)
    h, w = image.shape
    ann_path = Path(args.image).with_suffix(".ann")
    if args.boxes:
        boxes = _parse_boxes(args.boxes, h, w)
    elif ann_path.exists():
        boxes = [tuple(a.box_normalized()) for a in decode_annotations(ann_path.read_text()) if not a.empty]
    else:
        boxes = [(0.0, 0.0, 1.0, 1.0)]
    g = image.astype(np.float64) / 255.0
    tensor = np.repeat(((g - 0.5) / 0.25)[None, None], 3, axis=1)
    dets = predict_boxes(params, cfg.model, tensor, boxes)
    overlay = image.copy()
    for k, det in enumerate(dets):
        write_pgm(f"{args.out_prefix}_mask_{k}.pgm", det.mask.astype(np.uint8) * 255)
        inner = det.mask.copy()
        inner[1:-1, 1:-1] &= det.mask[:-2, 1:-1] & det.mask[2:, 1:-1] & det.mask[1:-1, :-2] & det.mask[1:-1, 2:]
        overlay[det.mask & ~inner] = 255
        print(f"instance {k}: box {det.box} score {det.score:.4f} area {int(det.mask.sum())}")
    write_pgm(f"{args.out_prefix}_overlay.pgm", overlay)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shiftseg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("spec_file")
    p.add_argument("out_dir")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("config_file")
    p.add_argument("data_dir")
    p.add_argument("out_dir")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="AP50 of a checkpoint on a dataset")
    p.add_argument("checkpoint")
    p.add_argument("data_dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help=f"finite-difference checks: {', '.join(CHECKS)}")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--probes", type=int, default=10)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="MAC counts against closed forms, parameter counts")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("infer", help="predict masks for the boxes of one PGM image")
    p.add_argument("checkpoint")
    p.add_argument("image")
    p.add_argument("out_prefix")
    p.add_argument("--boxes", help="pixel boxes 'x0,y0,x1,y1;...' (default: sibling .ann file or whole image)")
    p.set_defaults(func=cmd_infer)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
