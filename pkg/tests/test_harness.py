import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shiftseg.eg_loss import LossConfig
from shiftseg.harness import config as config_mod
from shiftseg.harness.checks import CHECKS, REL_TOL, run_all
from shiftseg.harness.cli import main
from shiftseg.harness.config import ConfigFileError, ModelConfig, TrainConfig
from shiftseg.harness.metrics import average_precision, eval_ap50, iou
from shiftseg.harness.model import (
    Detection,
    NonFiniteLossError,
    forward_backward,
    init_model,
    predict_scene,
)
from shiftseg.harness.train import (
    LOSS_KEYS,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
    train_loop,
)
from shiftseg.harness.tree import flatten
from shiftseg.shift_mlp import BackboneConfig
from shiftseg.sparse_fpn import FpnConfig
from shiftseg.synth import SceneSpec, generate_dataset

TINY_MODEL = ModelConfig(
    backbone=BackboneConfig(widths=(12, 24, 48, 96), depths=(1, 1, 1, 1)),
    fpn=FpnConfig(out_channels=16),
    coarse_hidden=16,
    point_hidden=16,
    train_points=16,
)
TINY = TrainConfig(lr=0.01, steps=10, batch_size=2, seed=3, model=TINY_MODEL)
SPEC = SceneSpec(seed=21, min_instances=2, max_instances=3)


@pytest.fixture(scope="module")
def scenes():
    return generate_dataset(SPEC, 3)


def gt_detections(scene, score=1.0):
    return [Detection(a.box, a.mask, score) for a in scene.instances]


# ---------------------------------------------------------------- optimiser

def test_sgd_zero_gradient(rng):
    params = {"a": rng.standard_normal(3), "b": [rng.standard_normal((2, 2))]}
    out = sgd_step(params, {"a": np.zeros(3), "b": [np.zeros((2, 2))]}, 0.1)
    for k, v in flatten(params).items():
        np.testing.assert_array_equal(flatten(out)[k], v)


def test_sgd_quadratic_contraction():
    w = {"w": np.array([1.0])}
    for _ in range(50):
        w = sgd_step(w, {"w": 2.0 * w["w"]}, 0.1)
    assert abs(w["w"][0]) < 1e-4
    assert abs(w["w"][0] - 0.8**50) < 1e-15


def test_sgd_shape_mismatch():
    with pytest.raises(ValueError):
        sgd_step({"w": np.zeros(3)}, {"w": np.zeros(4)}, 0.1)


def test_lr_schedule():
    cfg = TrainConfig()
    assert cfg.milestone == 667
    assert cfg.lr_at(666) == 0.001
    assert cfg.lr_at(667) == pytest.approx(0.0001, rel=1e-15)
    assert cfg.lr_at(999) == cfg.lr_at(667)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(steps=1)


# ---------------------------------------------------------------- metrics

def test_iou_values():
    m = np.zeros((4, 4), dtype=bool)
    m[1:3, 1:3] = True
    assert iou(m, m) == 1.0
    assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert iou((0, 0, 1, 1), (0.5, 0, 1.5, 1)) == pytest.approx(1 / 3, abs=1e-15)
    assert iou(np.zeros((3, 3), bool), np.zeros((3, 3), bool)) == 0.0


def test_iou_kind_mismatch():
    with pytest.raises(TypeError):
        iou((0, 0, 1, 1), np.ones((3, 3), dtype=bool))


def test_ap_perfect(scenes):
    res = eval_ap50([gt_detections(s, 0.3 + 0.1 * i) for i, s in enumerate(scenes)],
                    [s.instances for s in scenes])
    assert res.ap50_box == 1.0 and res.ap50_mask == 1.0


def test_ap_no_predictions(scenes):
    res = eval_ap50([[] for _ in scenes], [s.instances for s in scenes])
    assert res.ap50_box == 0.0 and res.ap50_mask == 0.0


def test_ap_empty_conventions():
    assert average_precision([[]], [[]], "box")[0] == 1.0
    assert average_precision([[Detection((0, 0, 1, 1), np.ones((1, 1), bool), 0.5)]], [[]], "box")[0] == 0.0


def _hand_case():
    def det(box, score):
        m = np.zeros((10, 10), dtype=bool)
        m[box[1]:box[3], box[0]:box[2]] = True
        return Detection(box, m, score)
    gts = [det((0, 0, 4, 4), 1.0), det((6, 6, 10, 10), 1.0)]
    preds = [det((0, 0, 4, 4), 0.9), det((0, 6, 3, 10), 0.4)]
    return preds, gts


def test_ap_hand_case():
    preds, gts = _hand_case()
    res = eval_ap50([preds], [gts])
    assert res.ap50_box == 0.5 and res.ap50_mask == 0.5
    prec, rec = res.curves["box"]
    np.testing.assert_array_equal(prec, [1.0, 0.5])
    np.testing.assert_array_equal(rec, [0.5, 0.5])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=6, max_size=6, unique=True), st.floats(0.1, 10), st.floats(-3, 3))
def test_ap_monotone_score_invariance(scores, scale, shift):
    rng = np.random.default_rng(len(scores))
    gts, preds = [], []
    for k in range(6):
        x, y = (int(v) for v in rng.integers(0, 12, 2))
        m = np.zeros((20, 20), dtype=bool)
        m[y:y + 6, x:x + 6] = True
        gts.append(Detection((x, y, x + 6, y + 6), m, 1.0))
        dx = int(rng.integers(0, 4))
        pm = np.zeros((20, 20), dtype=bool)
        pm[y:y + 6, x + dx:x + dx + 6] = True
        preds.append(Detection((x + dx, y, x + dx + 6, y + 6), pm, scores[k]))
    base = eval_ap50([preds], [gts])
    moved = [replace(p, score=float(np.exp(scale * p.score + shift))) for p in preds]
    other = eval_ap50([moved], [gts])
    assert base.ap50_box == other.ap50_box and base.ap50_mask == other.ap50_mask


# ---------------------------------------------------------------- configuration

def test_config_round_trip():
    cfg = replace(TINY, lr=0.05, loss=LossConfig(beta=2.5))
    assert config_mod.build(TrainConfig, config_mod.parse_kv(config_mod.dump(cfg))) == cfg


def test_config_parse_comments_and_nesting():
    text = "# comment\nsteps = 30  # inline\n\nmodel.backbone.widths = 8, 16\nmodel.backbone.depths = 1, 1\n"
    cfg = config_mod.build(TrainConfig, config_mod.parse_kv(text))
    assert cfg.steps == 30 and cfg.model.backbone.widths == (8, 16)


def test_config_errors():
    with pytest.raises(ConfigFileError):
        config_mod.build(TrainConfig, {"nonsense": "1"})
    with pytest.raises(ConfigFileError):
        config_mod.parse_kv("steps 3")
    with pytest.raises(ConfigFileError):
        config_mod.build(TrainConfig, {"steps": "many"})


def test_config_seed_override(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("seed = 4\nsteps = 10\n")
    assert config_mod.load(path, TrainConfig, {"seed": "9"}).seed == 9


def test_checkpoint_round_trip(tmp_path):
    params = init_model(TINY_MODEL, 5)
    save_checkpoint(tmp_path / "ck.npz", params, TINY)
    loaded, cfg = load_checkpoint(tmp_path / "ck.npz")
    assert cfg == TINY
    a, b = flatten(params), flatten(loaded)
    assert a.keys() == b.keys()
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])


# ---------------------------------------------------------------- model and training

def test_forward_backward_structure(scenes):
    params = init_model(TINY_MODEL, 0)
    losses, grads = forward_backward(params, TINY_MODEL, scenes[:2], LossConfig())
    assert all(np.isfinite(v) for v in losses.as_dict().values())
    gp, gg = flatten(params), flatten(grads)
    assert gp.keys() == gg.keys()
    assert all(gp[k].shape == gg[k].shape for k in gp)
    assert any(np.abs(v).max() > 0 for k, v in gg.items() if k.startswith("backbone"))


def test_nonfinite_loss_named(scenes):
    params = init_model(TINY_MODEL, 0)
    params["head"]["coarse"]["fc2"]["bias"][...] = np.nan
    with pytest.raises(NonFiniteLossError) as err:
        forward_backward(params, TINY_MODEL, scenes[:1], LossConfig())
    assert err.value.term == "l_coarse_m"


def test_training_deterministic(scenes):
    a = train_loop(scenes, TINY)
    b = train_loop(scenes, TINY)
    assert a.trace == b.trace
    for k, v in flatten(a.params).items():
        np.testing.assert_array_equal(v, flatten(b.params)[k])
    assert len(a.trace) == 10
    for rec in a.trace:
        assert all(k in rec and np.isfinite(rec[k]) for k in LOSS_KEYS)


def test_training_lr_trace(scenes):
    trace = train_loop(scenes[:1], replace(TINY, batch_size=1, steps=6, milestone_frac=0.5)).trace
    assert [r["lr"] for r in trace] == [0.01] * 3 + [0.01 * 0.1] * 3


def test_train_needs_data():
    with pytest.raises(ValueError):
        train_loop([], TINY)


def test_predict_scene_outputs(scenes):
    params = init_model(TINY_MODEL, 0)
    dets = predict_scene(params, TINY_MODEL, scenes[0])
    for d in dets:
        assert d.mask.shape == scenes[0].image.shape and d.mask.any()
        assert 0.0 <= d.score <= 1.0
    res = evaluate(params, TINY, scenes[:1])
    assert 0.0 <= res.ap50_box <= 1.0 and 0.0 <= res.ap50_mask <= 1.0


# ---------------------------------------------------------------- gradient suite

@pytest.mark.parametrize("name", list(CHECKS))
def test_gradcheck_suite(name):
    rep = run_all(seed=0, names=[name])[name]
    assert rep.passed(REL_TOL), f"{name}: {rep.max_rel_err:.3e}"


# ---------------------------------------------------------------- command line

def test_cli_end_to_end(tmp_path, capsys):
    spec = tmp_path / "spec.txt"
    spec.write_text("scenes = 2\nseed = 5\nmin_instances = 2\nmax_instances = 2\n")
    assert main(["gen-data", str(spec), str(tmp_path / "data")]) == 0
    assert main(["gen-data", str(spec), str(tmp_path / "data2"), "--seed", "6"]) == 0
    assert (tmp_path / "data" / "manifest.txt").read_bytes() != (tmp_path / "data2" / "manifest.txt").read_bytes()

    cfg = tmp_path / "train.txt"
    cfg.write_text(config_mod.dump(replace(TINY, steps=3, batch_size=1)))
    assert main(["train", str(cfg), str(tmp_path / "data"), str(tmp_path / "run"), "--seed", "2"]) == 0
    trace = [json.loads(line) for line in (tmp_path / "run" / "trace.jsonl").read_text().splitlines()]
    assert len(trace) == 3 and all(k in trace[0] for k in LOSS_KEYS)
    assert load_checkpoint(tmp_path / "run" / "checkpoint.npz")[1].seed == 2

    capsys.readouterr()
    assert main(["eval", str(tmp_path / "run" / "checkpoint.npz"), str(tmp_path / "data")]) == 0
    out = capsys.readouterr().out
    assert "ap50_box" in out and "ap50_mask" in out

    image = tmp_path / "data" / "scene_00000.pgm"
    assert main(["infer", str(tmp_path / "run" / "checkpoint.npz"), str(image), str(tmp_path / "pred")]) == 0
    assert (tmp_path / "pred_overlay.pgm").exists()
    assert main(["infer", str(tmp_path / "run" / "checkpoint.npz"), str(image), str(tmp_path / "box"),
                 "--boxes", "10,10,40,40"]) == 0


def test_cli_gradcheck_and_bench(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert f"{len(CHECKS)}/{len(CHECKS)} gradient checks passed" in out
    assert main(["bench"]) == 0
    lines = capsys.readouterr().out.splitlines()
    rows = [line.split() for line in lines if line.startswith(("stone", "sparse"))]
    assert rows and all(r[4] == r[5] for r in rows)
    assert any(r[1:4] == ["8", "8", "48"] and r[4] == "589824" for r in rows)
    assert any(r[1:4] == ["8", "8", "16"] and r[4] == "65536" for r in rows)
