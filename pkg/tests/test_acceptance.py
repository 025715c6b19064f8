"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line."""

import time

import numpy as np
import pytest

from shiftseg.eg_loss import LossConfig, loss_total, nearest_match
from shiftseg.harness.checks import REL_TOL, run_all
from shiftseg.harness.config import TrainConfig
from shiftseg.harness.metrics import eval_ap50
from shiftseg.harness.model import Detection
from shiftseg.harness.train import train_loop
from shiftseg.shift_mlp import (
    HORIZONTAL,
    VERTICAL,
    ShiftSpec,
    axial_shift,
    count_macs_stone,
    init_stone_block,
    shift_token_mix,
    stone_block,
)
from shiftseg.sparse_fpn import count_macs_sparse, init_sparse_mlp, receptive_field_mask, sparse_mlp_block
from shiftseg.synth import DatasetCorruptionError, SceneSpec, generate_dataset, read_dataset, write_dataset
from shiftseg.tensor import count_macs

from oracles import brute_match, shift_oracle, token_mix_oracle

OVERFIT_STEPS = 300
OVERFIT_LR = 0.05  # above the 1e-3 production default; 300 steps at 1e-3 only reach ~87% of the start


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail=""):
        with capsys.disabled():
            print(f"\n[criterion {number:2d}] {'PASS' if ok else 'FAIL'} {title}: {detail}")
        assert ok, f"criterion {number} ({title}) failed: {detail}"
    return emit


def test_criterion_01_shift_oracle(report):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    mismatches = 0
    for case in range(100):
        s = (1, 3)[case % 2]
        axis = (HORIZONTAL, VERTICAL)[(case // 2) % 2]
        shape = (int(rng.integers(1, 3)), s * int(rng.integers(1, 9 // s + 1)),
                 int(rng.integers(1, 7)), int(rng.integers(1, 7)))
        x = rng.standard_normal(shape)
        mismatches += not np.array_equal(axial_shift(x, ShiftSpec(axis, s)), shift_oracle(x, axis, s))
    elapsed = time.perf_counter() - t0
    report(1, "axial shift vs index-remap oracle", mismatches == 0 and elapsed < 5.0,
           f"{100 - mismatches}/100 bitwise equal, {elapsed:.2f}s (limit 5s)")


def test_criterion_02_token_mix_concat_form(report):
    rng = np.random.default_rng(102)
    worst = 0.0
    for case in range(20):
        s = (1, 3)[case % 2]
        c = s * int(rng.integers(1, 4))
        p = init_stone_block(rng, c)
        x = rng.standard_normal((int(rng.integers(1, 3)), c, int(rng.integers(1, 6)), int(rng.integers(1, 6))))
        worst = max(worst, float(np.abs(shift_token_mix(x, p, s) - token_mix_oracle(x, p, s)).max()))
    report(2, "shift token mixing vs concat-then-project", worst <= 1e-12, f"max abs diff {worst:.2e} (tol 1e-12)")


def test_criterion_03_receptive_field(report):
    h = w = 5
    failures = []
    for seed in (0, 1, 2):
        for probe in ((2, 2), (0, 4), (3, 1)):
            cross = np.zeros((h, w), dtype=bool)
            cross[probe[0], :] = True
            cross[:, probe[1]] = True
            one = receptive_field_mask(1, h, w, probe, channels=4, seed=seed)
            two = receptive_field_mask(2, h, w, probe, channels=4, seed=seed)
            if not np.array_equal(one, cross) or not two.all():
                failures.append((seed, probe))
    report(3, "one block gives a cross, two give the full grid", not failures,
           f"3 seeds x 3 probes on 1x4x5x5, failures {failures}")


def test_criterion_04_mac_counters(report):
    rng = np.random.default_rng(104)
    rows = []
    stone_shapes = [(8, 8, 48)] + [(int(rng.integers(1, 9)), int(rng.integers(1, 9)), 3 * int(rng.integers(1, 10)))
                                   for _ in range(5)]
    for h, w, c in stone_shapes:
        with count_macs() as counter:
            stone_block(rng.standard_normal((1, c, h, w)), init_stone_block(rng, c))
        rows.append(("stone", (h, w, c), counter.total, 4 * h * w * c * c, count_macs_stone(h, w, c)))
    sparse_shapes = [(8, 8, 16)] + [tuple(int(v) for v in rng.integers(1, 10, 3)) for _ in range(5)]
    for h, w, c in sparse_shapes:
        with count_macs() as counter:
            sparse_mlp_block(rng.standard_normal((1, c, h, w)), init_sparse_mlp(rng, c, h, w))
        rows.append(("sparse", (h, w, c), counter.total, h * w * c * (h + w) + 3 * h * w * c * c,
                     count_macs_sparse(h, w, c)))
    ok = all(counted == closed == fn for _, _, counted, closed, fn in rows)
    ok &= rows[0][2] == 589_824 and rows[6][2] == 65_536
    report(4, "instrumented MACs equal closed forms", ok,
           f"stone (8,8,48)={rows[0][2]}, sparse (8,8,16)={rows[6][2]}, {len(rows)} shapes checked")


def test_criterion_05_gradients(report):
    names = ["stone_block", "sparse_mlp_block", "fpn_forward", "coarse_mask_head", "point_classify",
             "loss_coarse", "loss_ploc", "loss_pg", "loss_total"]
    t0 = time.perf_counter()
    reports = run_all(seed=5, probes=10, names=names)
    elapsed = time.perf_counter() - t0
    worst = max(r.max_rel_err for r in reports.values())
    ok = set(reports) == set(names) and all(r.passed(REL_TOL) for r in reports.values()) and elapsed < 120
    report(5, "finite-difference gradient checks", ok,
           f"{sum(r.passed(REL_TOL) for r in reports.values())}/{len(names)} ops, worst rel err {worst:.2e} "
           f"(tol {REL_TOL:g}), {elapsed:.2f}s (limit 120s)")


def test_criterion_06_matching(report):
    rng = np.random.default_rng(106)
    bad = 0
    ties = 0
    for case in range(50):
        n, m = int(rng.integers(1, 65)), int(rng.integers(1, 129))
        if case % 2:
            # integer lattice: many exactly equidistant candidates
            pred = rng.integers(0, 8, size=(n, 2)).astype(float) + 0.5 * (case % 4 == 3)
            gt = rng.integers(0, 8, size=(m, 2)).astype(float)
        else:
            pred, gt = rng.uniform(size=(n, 2)), rng.uniform(size=(m, 2))
        ref = brute_match(pred, gt)
        d = np.sqrt(((pred[:, None] - gt[None]) ** 2).sum(axis=2))
        ties += int(((d == d.min(axis=1, keepdims=True)).sum(axis=1) > 1).sum())
        bad += not np.array_equal(nearest_match(pred, gt), ref)
    report(6, "nearest match vs brute force", bad == 0 and ties > 0,
           f"{50 - bad}/50 identical, {ties} tied points exercised")


def test_criterion_07_decomposition(report):
    rng = np.random.default_rng(107)
    worst = 0.0
    for _ in range(200):
        parts = rng.uniform(0, 10, 4)
        for cfg in (LossConfig(), LossConfig(alpha=float(rng.uniform(0, 3)), beta=float(rng.uniform(0, 3)))):
            got = loss_total(*parts, cfg).total
            worst = max(worst, abs(got - (parts[0] + cfg.alpha * parts[1] + cfg.beta * parts[2] + parts[3])))
    nine = loss_total(1, 2, 3, 4).total
    report(7, "total loss decomposition", worst <= 1e-12 and nine == 9.0,
           f"max abs diff {worst:.2e} (tol 1e-12), (1,2,3,4) -> {nine}")


def test_criterion_08_overfit(report):
    spec = SceneSpec(seed=7, min_instances=3, max_instances=3)
    scene = generate_dataset(spec, 1)
    cfg = TrainConfig(lr=OVERFIT_LR, steps=OVERFIT_STEPS, batch_size=1, seed=0)
    t0 = time.perf_counter()
    first = train_loop(scene, cfg)
    elapsed = time.perf_counter() - t0
    second = train_loop(scene, cfg)
    start, end = first.trace[0]["total"], first.trace[-1]["total"]
    ratio = end / start
    same = first.trace == second.trace
    report(8, "overfit one 64x64 scene with 3 instances", ratio < 0.5 and same and elapsed < 600,
           f"total {start:.4f} -> {end:.4f} ({100 * ratio:.1f}% of step 1, limit 50%), "
           f"{elapsed:.1f}s per run (limit 600s), traces identical={same}")


def test_criterion_09_metrics(report):
    results = []
    for seed in (0, 1, 2):
        scenes = generate_dataset(SceneSpec(seed=seed), 8)
        gts = [s.instances for s in scenes]
        perfect = eval_ap50([[Detection(a.box, a.mask, 0.5 + 0.01 * k) for k, a in enumerate(g)] for g in gts], gts)
        empty = eval_ap50([[] for _ in gts], gts)
        results.append((perfect.ap50_box, perfect.ap50_mask, empty.ap50_box, empty.ap50_mask))

    def det(box, score):
        m = np.zeros((10, 10), dtype=bool)
        m[box[1]:box[3], box[0]:box[2]] = True
        return Detection(box, m, score)
    hand = eval_ap50([[det((0, 0, 4, 4), 0.9), det((0, 6, 3, 10), 0.4)]],
                     [[det((0, 0, 4, 4), 1.0), det((6, 6, 10, 10), 1.0)]])
    ok = all(r == (1.0, 1.0, 0.0, 0.0) for r in results) and hand.ap50_box == 0.5 and hand.ap50_mask == 0.5
    report(9, "AP50 sanity", ok, f"3 generated sets (perfect, empty) = {results}, hand case = {hand.ap50_box}")


def test_criterion_10_dataset(report, tmp_path):
    spec = SceneSpec(seed=110)
    scenes = generate_dataset(spec, 10)
    write_dataset(scenes, tmp_path / "a", spec)
    write_dataset(generate_dataset(spec, 10), tmp_path / "b", spec)
    round_trip = read_dataset(tmp_path / "a") == scenes
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    identical = names == sorted(p.name for p in (tmp_path / "b").iterdir()) and all(
        (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in names)
    victim = tmp_path / "b" / "scene_00004.pgm"
    data = bytearray(victim.read_bytes())
    data[len(data) // 2] ^= 0x40
    victim.write_bytes(bytes(data))
    try:
        read_dataset(tmp_path / "b")
        rejected = False
    except DatasetCorruptionError as exc:
        rejected = "scene_00004.pgm" in str(exc)
    report(10, "dataset round trip and integrity", round_trip and identical and rejected,
           f"round trip={round_trip}, byte-identical reruns={identical} ({len(names)} files), "
           f"corruption rejected={rejected}")

