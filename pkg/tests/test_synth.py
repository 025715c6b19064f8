import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shiftseg.eg_loss import resample_boundary
from shiftseg.synth import (
    DatasetCorruptionError,
    SceneGenerationError,
    SceneSpec,
    SplitMix64,
    generate_dataset,
    generate_scene,

    rasterize_instance,
    read_dataset,
    write_dataset,
)
from shiftseg.synth.io import (
    MANIFEST,
    decode_annotations,
    decode_pgm,
    encode_annotations,
    encode_pgm,
    read_manifest,
    rle_decode,
    rle_encode,
)
from shiftseg.synth.rng import stream_seed
from shiftseg.synth.scene import mask_box, overlap_fraction

SMALL = SceneSpec(height=48, width=48, min_instances=1, max_instances=3, min_axis=4, max_axis=9, seed=3)


def boundary_midpoints(mask):
    """Midpoints of pixel edges separating inside from outside, in pixel units."""
    m = np.pad(mask, 1)  # padded index k is pixel k - 1
    pts = []
    ii, jj = np.nonzero(m[:, 1:] != m[:, :-1])
    pts += [(j, i - 0.5) for i, j in zip(ii, jj)]
    ii, jj = np.nonzero(m[1:, :] != m[:-1, :])
    pts += [(j - 0.5, i) for i, j in zip(ii, jj)]
    return np.array(pts, dtype=np.float64)


def hausdorff(a, b):
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2))
    return max(d.min(axis=1).max(), d.min(axis=0).max())


# ---------------------------------------------------------------- rng

def test_splitmix_reference_vector():
    assert [int(v) for v in SplitMix64(1234567).next_u64(3)] == [
        0x599ED017FB08FC85, 0x2C73F08458540FA5, 0x883EBCE5A3F27C77]


def test_splitmix_batching_is_consistent():
    a = SplitMix64(99)
    b = SplitMix64(99)
    np.testing.assert_array_equal(a.next_u64(10), np.concatenate([b.next_u64(3), b.next_u64(7)]))


def test_splitmix_ranges():
    r = SplitMix64(5)
    u = r.uniform(10_000)
    assert u.min() >= 0 and u.max() < 1 and abs(u.mean() - 0.5) < 0.02
    z = r.normal(10_000)
    assert np.isfinite(z).all() and abs(z.mean()) < 0.05 and abs(z.std() - 1) < 0.05
    ints = {r.integer(2, 5) for _ in range(200)}
    assert ints == {2, 3, 4, 5}


def test_stream_seeds_differ():
    assert len({stream_seed(0, i) for i in range(100)}) == 100


# ---------------------------------------------------------------- rasterisation

def test_centre_pixel_inside():
    ann = rasterize_instance(20.5, 30.5, 7, 4, 0.0, 64, 64)
    assert ann.mask[30, 20]


def test_area_close_to_analytic():
    for theta in (0.0, 0.4, 1.3):
        ann = rasterize_instance(32.3, 31.7, 12, 8, theta, 64, 64)
        assert abs(ann.mask.sum() - math.pi * 96) / (math.pi * 96) < 0.02


def test_disjoint_ellipses_disjoint_masks():
    a = rasterize_instance(15, 15, 8, 5, 0.3, 64, 64)
    b = rasterize_instance(45, 45, 8, 5, 1.0, 64, 64)
    assert not (a.mask & b.mask).any()


def test_out_of_frame_flagged():
    ann = rasterize_instance(-40, -40, 5, 5, 0.0, 32, 32)
    assert ann.empty and not ann.mask.any()


def test_nonpositive_axis():
    with pytest.raises(ValueError):
        rasterize_instance(10, 10, 0, 5, 0.0, 32, 32)


def test_polygon_orientation_positive():
    poly = rasterize_instance(20, 20, 9, 5, 0.7, 40, 40).polygon
    x, y = poly[:, 0], poly[:, 1]
    assert 0.5 * (x * np.roll(y, -1) - np.roll(x, -1) * y).sum() > 0


@settings(max_examples=25, deadline=None)
@given(st.floats(14, 50), st.floats(14, 50), st.floats(3, 12), st.floats(3, 12), st.floats(0, math.pi))
def test_polygon_hausdorff_below_one_pixel(cx, cy, a, b, theta):
    ann = rasterize_instance(cx, cy, a, b, theta, 64, 64)
    assert ann.mask.any()
    poly_px = resample_boundary(ann.polygon * [64, 64], 256)
    assert hausdorff(poly_px, boundary_midpoints(ann.mask)) < 1.0


def test_generated_annotations_geometry():
    for scene in generate_dataset(SceneSpec(seed=11), 5):
        h, w = scene.image.shape
        for ann in scene.instances:
            assert ann.box == mask_box(ann.mask)
            poly_px = resample_boundary(ann.polygon * [w, h], 256)
            assert hausdorff(poly_px, boundary_midpoints(ann.mask)) < 1.0


# ---------------------------------------------------------------- scenes

def test_scene_deterministic():
    assert generate_scene(SceneSpec(seed=4), 7) == generate_scene(SceneSpec(seed=4), 7)
    assert generate_scene(SceneSpec(seed=4), 7) != generate_scene(SceneSpec(seed=5), 7)


def test_zero_overlap_gives_disjoint_masks():
    spec = SceneSpec(max_overlap=0.0, min_instances=2, max_instances=3, seed=2)
    for scene in generate_dataset(spec, 5):
        for i, a in enumerate(scene.instances):
            for b in scene.instances[i + 1:]:
                assert not (a.mask & b.mask).any()


def test_overlap_bound_respected():
    for scene in generate_dataset(SceneSpec(seed=9), 20):
        for i, a in enumerate(scene.instances):
            for b in scene.instances[i + 1:]:
                assert overlap_fraction(a.mask, b.mask) <= 0.25


def test_instance_counts_in_range():
    spec = SceneSpec(seed=1)
    counts = [len(s.instances) for s in generate_dataset(spec, 1000)]
    assert min(counts) >= spec.min_instances and max(counts) <= spec.max_instances
    assert set(counts) == {2, 3, 4, 5}


def test_placement_failure_names_constraint():
    spec = SceneSpec(min_instances=5, max_instances=5, min_axis=14, max_axis=14, max_overlap=0.0,
                     max_attempts=5, max_restarts=1)
    with pytest.raises(SceneGenerationError, match="max_overlap"):
        generate_scene(spec, 0)


def test_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec(min_instances=4, max_instances=2)
    with pytest.raises(ValueError):
        SceneSpec(max_overlap=1.0)
    with pytest.raises(ValueError):
        SceneSpec(min_axis=-1)


def test_image_tensor_shape():
    t = generate_scene(SMALL, 0).image_tensor()
    assert t.shape == (1, 3, 48, 48)
    np.testing.assert_array_equal(t[0, 0], t[0, 2])


# ---------------------------------------------------------------- serialisation

def test_pgm_round_trip(rng):
    img = rng.integers(0, 256, size=(5, 7)).astype(np.uint8)
    data = encode_pgm(img)
    assert data.startswith(b"P5\n7 5\n255\n")
    np.testing.assert_array_equal(decode_pgm(data), img)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 10**6))
def test_rle_round_trip(h, w, seed):
    mask = np.random.default_rng(seed).uniform(size=(h, w)) < 0.4
    runs = rle_encode(mask)
    assert sum(runs) == h * w
    np.testing.assert_array_equal(rle_decode(runs, (h, w)), mask)


def test_annotation_text_round_trip():
    scene = generate_scene(SMALL, 2)
    assert decode_annotations(encode_annotations(scene)) == scene.instances


def test_dataset_round_trip(tmp_path):
    scenes = generate_dataset(SMALL, 10)
    write_dataset(scenes, tmp_path, SMALL)
    assert read_dataset(tmp_path) == scenes
    count, spec, files = read_manifest(tmp_path)
    assert count == 10 and spec == SMALL and len(files) == 20


def test_dataset_empty(tmp_path):
    write_dataset([], tmp_path, SMALL)
    assert read_dataset(tmp_path) == []


def test_dataset_byte_identical(tmp_path):
    for run in ("a", "b"):
        write_dataset(generate_dataset(SMALL, 4), tmp_path / run, SMALL)
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


@pytest.mark.parametrize("victim", ["scene_00001.pgm", "scene_00002.ann"])
def test_dataset_tamper_detected(tmp_path, victim):
    write_dataset(generate_dataset(SMALL, 3), tmp_path, SMALL)
    path = tmp_path / victim
    data = bytearray(path.read_bytes())
    data[-3] ^= 0x01
    path.write_bytes(bytes(data))
    with pytest.raises(DatasetCorruptionError, match=victim):
        read_dataset(tmp_path)


def test_dataset_missing_file(tmp_path):
    write_dataset(generate_dataset(SMALL, 2), tmp_path, SMALL)
    (tmp_path / "scene_00000.ann").unlink()
    with pytest.raises(DatasetCorruptionError, match="scene_00000.ann"):
        read_dataset(tmp_path)


def test_dataset_missing_manifest(tmp_path):
    with pytest.raises(DatasetCorruptionError, match=MANIFEST):
        read_dataset(tmp_path)
