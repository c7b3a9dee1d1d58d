import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fewcount import dataset as ds
from fewcount.nn import kernels
from fewcount.synthetic import dot_images, write_dataset

from . import oracles


def tiny_sample(sid, value=0, H=8, W=8, dots=((2.0, 3.0),), boxes=((1, 1, 2, 2),)):
    return ds.ImageSample(
        sid,
        np.full((3, H, W), value, dtype=np.uint8),
        np.asarray(dots, dtype=float).reshape(-1, 2),
        [ds.BoundingBox(*b) for b in boxes],
    )


# --------------------------------------------------------------------------- loading


def test_load_dataset_of_125(tmp_path):
    write_dataset(tmp_path, [tiny_sample(f"plate{i:03d}") for i in range(125)])
    samples = ds.load_dataset(tmp_path)
    assert len(samples) == 125
    assert [s.id for s in samples] == sorted(s.id for s in samples)
    assert samples[0].pixels.shape == (3, 8, 8)


def test_load_roundtrips_annotations(tmp_path):
    src = dot_images(2, seed=3, size=32)
    write_dataset(tmp_path, src)
    loaded = ds.load_dataset(tmp_path)
    for a, b in zip(src, loaded):
        np.testing.assert_array_equal(a.pixels, b.pixels)
        np.testing.assert_allclose(a.dots, b.dots)
        np.testing.assert_allclose(a.boxes, b.boxes)


def test_empty_dir_warns(tmp_path):
    with pytest.warns(UserWarning):
        assert ds.load_dataset(tmp_path) == []


def test_box_outside_image_names_sample(tmp_path):
    write_dataset(tmp_path, [tiny_sample("good"), tiny_sample("wide", boxes=((5, 1, 2, 4),))])
    with pytest.raises(ds.DatasetError, match="wide") as err:
        ds.load_dataset(tmp_path)
    assert err.value.sample_id == "wide"


def test_missing_annotation_names_sample(tmp_path):
    write_dataset(tmp_path, [tiny_sample("a")])
    (tmp_path / "a.json").unlink()
    results = ds.scan_dataset(tmp_path)
    assert isinstance(results[0][1], ds.DatasetError) and results[0][1].sample_id == "a"


def test_annotation_format(tmp_path):
    ds.write_annotation(tmp_path / "x.json", [(1.5, 2.0)], [(0, 1, 3, 4)])
    doc = json.loads((tmp_path / "x.json").read_text())
    assert doc == {"dots": [[1.5, 2.0]], "boxes": [[0.0, 1.0, 3.0, 4.0]]}


# --------------------------------------------------------------------------- splits


def test_split_125_to_100_25():
    train, test = ds.split_train_test(list(range(125)), 0.8, seed=0)
    assert (len(train), len(test)) == (100, 25)
    assert sorted(train + test) == list(range(125))


def test_split_deterministic():
    a = ds.split_train_test(list(range(10)), 0.8, seed=42)
    b = ds.split_train_test(list(range(10)), 0.8, seed=42)
    assert a == b


@pytest.mark.parametrize("ratio", [0.0, 1.0, 1.5])
def test_split_bad_ratio(ratio):
    with pytest.raises(ValueError):
        ds.split_train_test(list(range(10)), ratio, 0)


def test_split_too_few():
    with pytest.raises(ValueError):
        ds.split_train_test([1], 0.5, 0)


def test_folds_100_by_5():
    folds = ds.make_folds([f"s{i}" for i in range(100)], 5, seed=1)
    assert folds.sizes() == [20] * 5


def test_folds_7_by_5():
    folds = ds.make_folds([f"s{i}" for i in range(7)], 5, seed=1)
    assert sorted(folds.sizes(), reverse=True) == [2, 2, 1, 1, 1]


def test_folds_errors():
    with pytest.raises(ValueError):
        ds.make_folds(["a", "b"], 1, 0)
    with pytest.raises(ValueError):
        ds.make_folds(["a", "b"], 3, 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 40), st.integers(2, 10), st.integers(0, 2**31))
def test_folds_partition_and_balance(n, k, seed):
    if k > n:
        return
    ids = [f"id{i}" for i in range(n)]
    folds = ds.make_folds(ids, k, seed)
    assert sorted(folds.fold_assignments) == sorted(ids)
    sizes = folds.sizes()
    assert max(sizes) - min(sizes) <= 1
    assert folds == ds.make_folds(list(reversed(ids)), k, seed)


def test_split_file_roundtrip(tmp_path):
    ids = [f"s{i}" for i in range(10)]
    train, test = ds.split_train_test(ids, 0.8, 3)
    folds = ds.make_folds(train, 4, 3)
    ds.write_split_file(tmp_path / "split.json", train, test, folds, 3, 0.8)
    tr, te, f = ds.read_split_file(tmp_path / "split.json")
    assert tr == sorted(train) and te == sorted(test) and f == folds


# --------------------------------------------------------------------------- normalisation


def test_norm_stats_two_constant_images():
    stats = ds.compute_norm_stats([tiny_sample("a", 10), tiny_sample("b", 20)])
    assert stats.mean == (15.0, 15.0, 15.0)
    assert stats.std == (5.0, 5.0, 5.0)


def test_norm_stats_zero_image_is_degenerate():
    with pytest.raises(ds.DegenerateStatsError) as err:
        ds.compute_norm_stats([tiny_sample("z", 0)])
    np.testing.assert_array_equal(err.value.mean, [0.0, 0.0, 0.0])


def test_norm_stats_empty():
    with pytest.raises(ValueError):
        ds.compute_norm_stats([])


def test_norm_stats_reject_nonpositive_std():
    with pytest.raises(ValueError):
        ds.NormStats((0, 0, 0), (1, 0, 1))


def test_normalize_values():
    stats = ds.NormStats((55.0, 55.0, 55.0), (10.0, 10.0, 10.0))
    assert ds.normalize(np.full((3, 1, 1), 255), stats)[0, 0, 0] == pytest.approx(20.0)
    at_mean = ds.NormStats((7.0, 7.0, 7.0), (2.0, 2.0, 2.0))
    assert not ds.normalize(tiny_sample("m", 7), at_mean).any()


def test_normalize_roundtrip():
    s = dot_images(1, seed=5, size=16)[0]
    stats = ds.compute_norm_stats([s])
    np.testing.assert_allclose(ds.denormalize(ds.normalize(s, stats), stats), s.pixels, atol=1e-6)


# --------------------------------------------------------------------------- density


def test_single_dot_mass():
    d = ds.gt_density([(20.0, 20.0)], 40, 40)
    assert d.sum() == pytest.approx(1.0, abs=1e-6)
    assert ds.kernel_window(np.array([[20.0, 20.0]])) == ds.SINGLE_DOT_WINDOW


def test_two_dots_40_apart():
    dots = np.array([[60.5, 100.5], [100.5, 100.5]])
    assert ds.kernel_window(dots) == 41
    d = ds.gt_density(dots, 200, 200)
    assert d.sum() == pytest.approx(2.0, abs=1e-6)
    ref = oracles.clipped_gaussian_mass(100, 60, 200, 200, 41, 10.25) + oracles.clipped_gaussian_mass(
        100, 100, 200, 200, 41, 10.25
    )
    np.testing.assert_allclose(d, ref, atol=1e-12)


def test_corner_dot_clipped_and_renormalised():
    dots = np.array([[0.2, 0.3], [30.0, 30.0]])
    window = ds.kernel_window(dots)
    d = ds.gt_density(dots, 40, 40)
    ref = oracles.clipped_gaussian_mass(0, 0, 40, 40, window, window / 4)
    ref += oracles.clipped_gaussian_mass(30, 30, 40, 40, window, window / 4)
    np.testing.assert_allclose(d, ref, atol=1e-12)
    assert d.sum() == pytest.approx(2.0, abs=1e-6)


def test_density_errors():
    with pytest.raises(ValueError):
        ds.gt_density([], 10, 10)
    with pytest.raises(ValueError):
        ds.gt_density([(11.0, 2.0)], 10, 10)


def test_density_translation():
    rng = np.random.default_rng(3)
    dots = rng.uniform(30, 60, size=(8, 2))
    a = ds.gt_density(dots, 100, 100)
    b = ds.gt_density(dots + [7, -5], 100, 100)
    np.testing.assert_allclose(np.roll(a, (-5, 7), axis=(0, 1)), b, atol=1e-12)


def test_stamp_backends_agree():
    rng = np.random.default_rng(4)
    rows, cols = rng.integers(0, 30, 20), rng.integers(0, 25, 20)
    np.testing.assert_allclose(
        kernels.stamp_gaussians_numpy(rows, cols, 30, 25, 9, 2.25),
        kernels.stamp_gaussians_numba(rows, cols, 30, 25, 9, 2.25),
        atol=1e-12,
    )


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 31.99), st.floats(0, 23.99)), min_size=1, max_size=25))
def test_density_mass_property(dots):
    d = ds.gt_density(dots, 24, 32)
    assert (d >= 0).all()
    assert d.sum() == pytest.approx(len(dots), rel=1e-6)


def test_select_exemplars_deterministic():
    s = dot_images(1, seed=1)[0]
    a = ds.select_exemplars(s, 3, np.random.default_rng(9))
    b = ds.select_exemplars(s, 3, np.random.default_rng(9))
    assert a == b and len(a) == 3 and len(set(a)) == 3
