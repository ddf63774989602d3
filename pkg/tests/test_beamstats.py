import csv

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hals.beamstats import (RowAccumulator, accumulate, empty_bin_fraction, finalize, per_beam_stats,
                            per_beam_stats_two_pass)
from hals.rangeimg import ChannelMode, RangeImage, convert_mode
from hals.synthscan import DEFAULT_SENSOR, DEFAULT_SENSOR_HEIGHT, ScanJob, random_scene, raycast_scan


def sph(ch, occ=None):
    ch = np.asarray(ch, float)[None]
    occ = ch[0] > 0 if occ is None else occ
    return RangeImage(ch, occ)


def test_constant_row():
    img = sph(np.vstack([np.full(6, 5.0), np.zeros(6)]))
    st_ = per_beam_stats([img])
    assert (st_.mean_range[0], st_.std_range[0], st_.occupied_fraction[0]) == (5.0, 0.0, 1.0)
    assert (st_.mean_range[1], st_.std_range[1], st_.occupied_fraction[1]) == (0.0, 0.0, 0.0)


def test_two_point_population_std():
    img = sph([[3.0, 5.0, 0.0, 0.0], [0, 0, 0, 0]])
    st_ = per_beam_stats([img])
    assert st_.mean_range[0] == 4.0 and st_.std_range[0] == 1.0
    assert st_.std_convention == "population"


def test_ground_only_means_match_oracle():
    scans = [raycast_scan(ScanJob(random_scene(s, 0.0), DEFAULT_SENSOR)) for s in range(100)]
    st_ = per_beam_stats(scans, DEFAULT_SENSOR)
    el = DEFAULT_SENSOR.row_elevations()
    rows = st_.occupied_fraction > 0
    expected = DEFAULT_SENSOR_HEIGHT / np.sin(np.radians(-el[rows]))
    np.testing.assert_allclose(st_.mean_range[rows], expected, atol=1e-3)


def test_empty_bin_fraction_extremes():
    assert empty_bin_fraction([sph(np.ones((2, 4)))]) == 0.0
    assert empty_bin_fraction([sph(np.zeros((2, 4)))]) == 1.0
    with pytest.raises(ValueError):
        empty_bin_fraction([])


def test_errors():
    with pytest.raises(ValueError):
        per_beam_stats([])
    with pytest.raises(ValueError):
        per_beam_stats([sph(np.ones((2, 4))), sph(np.ones((3, 4)))])


def _random_images(seed, n=5, shape=(6, 10)):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        occ = rng.random(shape) < 0.7
        out.append(sph(np.where(occ, rng.uniform(1, 80, shape), 0.0), occ))
    return out


@given(st.integers(0, 2 ** 20))
def test_streaming_matches_two_pass(seed):
    imgs = _random_images(seed)
    a, b = per_beam_stats(imgs), per_beam_stats_two_pass(imgs)
    np.testing.assert_allclose(a.mean_range, b.mean_range, rtol=1e-9, atol=0)
    np.testing.assert_allclose(a.std_range, b.std_range, rtol=1e-9, atol=1e-12)
    np.testing.assert_array_equal(a.occupied_fraction, b.occupied_fraction)


@given(st.integers(0, 2 ** 20))
def test_merge_is_associative_and_permutation_invariant(seed):
    imgs = _random_images(seed, n=6)
    whole = finalize(accumulate(imgs))
    parts = [accumulate(imgs[:2]), accumulate(imgs[2:3]), accumulate(imgs[3:])]
    left = finalize(parts[0].merge(parts[1]).merge(parts[2]))
    right = finalize(parts[0].merge(parts[1].merge(parts[2])))
    shuffled = per_beam_stats(imgs[::-1])
    for other in (left, right, shuffled):
        np.testing.assert_allclose(other.mean_range, whole.mean_range, rtol=1e-12)
        np.testing.assert_allclose(other.std_range, whole.std_range, rtol=1e-9, atol=1e-12)
    assert left.frame_count == 6


def test_mode_invariance():
    scans = [raycast_scan(ScanJob(random_scene(s), DEFAULT_SENSOR)) for s in range(3)]
    ref = per_beam_stats(scans, DEFAULT_SENSOR)
    for mode in ChannelMode:
        other = per_beam_stats([convert_mode(s, DEFAULT_SENSOR, mode) for s in scans], DEFAULT_SENSOR)
        np.testing.assert_allclose(other.mean_range, ref.mean_range, rtol=1e-9)
        np.testing.assert_allclose(other.std_range, ref.std_range, rtol=1e-6, atol=1e-9)


def test_csv(tmp_path):
    st_ = per_beam_stats(_random_images(0))
    path = tmp_path / "s.csv"
    st_.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# std_convention=population")
    rows = list(csv.reader(lines[1:]))
    assert rows[0] == ["row_index", "mean_range", "std_range", "occupied_fraction"]
    assert len(rows) == 1 + st_.height
    assert float(rows[3][1]) == st_.mean_range[2]


def test_empty_accumulator_is_neutral():
    imgs = _random_images(3)
    acc = accumulate(imgs)
    merged = finalize(RowAccumulator.empty(acc.count.shape[0]).merge(acc))
    np.testing.assert_allclose(merged.mean_range, finalize(acc).mean_range)
