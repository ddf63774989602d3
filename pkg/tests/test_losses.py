import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hals import losses as L
from hals.diffcore import Parameter, Tensor, grad_check
from hals.rangeimg import SensorModel

SENSOR = SensorModel(height=8, width=16, f_up=2.0, f_down=24.8, max_range=80.0, min_range=1.0)


def dense(rng, b=1, sensor=SENSOR):
    return np.stack([rng.uniform(5, 30, (b, sensor.height, sensor.width)),
                     rng.uniform(-1.7, 2.0, (b, sensor.height, sensor.width))], axis=1)


# -- L1 ---------------------------------------------------------------------------

def test_l1_examples(rng):
    gt = dense(rng)
    assert L.l1_range(Tensor(gt), gt).data == 0.0
    assert L.l1_range(Tensor(gt + 1.0), gt).data == pytest.approx(1.0)
    with pytest.raises(ValueError):
        L.l1_range(Tensor(gt[:, :1]), gt)


def test_l1_matches_loop(rng):
    gt, pred = dense(rng, 2), dense(rng, 2)
    gt[0, :, 0, :4] = 0.0
    acc = 0.0
    for idx in np.ndindex(gt.shape):
        acc += abs(pred[idx] - gt[idx])
    assert L.l1_range(Tensor(pred), gt).data == pytest.approx(acc / gt.size, rel=1e-6)
    occ = gt[:, :1] > 0
    masked = np.abs((pred - gt) * occ).sum() / (occ.sum() * 2)
    assert L.l1_range(Tensor(pred), gt, mask_empty=True).data == pytest.approx(masked, rel=1e-6)


def test_l1_channel_scale(rng):
    gt, pred = dense(rng), dense(rng)
    scale = np.array([80.0, 3.0])
    expect = np.mean(np.abs(pred - gt) * scale[None, :, None, None])
    assert L.l1_range(Tensor(pred), gt, channel_scale=scale).data == pytest.approx(expect, rel=1e-9)


# -- triplets ----------------------------------------------------------------------

def test_three_points_force_the_triple():
    gt = np.zeros((2, SENSOR.height, SENSOR.width))
    for r, c in [(1, 2), (4, 9), (6, 14)]:
        gt[0, r, c] = 10.0
    ts = L.sample_triplets(gt, 1, seed=0, sensor=SENSOR)
    assert sorted(ts.indices[0]) == [1 * 16 + 2, 4 * 16 + 9, 6 * 16 + 14]


def test_colinear_only_is_an_error():
    gt = np.zeros((2, SENSOR.height, SENSOR.width))
    gt[0, :, 0] = 10.0  # one column, constant z: points on a vertical-free line
    gt[1, :, 0] = 0.5
    with pytest.raises(ValueError):
        L.sample_triplets(gt, 5, seed=0, sensor=SENSOR)
    with pytest.raises(ValueError):
        L.sample_triplets(np.zeros_like(gt), 1, seed=0, sensor=SENSOR)


def test_triplets_are_valid_and_seeded(rng):
    gt = dense(rng)[0]
    gt[0, 3] = 0.0
    a = L.sample_triplets(gt, 50, seed=3, sensor=SENSOR)
    b = L.sample_triplets(gt, 50, seed=3, sensor=SENSOR)
    np.testing.assert_array_equal(a.indices, b.indices)
    assert a.indices.shape == (50, 3)
    assert np.all(gt[0].reshape(-1)[a.indices] > 0)
    assert np.all((a.indices[:, 0] != a.indices[:, 1]) & (a.indices[:, 1] != a.indices[:, 2]))
    assert L.default_k(500) == 50 and L.default_k(10 ** 6) == 3000 and L.default_k(3) == 1


def test_bin_frequency_is_uniform(rng):
    gt = dense(rng)[0]
    gt[0, ::2] = 0.0
    occ = np.flatnonzero(gt[0].reshape(-1) > 0)
    ts = L.sample_triplets(gt, 10000, seed=1, sensor=SENSOR)
    counts = np.bincount(ts.indices.reshape(-1), minlength=gt[0].size)[occ]
    p = 1.0 / occ.size
    n = ts.indices.size
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) < 3.5 * sigma)
    chi2 = ((counts - n * p) ** 2 / (n * p)).sum()
    dof = occ.size - 1
    assert chi2 < dof + 4 * np.sqrt(2 * dof)


# -- virtual normals ------------------------------------------------------------------

def test_unit_triangle_normal():
    p = np.array([[[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]])
    _, _, c, a = L._normals(p)
    np.testing.assert_array_equal(c / a[:, None], [[0, 0, 1]])


def test_vnl_identical_is_zero(rng):
    gt = dense(rng)
    ts = L.sample_batch_triplets(gt, SENSOR, 40, 0)
    assert L.vnl(Tensor(gt), gt, ts, SENSOR).data == 0.0


def oracle_vnl(pred, gt, idx, sensor):
    W = sensor.width
    phi = sensor.column_azimuths()
    total = 0.0
    for tri in idx:
        ns = []
        for img in (pred, gt):
            pts = [np.array([img[0].flat[i] * np.cos(phi[i % W]), img[0].flat[i] * np.sin(phi[i % W]),
                             img[1].flat[i]]) for i in tri]
            c = np.cross(pts[1] - pts[0], pts[2] - pts[0])
            ns.append(c / np.linalg.norm(c))
        total += np.abs(ns[0] - ns[1]).sum()
    return total / len(idx)


def test_vnl_matches_geometric_oracle(rng):
    gt = dense(rng)
    ts = L.sample_batch_triplets(gt, SENSOR, 30, 5)
    pred = gt.copy()
    i = ts[0].indices[0, 1]
    pred[0, 0].flat[i] += 0.7
    pred[0, 1].flat[i] -= 0.3
    got = L.vnl(Tensor(pred), gt, ts, SENSOR).data
    assert got > 0
    assert got == pytest.approx(oracle_vnl(pred[0], gt[0], ts[0].indices, SENSOR), abs=1e-6)


def test_degenerate_prediction_costs_constant(rng):
    gt = dense(rng)
    ts = L.sample_batch_triplets(gt, SENSOR, 20, 0)
    p = Parameter(np.zeros_like(gt))
    v = L.vnl(p, gt, ts, SENSOR)
    assert v.data == L.DEGENERATE_PENALTY
    v.backward()
    assert np.all(p.grad == 0)


def test_vnl_rejects_bad_inputs(rng):
    gt = dense(rng, 2)
    ts = L.sample_batch_triplets(gt, SENSOR, 10, 0)
    with pytest.raises(ValueError):
        L.vnl(Tensor(gt), gt, ts[:1], SENSOR)
    bad = gt.copy()
    bad[0, 0].flat[ts[0].indices[0, 0]] = 0.0
    with pytest.raises(ValueError):
        L.vnl(Tensor(gt), bad, ts, SENSOR)


@settings(max_examples=15)
@given(st.integers(0, 2 ** 20), st.floats(-3.0, 3.0))
def test_vnl_invariant_to_vertical_translation(seed, dz):
    rng = np.random.default_rng(seed)
    gt = dense(rng)
    pred = gt + rng.normal(0, 0.3, gt.shape)
    ts = L.sample_batch_triplets(gt, SENSOR, 30, seed)
    shift = np.array([0.0, dz])[None, :, None, None]
    a = L.vnl(Tensor(pred), gt, ts, SENSOR).data
    b = L.vnl(Tensor(pred + shift), gt + shift, ts, SENSOR).data
    assert a == pytest.approx(b, abs=1e-9)


@settings(max_examples=15)
@given(st.integers(0, 2 ** 20), st.sampled_from([4, 8, 12]))
def test_vnl_invariant_to_shared_quarter_turns(seed, k):
    # rolling columns by k rotates both clouds by k azimuth steps about z; the
    # L1 norm of a normal difference is only invariant for quarter turns
    rng = np.random.default_rng(seed)
    gt = dense(rng)
    pred = gt + rng.normal(0, 0.3, gt.shape)
    ts = L.sample_batch_triplets(gt, SENSOR, 30, seed)
    W = SENSOR.width
    rolled = [L.TripletSet((ts[0].indices // W) * W + (ts[0].indices % W + k) % W)]
    a = L.vnl(Tensor(pred), gt, ts, SENSOR).data
    b = L.vnl(Tensor(np.roll(pred, k, axis=-1)), np.roll(gt, k, axis=-1), rolled, SENSOR).data
    assert a == pytest.approx(b, abs=1e-9)


# -- total loss -------------------------------------------------------------------------

def test_total_is_sum_of_terms(rng):
    gt = dense(rng, 2)
    pred = gt + rng.normal(0, 0.2, gt.shape)
    terms = L.total_loss(Tensor(pred), gt, SENSOR, k=40, seed=9)
    l1 = L.l1_range(Tensor(pred), gt).data
    v = L.vnl(Tensor(pred), gt, L.sample_batch_triplets(gt, SENSOR, 40, 9), SENSOR).data
    assert terms.l1.data == l1 and terms.vnl.data == v
    assert terms.total.data == l1 + v
    assert L.total_loss(Tensor(gt), gt, SENSOR, k=40).total.data == 0.0


def test_normalised_loss_is_measured_in_metres(rng):
    gt = dense(rng)
    pred = gt + rng.normal(0, 0.2, gt.shape)
    norm = L.Normalizer(80.0, -2.0, 3.0)
    occ = np.ones(gt[:, 0].shape, bool)
    a = L.total_loss(Tensor(pred), gt, SENSOR, k=40, seed=2)
    b = L.total_loss(Tensor(norm.normalize(pred, occ)), norm.normalize(gt, occ), SENSOR, k=40,
                     seed=2, normalizer=norm)
    assert float(b.l1.data) == pytest.approx(float(a.l1.data), rel=1e-9)
    assert float(b.vnl.data) == pytest.approx(float(a.vnl.data), rel=1e-9)


@pytest.mark.parametrize("seed", range(3))
def test_total_loss_gradient(seed, rng):
    gt = dense(np.random.default_rng(seed))
    p = Parameter(gt + rng.normal(0, 0.3, gt.shape))
    assert grad_check(lambda: L.total_loss(p, gt, SENSOR, k=30, seed=seed).total, [p], eps=1e-4) < 1e-4


def test_normalizer_round_trip(rng):
    norm = L.Normalizer(80.0, -2.5, 3.5)
    polar = dense(rng, 3)
    occ = polar[:, 0] > 10
    n = norm.normalize(polar, occ)
    assert np.all(n[:, :, ~occ[0]][0] == 0) and np.all(np.abs(n) <= 1.0)
    back = norm.denormalize(n)
    np.testing.assert_allclose(back[:, :, occ[0]][0], polar[:, :, occ[0]][0], atol=1e-12)
    assert L.Normalizer.from_dict(norm.to_dict()) == norm
