import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hals import _fallback, kernels

compiled = pytest.importorskip("hals._kernels", reason="compiled core not built")


def test_backend_selection():
    assert kernels.BACKEND == ("python" if os.environ.get("HALS_PURE_PYTHON") == "1" else "cython")
    env = dict(os.environ, HALS_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import hals.kernels as k; print(k.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@settings(max_examples=30)
@given(st.integers(0, 2 ** 20), st.integers(0, 300), st.integers(1, 50))
def test_zbuffer_parity(seed, n, bins):
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, bins, n)
    r = rng.integers(1, 6, n).astype(float)  # many ties
    a = _fallback.zbuffer_winners(idx, r, bins)
    np.testing.assert_array_equal(a, compiled.zbuffer_winners(idx, r, bins))
    for b in range(bins):
        hit = np.flatnonzero(idx == b)
        if hit.size == 0:
            assert a[b] == -1
        else:
            assert a[b] == hit[np.argmin(r[hit])]


def scene(rng):
    boxes = np.column_stack([rng.uniform(-20, 20, (4, 2)), rng.uniform(0, 1, 4), rng.uniform(0.5, 4, (4, 3))])
    cyl = np.column_stack([rng.uniform(-20, 20, (3, 2)), np.zeros(3), rng.uniform(0.2, 1, 3), rng.uniform(1, 5, 3)])
    return boxes, cyl


@settings(max_examples=20)
@given(st.integers(0, 2 ** 20))
def test_raycast_parity(seed):
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(400, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    boxes, cyl = scene(rng)
    origin = np.array([0.0, 0.0, 1.73])
    for ground in (0.0, np.nan):
        a = _fallback.raycast(origin, dirs, 1.0, 80.0, ground, boxes, cyl)
        b = compiled.raycast(origin, dirs, 1.0, 80.0, ground, boxes, cyl)
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)
        assert np.all(np.isinf(a) | ((a > 1.0) & (a <= 80.0)))


@settings(max_examples=30)
@given(st.integers(0, 2 ** 20), st.integers(1, 40))
def test_assignment_parity(seed, n):
    from scipy.optimize import linear_sum_assignment
    rng = np.random.default_rng(seed)
    cost = rng.uniform(0, 10, (n, n))
    if seed % 3 == 0:
        cost = np.round(cost)  # degenerate ties
    a, b = _fallback.linear_assignment(cost), compiled.linear_assignment(cost)
    rows = np.arange(n)
    assert sorted(a) == list(range(n)) and sorted(b) == list(range(n))
    _, ref = linear_sum_assignment(cost)
    best = cost[rows, ref].sum()
    assert cost[rows, a].sum() == pytest.approx(best, abs=1e-9)
    assert cost[rows, b].sum() == pytest.approx(best, abs=1e-9)


def test_empty_inputs():
    for impl in (_fallback, compiled):
        assert impl.zbuffer_winners(np.empty(0, np.int64), np.empty(0), 3).tolist() == [-1, -1, -1]
        assert len(impl.linear_assignment(np.empty((0, 0)))) == 0
