"""Compiled core vs numpy fallback on the three hot kernels.

Usage: python3 benchmarks/bench_kernels.py [--repeat N] [--quick]

Each case runs both backends on identical inputs, asserts identical
results and reports the best-of-N wall time.
"""

import argparse
import time

import numpy as np

from hals import _fallback
from hals.rangeimg import as_cloud
from hals.synthscan import DEFAULT_SENSOR, ScanJob, random_scene, ray_directions

try:
    from hals import _kernels
except ImportError:
    _kernels = None


def _best(fn, repeat):
    best = np.inf
    out = None
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def cases(quick: bool):
    rng = np.random.default_rng(0)
    n_pts = 20_000 if quick else 120_000
    h, w = DEFAULT_SENSOR.height, DEFAULT_SENSOR.width
    flat = rng.integers(0, h * w, n_pts)
    ranges = rng.uniform(1, 80, n_pts)
    yield f"zbuffer_winners n={n_pts}", lambda k: k.zbuffer_winners(flat, ranges, h * w)

    job = ScanJob(random_scene(3), DEFAULT_SENSOR)
    dirs = ray_directions(DEFAULT_SENSOR).reshape(-1, 3)
    origin = np.asarray(job.sensor_origin, dtype=np.float64)
    scene = job.scene
    args = (origin, dirs, DEFAULT_SENSOR.min_range, DEFAULT_SENSOR.max_range, scene.ground_z,
            scene.box_array(), scene.cylinder_array())
    yield f"raycast rays={len(dirs)}", lambda k: k.raycast(*args)

    for n in ((100, 400) if quick else (200, 800, 1500)):
        a, b = as_cloud(rng.normal(size=(n, 3))), as_cloud(rng.normal(size=(n, 3)))
        cost = np.linalg.norm(a[:, None] - b[None], axis=2)
        yield f"linear_assignment n={n}", lambda k, c=cost: k.linear_assignment(c)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--quick", action="store_true")
    args = ap.parse_args()
    if _kernels is None:
        print("compiled core not built; only the fallback is available")
    print(f"{'kernel':32s} {'python s':>10s} {'cython s':>10s} {'speedup':>8s}")
    for name, run in cases(args.quick):
        tp, rp = _best(lambda: run(_fallback), args.repeat)
        if _kernels is None:
            print(f"{name:32s} {tp:10.4f} {'-':>10s} {'-':>8s}")
            continue
        tc, rc = _best(lambda: run(_kernels), args.repeat)
        if not np.array_equal(np.asarray(rp), np.asarray(rc)):
            raise SystemExit(f"{name}: backends disagree")
        print(f"{name:32s} {tp:10.4f} {tc:10.4f} {tp / tc:7.1f}x")


if __name__ == "__main__":
    main()
