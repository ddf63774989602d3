"""Finite-difference self checks for every differentiable piece.

Each suite builds small float64 graphs from a seed and returns a mapping of
check name to the worst relative error seen.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import Parameter, Tensor, grad_check
from .halsgen import GeneratorConfig, HeightAwareGenerator
from .losses import Normalizer, total_loss
from .rangeimg import SensorModel

TOLERANCE = 1e-4
# central-difference truncation error through the deep toy graphs is ~1e-4
# relative at a 1e-3 step; 1e-4 keeps it two orders below the tolerance
STEP = 1e-4
LEVELS = ("ops", "generator", "loss")

TOY_GENERATOR = GeneratorConfig(in_channels=2, features=8, blocks=4, split=2, rate=2)
TOY_LR_SHAPE = (1, 2, 4, 8)


def _param(rng, *shape, scale=1.0):
    return Parameter(rng.normal(0.0, scale, size=shape))


def _projected(t: Tensor, rng) -> Tensor:
    # random weights so every output entry carries a distinct gradient
    return dc.sum_all(dc.mul(t, Tensor(rng.normal(size=t.shape))))


def op_cases(seed: int) -> dict:
    """name -> (fn, params) for one instance of every operator."""
    rng = np.random.default_rng(seed)
    shape = (2, 3, 4, 5)
    a, b = _param(rng, *shape), _param(rng, *shape)
    c1 = _param(rng, 2, 1, 4, 5)
    w3, b3 = _param(rng, 4, 3, 3, 3, scale=0.3), _param(rng, 4)
    w1, b1 = _param(rng, 5, 3, 1, 1), _param(rng, 5)
    sh = _param(rng, 2, 4, 3, 5)
    mult, off = rng.uniform(0.5, 2.0, 3), rng.normal(size=3)
    rows = rng.integers(0, shape[2], size=7)

    def proj(i, t):
        return _projected(t, np.random.default_rng([seed, i]))

    def pair():
        m1, m2 = dc.softmax_pair(a, b)
        return dc.add(proj(1, m1), proj(2, m2))

    return {
        "add": (lambda: proj(0, dc.add(a, c1)), [a, c1]),
        "neg": (lambda: proj(0, dc.neg(a)), [a]),
        "mul": (lambda: proj(0, dc.mul(a, c1)), [a, c1]),
        "scale": (lambda: proj(0, dc.scale(a, -1.7)), [a]),
        "affine_channels": (lambda: proj(0, dc.affine_channels(a, mult, off)), [a]),
        "abs": (lambda: proj(0, dc.abs_(a)), [a]),
        "sum_all": (lambda: dc.sum_all(dc.square(a)), [a]),
        "mean_all": (lambda: dc.mean_all(dc.square(a)), [a]),
        "square": (lambda: proj(0, dc.square(a)), [a]),
        "leaky_relu": (lambda: proj(0, dc.leaky_relu(a, 0.2)), [a]),
        "softmax_pair": (pair, [a, b]),
        "slice_channels": (lambda: proj(0, dc.slice_channels(a, 1, 3)), [a]),
        "concat_channels": (lambda: proj(0, dc.concat_channels([a, c1, b])), [a, b, c1]),
        "vertical_pixel_shuffle": (lambda: proj(0, dc.vertical_pixel_shuffle(sh, 2)), [sh]),
        "vertical_pixel_unshuffle": (lambda: proj(0, dc.vertical_pixel_unshuffle(a, 2)), [a]),
        "gather_rows": (lambda: proj(0, dc.gather_rows(a, rows)), [a]),
        "conv2d": (lambda: proj(0, dc.conv2d(a, w3, b3, 1)), [a, w3, b3]),
        "conv2d_dilated": (lambda: proj(0, dc.conv2d(a, w3, b3, 2)), [a, w3, b3]),
        "pointwise_mlp": (lambda: proj(0, dc.pointwise_mlp(a, w1, b1)), [a, w1, b1]),
    }


def check_ops(seed: int, tol: float = TOLERANCE) -> dict[str, float]:
    return {name: grad_check(fn, params, eps=STEP, tol=tol, seed=seed)
            for name, (fn, params) in op_cases(seed).items()}


def check_generator(seed: int, tol: float = TOLERANCE, max_coords: int = 3) -> dict[str, float]:
    """End to end through both branches, the masks and the fused output."""
    rng = np.random.default_rng(seed)
    gen = HeightAwareGenerator(TOY_GENERATOR, seed=seed).astype(np.float64)
    x = Parameter(rng.normal(size=TOY_LR_SHAPE))
    B, C, H, W = TOY_LR_SHAPE
    hr = (B, C, H * TOY_GENERATOR.rate, W)
    r_fused, r_mask = rng.normal(size=hr), rng.normal(size=(B, 1) + hr[2:])

    def fn():
        out = gen(x)
        return dc.add(dc.sum_all(dc.mul(out.q_fused, Tensor(r_fused))),
                      dc.sum_all(dc.mul(out.m_shallow, Tensor(r_mask))))

    err = grad_check(fn, gen.parameters() + [x], eps=STEP, tol=tol, max_coords=max_coords, seed=seed)
    return {"generator": err}


LOSS_SENSOR = SensorModel(height=8, width=16, f_up=2.0, f_down=24.8, max_range=80.0, min_range=1.0)


def loss_case(seed: int):
    """A dense ground truth and a perturbed prediction on a small sensor, in metres."""
    rng = np.random.default_rng(seed)
    s = LOSS_SENSOR
    gt = np.stack([rng.uniform(5.0, 30.0, (s.height, s.width)),
                   rng.uniform(-1.7, 2.0, (s.height, s.width))])[None]
    gt[:, :, 0, :3] = 0.0  # a few empty bins
    pred = gt + rng.normal(0.0, 0.3, gt.shape)
    return gt, pred


def check_loss(seed: int, tol: float = TOLERANCE) -> dict[str, float]:
    """L1 + VNL, on metres directly and through the normaliser."""
    gt, pred = loss_case(seed)
    norm = Normalizer(LOSS_SENSOR.max_range, -2.0, 3.0)
    occ = gt[:, 0] > 0
    gt_n, pred_n = norm.normalize(gt, occ), norm.normalize(pred, np.ones_like(occ))
    k = 40
    p_m, p_n = Parameter(pred.copy()), Parameter(pred_n.copy())

    def metres():
        return total_loss(p_m, gt, LOSS_SENSOR, k=k, seed=seed).total

    def normalised():
        return total_loss(p_n, gt_n, LOSS_SENSOR, k=k, seed=seed, normalizer=norm).total

    def vnl_only():
        return total_loss(p_m, gt, LOSS_SENSOR, k=k, seed=seed).vnl

    return {"total_loss": grad_check(metres, [p_m], eps=STEP, tol=tol, seed=seed),
            # normalised units are ~80x smaller than metres, so is the step
            "total_loss_normalised": grad_check(normalised, [p_n], eps=STEP / 10, tol=tol, seed=seed),
            "vnl": grad_check(vnl_only, [p_m], eps=STEP, tol=tol, seed=seed)}


SUITES = {"ops": check_ops, "generator": check_generator, "loss": check_loss}


def run(levels=LEVELS, seeds=range(20), tol: float = TOLERANCE) -> dict[str, float]:
    """Worst error per check over all seeds."""
    worst: dict[str, float] = {}
    for level in levels:
        suite = SUITES[level]
        for seed in seeds:
            for name, err in suite(seed, tol=tol).items():
                worst[name] = max(worst.get(name, 0.0), err)
    return worst
