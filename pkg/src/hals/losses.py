"""Training objective: per-bin L1 on polar channels plus the virtual normal loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .rangeimg import SensorModel

COLINEAR_AREA = 1e-4
DEGENERATE_AREA = 1e-8
# |n_hat - n|_1 is at most 2 per axis for unit vectors
DEGENERATE_PENALTY = 6.0
MAX_TRIPLETS = 3000


@dataclass
class Normalizer:
    """Maps polar (d, z) in metres to the bounded values the generator regresses.

    Empty bins map to (0, 0) in normalised space.
    """

    max_range: float
    z_min: float
    z_max: float

    @property
    def mult(self) -> np.ndarray:
        return np.array([self.max_range, self.z_max - self.z_min])

    @property
    def offset(self) -> np.ndarray:
        return np.array([0.0, self.z_min])

    def normalize(self, polar: np.ndarray, occupancy: np.ndarray) -> np.ndarray:
        """(…, 2, H, W) metres -> normalised, zero outside ``occupancy``."""
        shape = [1] * polar.ndim
        shape[-3] = 2
        out = (polar - self.offset.reshape(shape)) / self.mult.reshape(shape)
        return np.where(np.expand_dims(occupancy, -3), out, 0.0)

    def denormalize(self, polar_n: np.ndarray) -> np.ndarray:
        shape = [1] * polar_n.ndim
        shape[-3] = 2
        return polar_n * self.mult.reshape(shape) + self.offset.reshape(shape)

    def denormalize_tensor(self, t: Tensor) -> Tensor:
        return dc.affine_channels(t, self.mult, self.offset)

    def to_dict(self) -> dict:
        return {"norm_max_range": self.max_range, "norm_z_min": self.z_min, "norm_z_max": self.z_max}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(float(d["norm_max_range"]), float(d["norm_z_min"]), float(d["norm_z_max"]))


@dataclass
class TripletSet:
    """K triples of flat bin indices (row * W + col) into one image."""

    indices: np.ndarray
    eps_col: float = COLINEAR_AREA
    seed: int | None = None

    @property
    def k(self) -> int:
        return len(self.indices)


def default_k(n_occupied: int) -> int:
    return max(1, min(MAX_TRIPLETS, n_occupied // 10))


def polar_points(d: np.ndarray, z: np.ndarray, phi: np.ndarray) -> np.ndarray:
    return np.stack([d * np.cos(phi), d * np.sin(phi), z], axis=-1)


def _triangle_area(p: np.ndarray) -> np.ndarray:
    c = np.cross(p[..., 1, :] - p[..., 0, :], p[..., 2, :] - p[..., 0, :])
    return 0.5 * np.linalg.norm(c, axis=-1)


def sample_triplets(q_gt: np.ndarray, k: int | None, seed: int, sensor: SensorModel,
                    eps_col: float = COLINEAR_AREA) -> TripletSet:
    """Draw K triples of distinct occupied bins whose GT points are not colinear.

    ``q_gt`` is a (2, H, W) polar image in metres; bins with d > 0 count as
    occupied. Candidates are drawn uniformly and rejected until K survive.
    """
    d, z = q_gt[0], q_gt[1]
    occ = np.flatnonzero(d.reshape(-1) > 0)
    if occ.size < 3:
        raise ValueError(f"need at least 3 occupied bins, found {occ.size}")
    if k is None:
        k = default_k(occ.size)
    W = d.shape[1]
    phi_all = sensor.column_azimuths()
    pts_all = polar_points(d.reshape(-1)[occ], z.reshape(-1)[occ], phi_all[occ % W])
    rng = np.random.default_rng(seed)
    budget = 100 * k
    found = []
    n_found = 0
    draws = 0
    while n_found < k:
        if draws >= budget:
            raise ValueError(f"found only {n_found} non-colinear triples of {k} in {budget} draws")
        batch = min(budget - draws, max(2 * (k - n_found), 64))
        cand = rng.integers(0, occ.size, size=(batch, 3))
        draws += batch
        distinct = (cand[:, 0] != cand[:, 1]) & (cand[:, 0] != cand[:, 2]) & (cand[:, 1] != cand[:, 2])
        cand = cand[distinct]
        good = cand[_triangle_area(pts_all[cand]) > eps_col]
        take = good[:k - n_found]
        found.append(take)
        n_found += len(take)
    return TripletSet(occ[np.concatenate(found)], eps_col, seed)


def l1_range(q_pred: Tensor, q_gt, mask_empty: bool = False, channel_scale=None) -> Tensor:
    """Mean absolute difference over every entry (empty bins included by default).

    ``channel_scale`` multiplies the per-channel difference first, e.g. to
    measure normalised predictions in metres.
    """
    gt = np.asarray(q_gt, dtype=q_pred.dtype)
    if q_pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {q_pred.shape} vs {gt.shape}")
    diff = dc.add(q_pred, Tensor(-gt))
    if channel_scale is not None:
        diff = dc.affine_channels(diff, channel_scale, np.zeros(len(channel_scale)))
    if not mask_empty:
        return dc.mean_all(dc.abs_(diff))
    occ = (np.abs(gt).sum(axis=1, keepdims=True) > 0).astype(gt.dtype)
    n = max(float(occ.sum()) * gt.shape[1], 1.0)
    return dc.scale(dc.sum_all(dc.abs_(dc.mul(diff, Tensor(occ)))), 1.0 / n)


def _normals(p):
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    c = np.cross(e1, e2)
    a = np.linalg.norm(c, axis=1)
    return e1, e2, c, a


def vnl(q_pred: Tensor, q_gt, triplets, sensor: SensorModel) -> Tensor:
    """Mean L1 distance between unit normals of corresponding triangles.

    ``q_pred`` (B, 2, H, W) and ``q_gt`` are polar images in metres;
    ``triplets`` holds one TripletSet per batch item. Predicted triangles with
    area below 1e-8 m^2 contribute a constant 6 with zero gradient.
    """
    gt = np.asarray(q_gt, dtype=np.float64)
    if q_pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {q_pred.shape} vs {gt.shape}")
    if isinstance(triplets, TripletSet):
        triplets = [triplets]
    B, _, H, W = q_pred.shape
    if len(triplets) != B:
        raise ValueError(f"{len(triplets)} triplet sets for batch of {B}")
    phi_all = sensor.column_azimuths()
    pred = q_pred.data
    total = 0.0
    saved = []
    for b, ts in enumerate(triplets):
        idx = ts.indices
        gd, gz = gt[b, 0].reshape(-1)[idx], gt[b, 1].reshape(-1)[idx]
        if np.any(gd <= 0):
            raise ValueError("triplet references an empty ground-truth bin")
        phi = phi_all[idx % W]
        _, _, c_gt, a_gt = _normals(polar_points(gd, gz, phi))
        n_gt = c_gt / a_gt[:, None]
        pd = pred[b, 0].reshape(-1)[idx].astype(np.float64)
        pz = pred[b, 1].reshape(-1)[idx].astype(np.float64)
        e1, e2, c, a = _normals(polar_points(pd, pz, phi))
        degen = 0.5 * a < DEGENERATE_AREA
        safe_a = np.where(degen, 1.0, a)
        n_hat = c / safe_a[:, None]
        per = np.where(degen, DEGENERATE_PENALTY, np.abs(n_hat - n_gt).sum(axis=1))
        total += per.mean()
        saved.append((idx, phi, e1, e2, n_hat, n_gt, safe_a, degen))
    value = total / B

    def back(g):
        grad = np.zeros(pred.shape, dtype=np.float64)
        for b, (idx, phi, e1, e2, n_hat, n_gt, a, degen) in enumerate(saved):
            k = len(idx)
            gn = np.sign(n_hat - n_gt) * (float(g) / (B * k))
            gn[degen] = 0.0
            # d n / d c = (I - n n^T) / |c|
            gc = (gn - n_hat * (gn * n_hat).sum(axis=1, keepdims=True)) / a[:, None]
            ge1 = np.cross(e2, gc)
            ge2 = np.cross(gc, e1)
            gp = np.stack([-ge1 - ge2, ge1, ge2], axis=1)
            cos, sin = np.cos(phi), np.sin(phi)
            g_d = gp[..., 0] * cos + gp[..., 1] * sin
            g_z = gp[..., 2]
            np.add.at(grad[b, 0].reshape(-1), idx.reshape(-1), g_d.reshape(-1))
            np.add.at(grad[b, 1].reshape(-1), idx.reshape(-1), g_z.reshape(-1))
        return (grad.astype(pred.dtype),)

    return Tensor(np.asarray(value, dtype=q_pred.dtype), (q_pred,), "vnl", back)


@dataclass
class LossTerms:
    total: Tensor
    l1: Tensor
    vnl: Tensor


def sample_batch_triplets(gt_metres: np.ndarray, sensor: SensorModel, k: int | None, seed: int):
    return [sample_triplets(gt_metres[b], k, seed + 7919 * b, sensor) for b in range(gt_metres.shape[0])]


def total_loss(q_pred: Tensor, q_gt, sensor: SensorModel, k: int | None = None, seed: int = 0,
               normalizer: Normalizer | None = None, mask_empty: bool = False) -> LossTerms:
    """L1 on polar (d, z) plus VNL on the corresponding 3D points, both in metres.

    Without a ``normalizer`` both images are polar metres. With one, they are
    normalised: the L1 differences are rescaled to metres and the points are
    mapped back to metres before the normals are formed.
    """
    gt = np.asarray(q_gt, dtype=np.float64)
    scale_m = None if normalizer is None else normalizer.mult
    l1 = l1_range(q_pred, gt, mask_empty, scale_m)
    if normalizer is None:
        pred_m, gt_m = q_pred, gt
    else:
        pred_m = normalizer.denormalize_tensor(q_pred)
        occ = gt[:, :1] > 0
        gt_m = np.where(occ, normalizer.denormalize(gt), 0.0)
    trip = sample_batch_triplets(gt_m, sensor, k, seed)
    v = vnl(pred_m, gt_m, trip, sensor)
    return LossTerms(dc.add(l1, v), l1, v)
