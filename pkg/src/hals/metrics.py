"""Evaluation metrics between generated and ground-truth scans."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import kernels
from .rangeimg import ChannelMode, RangeImage, SensorModel, as_cloud, convert_mode, unproject

EXACT_EMD_LIMIT = 4096
DEFAULT_VOXEL = 0.1
CHAMFER_CONVENTION = "sum_of_mean_squared_nn"
EMD_CONVENTION = "mean_matched_distance"
VOXEL_GRID_CONVENTION = "anchored_at_gt_bbox_min"


@dataclass
class EMDResult:
    mean: float
    total: float
    n: int
    approx: bool


def _nonempty(*clouds):
    for c in clouds:
        if len(c) == 0:
            raise ValueError("metric needs non-empty point clouds")


def _equalize(a, b, seed):
    rng = np.random.default_rng(seed)
    if len(a) > len(b):
        a = a[np.sort(rng.choice(len(a), len(b), replace=False))]
    elif len(b) > len(a):
        b = b[np.sort(rng.choice(len(b), len(a), replace=False))]
    return a, b


def _exact_emd(a, b):
    cost = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
    cols = kernels.linear_assignment(cost)
    return float(cost[np.arange(len(a)), cols].sum())


def emd_detail(a, b, seed: int = 0, exact_limit: int = EXACT_EMD_LIMIT) -> EMDResult:
    """Optimal one-to-one matching cost between two clouds.

    The larger cloud is subsampled (seeded) to the smaller size. Up to
    ``exact_limit`` points the matching is exact; beyond that both clouds are
    sorted by azimuth and matched block by block.
    """
    a, b = as_cloud(a), as_cloud(b)
    _nonempty(a, b)
    a, b = _equalize(a, b, seed)
    n = len(a)
    if n <= exact_limit:
        total = _exact_emd(a, b)
        return EMDResult(total / n, total, n, False)
    n_blocks = -(-n // exact_limit)
    oa = np.argsort(np.arctan2(a[:, 1], a[:, 0]), kind="stable")
    ob = np.argsort(np.arctan2(b[:, 1], b[:, 0]), kind="stable")
    total = 0.0
    for ia, ib in zip(np.array_split(oa, n_blocks), np.array_split(ob, n_blocks)):
        total += _exact_emd(a[ia], b[ib])
    return EMDResult(total / n, total, n, True)


def emd(a, b, seed: int = 0) -> float:
    return emd_detail(a, b, seed).mean


def chamfer(a, b) -> float:
    """Mean squared NN distance A->B plus mean squared NN distance B->A."""
    a, b = as_cloud(a), as_cloud(b)
    _nonempty(a, b)
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return float(np.mean(da * da) + np.mean(db * db))


def _ranges(img, sensor):
    if isinstance(img, RangeImage):
        if img.mode == ChannelMode.SPHERICAL:
            return img.channels[0]
        if img.mode == ChannelMode.POLAR:
            return np.hypot(img.channels[0], img.channels[1])
        return convert_mode(img, sensor, ChannelMode.SPHERICAL).channels[0]
    return np.asarray(img, dtype=np.float64)


def mae_rmse(q_pred, q_gt, sensor: SensorModel | None = None, mask_empty: bool = False):
    """MAE and RMSE of spherical range over bins (empty bins count as r = 0)."""
    rp, rg = _ranges(q_pred, sensor), _ranges(q_gt, sensor)
    if rp.shape != rg.shape:
        raise ValueError(f"shape mismatch: {rp.shape} vs {rg.shape}")
    diff = rp - rg
    if mask_empty:
        occ = q_gt.occupancy if isinstance(q_gt, RangeImage) else rg > 0
        diff = diff[occ]
    return float(np.mean(np.abs(diff))), float(np.sqrt(np.mean(diff * diff)))


@dataclass
class VoxelScores:
    iou: float
    precision: float
    recall: float
    f1: float
    n_pred: int
    n_gt: int
    n_common: int


def voxel_scores(pred, gt, voxel_size: float = DEFAULT_VOXEL) -> VoxelScores:
    """Occupancy overlap on a grid anchored at the GT bounding-box minimum.

    Predicted points outside the GT box still occupy (non-GT) voxels.
    """
    if not voxel_size > 0:
        raise ValueError(f"voxel size must be positive, got {voxel_size}")
    pred, gt = as_cloud(pred), as_cloud(gt)
    if len(gt) == 0:
        raise ValueError("ground truth cloud is empty")
    origin = gt.min(axis=0)

    def cells(p):
        if len(p) == 0:
            return np.empty((0, 3), dtype=np.int64)
        return np.unique(np.floor((p - origin) / voxel_size).astype(np.int64), axis=0)

    vp, vg = cells(pred), cells(gt)
    common = _count_common(vp, vg)
    n_p, n_g = len(vp), len(vg)
    union = n_p + n_g - common
    precision = common / n_p if n_p else 0.0
    recall = common / n_g
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return VoxelScores(common / union, precision, recall, f1, n_p, n_g, common)


def _count_common(a, b):
    if len(a) == 0 or len(b) == 0:
        return 0
    both = np.concatenate([a, b])
    _, counts = np.unique(both, axis=0, return_counts=True)
    return int((counts == 2).sum())


@dataclass
class MetricReport:
    emd: float
    emd_sum: float
    emd_approx: bool
    cd: float
    mae: float
    rmse: float
    iou: float
    precision: float
    recall: float
    f1: float
    n_pred: int
    n_gt: int
    n_emd: int
    voxels_pred: int
    voxels_gt: int

    COLUMNS = ("frame", "emd", "emd_sum", "emd_approx", "cd", "mae", "rmse", "iou", "precision",
               "recall", "f1", "n_pred", "n_gt", "n_emd", "voxels_pred", "voxels_gt")

    def row(self, frame: str) -> list:
        d = asdict(self)
        return [frame] + [d[c] for c in self.COLUMNS[1:]]


def evaluate_pair(pred_img: RangeImage, gt_img: RangeImage, sensor: SensorModel, *,
                  pred_cloud=None, gt_cloud=None, voxel_size: float = DEFAULT_VOXEL,
                  seed: int = 0, drop_threshold: float | None = None) -> MetricReport:
    kw = {} if drop_threshold is None else {"drop_threshold": drop_threshold}
    pc = unproject(pred_img, sensor, **kw) if pred_cloud is None else as_cloud(pred_cloud)
    gc = unproject(gt_img, sensor, **kw) if gt_cloud is None else as_cloud(gt_cloud)
    e = emd_detail(pc, gc, seed)
    mae, rmse = mae_rmse(pred_img, gt_img, sensor)
    v = voxel_scores(pc, gc, voxel_size)
    return MetricReport(e.mean, e.total, e.approx, chamfer(pc, gc), mae, rmse,
                        v.iou, v.precision, v.recall, v.f1, len(pc), len(gc), e.n,
                        v.n_pred, v.n_gt)


def aggregate(reports: list[MetricReport]) -> dict:
    if not reports:
        raise ValueError("nothing to aggregate")
    d = {c: float(np.mean([getattr(r, c) for r in reports])) for c in MetricReport.COLUMNS[1:]}
    d["count"] = len(reports)
    return d


def write_report_csv(path, rows: list[tuple[str, MetricReport]]) -> dict:
    agg = aggregate([r for _, r in rows])
    with open(path, "w", newline="") as fh:
        fh.write(f"# emd={EMD_CONVENTION} cd={CHAMFER_CONVENTION} voxel_grid={VOXEL_GRID_CONVENTION}"
                 f" count={agg['count']}\n")
        w = csv.writer(fh)
        w.writerow(MetricReport.COLUMNS)
        for name, r in rows:
            w.writerow(r.row(name))
        w.writerow(["MEAN"] + [agg[c] for c in MetricReport.COLUMNS[1:]])
    return agg
