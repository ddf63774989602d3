"""Per-beam range statistics over a dataset of range images."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .rangeimg import ChannelMode, RangeImage, SensorModel, convert_mode

STD_CONVENTION = "population"


@dataclass
class RowAccumulator:
    """Mergeable streaming mean/variance per row (Chan et al. pairwise update)."""

    count: np.ndarray
    mean: np.ndarray
    m2: np.ndarray
    bins: np.ndarray
    frames: int = 0

    @classmethod
    def empty(cls, height: int) -> "RowAccumulator":
        z = np.zeros(height)
        return cls(z.copy(), z.copy(), z.copy(), np.zeros(height), 0)

    def add_frame(self, ranges: np.ndarray, occupancy: np.ndarray) -> None:
        n_b = occupancy.sum(axis=1).astype(np.float64)
        safe = np.maximum(n_b, 1)
        mean_b = np.where(occupancy, ranges, 0.0).sum(axis=1) / safe
        dev = np.where(occupancy, ranges - mean_b[:, None], 0.0)
        m2_b = (dev * dev).sum(axis=1)
        self._merge(n_b, mean_b, m2_b)
        self.bins += occupancy.shape[1]
        self.frames += 1

    def _merge(self, n_b, mean_b, m2_b):
        n = self.count + n_b
        safe = np.where(n > 0, n, 1)
        delta = mean_b - self.mean
        self.mean = self.mean + delta * n_b / safe
        self.m2 = self.m2 + m2_b + delta * delta * self.count * n_b / safe
        self.count = n

    def merge(self, other: "RowAccumulator") -> "RowAccumulator":
        out = RowAccumulator(self.count.copy(), self.mean.copy(), self.m2.copy(),
                             self.bins + other.bins, self.frames + other.frames)
        out._merge(other.count, other.mean, other.m2)
        return out


@dataclass
class BeamStats:
    mean_range: np.ndarray
    std_range: np.ndarray
    occupied_fraction: np.ndarray
    frame_count: int
    std_convention: str = STD_CONVENTION

    @property
    def height(self) -> int:
        return len(self.mean_range)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# std_convention={self.std_convention} frames={self.frame_count}\n")
            w = csv.writer(fh)
            w.writerow(["row_index", "mean_range", "std_range", "occupied_fraction"])
            for i in range(self.height):
                w.writerow([i, repr(float(self.mean_range[i])), repr(float(self.std_range[i])),
                            repr(float(self.occupied_fraction[i]))])


def _spherical_ranges(image: RangeImage, sensor: SensorModel | None) -> np.ndarray:
    if image.mode == ChannelMode.SPHERICAL:
        return image.channels[0]
    if image.mode == ChannelMode.POLAR:
        return np.hypot(image.channels[0], image.channels[1])
    if sensor is None:
        return np.linalg.norm(image.channels, axis=0)
    return convert_mode(image, sensor, ChannelMode.SPHERICAL).channels[0]


def accumulate(dataset, sensor: SensorModel | None = None) -> RowAccumulator:
    acc = None
    shape = None
    for image in dataset:
        if shape is None:
            shape = image.shape
            acc = RowAccumulator.empty(shape[0])
        elif image.shape != shape:
            raise ValueError(f"mixed image dimensions: {shape} vs {image.shape}")
        acc.add_frame(_spherical_ranges(image, sensor), image.occupancy)
    if acc is None:
        raise ValueError("per-beam statistics need at least one image")
    return acc


def finalize(acc: RowAccumulator) -> BeamStats:
    occupied = acc.count > 0
    safe = np.where(occupied, acc.count, 1)
    std = np.sqrt(np.maximum(acc.m2 / safe, 0.0))
    return BeamStats(
        mean_range=np.where(occupied, acc.mean, 0.0),
        std_range=np.where(occupied, std, 0.0),
        occupied_fraction=acc.count / acc.bins,
        frame_count=acc.frames,
    )


def per_beam_stats(dataset, sensor: SensorModel | None = None) -> BeamStats:
    """Mean, population std and occupied fraction of range per row.

    Only occupied bins contribute. Images in any channel mode are reduced to
    spherical range first.
    """
    return finalize(accumulate(dataset, sensor))


def per_beam_stats_two_pass(dataset, sensor: SensorModel | None = None) -> BeamStats:
    """Reference implementation: stack everything, then mean and deviation."""
    images = list(dataset)
    if not images:
        raise ValueError("per-beam statistics need at least one image")
    r = np.stack([_spherical_ranges(im, sensor) for im in images])
    occ = np.stack([im.occupancy for im in images])
    H = r.shape[1]
    mean = np.zeros(H)
    std = np.zeros(H)
    for v in range(H):
        vals = r[:, v][occ[:, v]]
        if vals.size:
            mean[v] = vals.mean()
            std[v] = np.sqrt(np.mean((vals - mean[v]) ** 2))
    frac = occ.sum(axis=(0, 2)) / (occ.shape[0] * occ.shape[2])
    return BeamStats(mean, std, frac, len(images))


def empty_bin_fraction(dataset) -> float:
    empty = 0
    total = 0
    for image in dataset:
        empty += int((~image.occupancy).sum())
        total += image.occupancy.size
    if total == 0:
        raise ValueError("empty dataset")
    return empty / total
