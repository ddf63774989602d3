"""Point cloud <-> range image conversion.

Row 0 is the highest beam; columns run from azimuth +pi (column 0) clockwise
to -pi. Channels are stored channel-first, ``(C, H, W)``, so a batch of
images stacks directly into the generator's ``(B, C, H, W)`` layout.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import kernels

DEFAULT_DROP_THRESHOLD = 0.3

MAGIC = b"HALS"
CONTAINER_VERSION = 1
_HEADER = struct.Struct("<4sHIIIB")


class ChannelMode(enum.IntEnum):
    SPHERICAL = 0
    POLAR = 1
    CARTESIAN = 2

    @property
    def n_channels(self) -> int:
        return (1, 2, 3)[self.value]

    @classmethod
    def parse(cls, value) -> "ChannelMode":
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            return cls[value.upper()]
        return cls(int(value))


@dataclass(frozen=True)
class SensorModel:
    """Lidar geometry: beams (rows), azimuth bins (columns), vertical FOV.

    Angles are in degrees. ``elevation_table`` optionally lists one elevation
    per beam, strictly decreasing (row 0 highest); when absent the beams are
    spaced uniformly over the FOV.
    """

    height: int
    width: int
    f_up: float
    f_down: float
    max_range: float = 120.0
    min_range: float = 0.0
    elevation_table: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.height < 2:
            raise ValueError(f"sensor needs at least 2 beams, got H={self.height}")
        if self.width < 4:
            raise ValueError(f"sensor needs at least 4 azimuth bins, got W={self.width}")
        if self.f_up < 0 or self.f_down < 0 or self.fov <= 0:
            raise ValueError(f"invalid vertical FOV: f_up={self.f_up}, f_down={self.f_down}")
        if not self.max_range > 0 or self.min_range < 0 or self.min_range >= self.max_range:
            raise ValueError(f"invalid range limits [{self.min_range}, {self.max_range}]")
        if self.elevation_table is not None:
            table = tuple(float(t) for t in self.elevation_table)
            object.__setattr__(self, "elevation_table", table)
            if len(table) != self.height:
                raise ValueError(
                    f"elevation table has {len(table)} entries, sensor has {self.height} beams")
            if any(b >= a for a, b in zip(table, table[1:])):
                raise ValueError("elevation table must be strictly decreasing")
            if table[0] > self.f_up or table[-1] < -self.f_down:
                raise ValueError("elevation table leaves the vertical FOV")

    @property
    def fov(self) -> float:
        return self.f_up + self.f_down

    def row_elevations(self) -> np.ndarray:
        """Elevation (degrees) each row is unprojected at."""
        if self.elevation_table is not None:
            return np.asarray(self.elevation_table, dtype=np.float64)
        v = np.arange(self.height, dtype=np.float64)
        return self.f_up - (v + 0.5) * self.fov / self.height

    def row_edges(self) -> np.ndarray:
        """H+1 decreasing band boundaries in degrees."""
        if self.elevation_table is None:
            k = np.arange(self.height + 1, dtype=np.float64)
            return self.f_up - k * self.fov / self.height
        t = np.asarray(self.elevation_table)
        return np.concatenate([[self.f_up], 0.5 * (t[1:] + t[:-1]), [-self.f_down]])

    def column_azimuths(self) -> np.ndarray:
        """Bin-centre azimuth (radians) of each column."""
        u = np.arange(self.width, dtype=np.float64)
        return np.pi * (1.0 - 2.0 * (u + 0.5) / self.width)

    def columns_for(self, azimuth: np.ndarray) -> np.ndarray:
        u = np.floor(0.5 * (1.0 - azimuth / np.pi) * self.width).astype(np.int64)
        return np.mod(u, self.width)

    def rows_for(self, elevation_deg: np.ndarray) -> np.ndarray:
        """Row index for in-FOV elevations (floored, clamped to [0, H-1])."""
        elevation_deg = np.asarray(elevation_deg, dtype=np.float64)
        if self.elevation_table is None:
            v = np.floor((1.0 - (elevation_deg + self.f_down) / self.fov) * self.height)
        else:
            # band k is (edges[k+1], edges[k]]; searchsorted on ascending edges
            asc = -self.row_edges()
            v = np.searchsorted(asc, -elevation_deg, side="right") - 1
        return np.clip(v, 0, self.height - 1).astype(np.int64)

    def downsampled(self, rate: int) -> "SensorModel":
        """Sensor whose beams are rows {0, rate, 2*rate, ...} of this one."""
        if rate < 2 or self.height % rate:
            raise ValueError(f"cannot keep every {rate}th beam of H={self.height}")
        table = tuple(self.row_elevations()[::rate])
        return replace(self, height=self.height // rate, elevation_table=table)


@dataclass
class RangeImage:
    """Range image with channel-first values and an occupancy mask."""

    channels: np.ndarray
    occupancy: np.ndarray
    mode: ChannelMode = ChannelMode.SPHERICAL

    def __post_init__(self):
        self.mode = ChannelMode.parse(self.mode)
        self.channels = np.asarray(self.channels, dtype=np.float64)
        self.occupancy = np.asarray(self.occupancy, dtype=bool)
        c = self.mode.n_channels
        if self.channels.ndim != 3 or self.channels.shape[0] != c:
            raise ValueError(
                f"{self.mode.name} image needs shape ({c}, H, W), got {self.channels.shape}")
        if self.occupancy.shape != self.channels.shape[1:]:
            raise ValueError("occupancy mask does not match channel grid")

    @property
    def height(self) -> int:
        return self.channels.shape[1]

    @property
    def width(self) -> int:
        return self.channels.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.channels.shape[1], self.channels.shape[2]

    def copy(self) -> "RangeImage":
        return RangeImage(self.channels.copy(), self.occupancy.copy(), self.mode)

    def check(self) -> None:
        """Raise if empty bins are non-zero or occupied bins lack a positive range."""
        if np.any(self.channels[:, ~self.occupancy] != 0):
            raise ValueError("empty bins must hold exactly zero")
        if self.mode != ChannelMode.CARTESIAN and np.any(self.channels[0][self.occupancy] <= 0):
            raise ValueError("occupied bins need a positive range")

    @classmethod
    def from_dense(cls, channels, mode, threshold=DEFAULT_DROP_THRESHOLD) -> "RangeImage":
        """Wrap raw (e.g. generated) channels; bins with primary range <= threshold become empty."""
        mode = ChannelMode.parse(mode)
        channels = np.array(channels, dtype=np.float64)
        if mode == ChannelMode.CARTESIAN:
            occ = np.hypot(channels[0], channels[1]) > threshold
        else:
            occ = channels[0] > threshold
        channels[:, ~occ] = 0.0
        return cls(channels, occ, mode)

    def __eq__(self, other):
        if not isinstance(other, RangeImage):
            return NotImplemented
        return (self.mode == other.mode
                and self.channels.shape == other.channels.shape
                and np.array_equal(self.channels, other.channels)
                and np.array_equal(self.occupancy, other.occupancy))


@dataclass
class ProjectionStats:
    n_input: int
    n_projected: int
    n_occluded: int
    n_dropped_fov: int
    n_dropped_range: int
    n_empty_bins: int


def as_cloud(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"point cloud must be (N, 3), got {pts.shape}")
    return pts


def _channels_from_points(pts: np.ndarray, mode: ChannelMode) -> np.ndarray:
    if mode == ChannelMode.SPHERICAL:
        return np.linalg.norm(pts, axis=1)[None]
    if mode == ChannelMode.POLAR:
        return np.stack([np.hypot(pts[:, 0], pts[:, 1]), pts[:, 2]])
    return pts.T.copy()


def project_with_stats(cloud, sensor: SensorModel, mode=ChannelMode.SPHERICAL):
    """Project a cloud and report where every input point went."""
    mode = ChannelMode.parse(mode)
    pts = as_cloud(cloud)
    n = len(pts)
    if n == 0:
        raise ValueError("cannot project an empty point cloud")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point cloud contains non-finite coordinates")
    r = np.linalg.norm(pts, axis=1)
    in_range = (r > sensor.min_range) & (r <= sensor.max_range)
    with np.errstate(invalid="ignore", divide="ignore"):
        elev = np.degrees(np.arcsin(np.clip(pts[:, 2] / r, -1.0, 1.0)))
    in_fov = in_range & (elev <= sensor.f_up) & (elev >= -sensor.f_down)
    keep = np.flatnonzero(in_fov)

    H, W = sensor.height, sensor.width
    u = sensor.columns_for(np.arctan2(pts[keep, 1], pts[keep, 0]))
    v = sensor.rows_for(elev[keep])
    winners = kernels.zbuffer_winners(v * W + u, r[keep], H * W)
    occ_flat = winners >= 0
    src = keep[winners[occ_flat]]

    chans = np.zeros((mode.n_channels, H * W))
    chans[:, occ_flat] = _channels_from_points(pts[src], mode)
    image = RangeImage(chans.reshape(-1, H, W), occ_flat.reshape(H, W), mode)
    n_proj = int(occ_flat.sum())
    stats = ProjectionStats(
        n_input=n,
        n_projected=n_proj,
        n_occluded=len(keep) - n_proj,
        n_dropped_fov=int((in_range & ~in_fov).sum()),
        n_dropped_range=int((~in_range).sum()),
        n_empty_bins=H * W - n_proj,
    )
    return image, stats


def project(cloud, sensor: SensorModel, mode=ChannelMode.SPHERICAL) -> RangeImage:
    """Spherical projection keeping the nearest point per bin."""
    return project_with_stats(cloud, sensor, mode)[0]


def _check_dims(image: RangeImage, sensor: SensorModel) -> None:
    if image.shape != (sensor.height, sensor.width):
        raise ValueError(
            f"image is {image.height}x{image.width}, sensor is {sensor.height}x{sensor.width}")


def bin_points(image: RangeImage, sensor: SensorModel) -> np.ndarray:
    """3D point for every bin, (3, H, W); empty bins give meaningless values."""
    _check_dims(image, sensor)
    phi = sensor.column_azimuths()[None, :]
    ch = image.channels
    if image.mode == ChannelMode.CARTESIAN:
        return ch.copy()
    if image.mode == ChannelMode.POLAR:
        d, z = ch[0], ch[1]
        return np.stack([d * np.cos(phi), d * np.sin(phi), z])
    theta = np.radians(sensor.row_elevations())[:, None]
    r = ch[0]
    return np.stack([r * np.cos(theta) * np.cos(phi),
                     r * np.cos(theta) * np.sin(phi),
                     r * np.sin(theta) * np.ones_like(phi)])


def unproject(image: RangeImage, sensor: SensorModel,
              drop_threshold: float = DEFAULT_DROP_THRESHOLD) -> np.ndarray:
    """One point per occupied bin whose range exceeds ``drop_threshold``.

    Points come out in row-major bin order.
    """
    xyz = bin_points(image, sensor)
    if image.mode == ChannelMode.CARTESIAN:
        primary = np.hypot(xyz[0], xyz[1])
    else:
        primary = image.channels[0]
    keep = image.occupancy & (primary >= drop_threshold)
    return xyz[:, keep].T.copy()


def downsample_rows(image: RangeImage, rate: int) -> RangeImage:
    """Keep rows {0, rate, 2*rate, ...}."""
    if not isinstance(rate, (int, np.integer)) or rate < 2:
        raise ValueError(f"downsampling rate must be an integer >= 2, got {rate!r}")
    if image.height % rate:
        raise ValueError(f"H={image.height} is not divisible by rate {rate}")
    return RangeImage(image.channels[:, ::rate].copy(), image.occupancy[::rate].copy(), image.mode)


def convert_mode(image: RangeImage, sensor: SensorModel, target) -> RangeImage:
    target = ChannelMode.parse(target)
    if target == image.mode:
        return image.copy()
    if image.mode == ChannelMode.POLAR and target == ChannelMode.SPHERICAL:
        r = np.hypot(image.channels[0], image.channels[1])[None]
    else:
        xyz = bin_points(image, sensor)
        r = None
    if r is None:
        flat = xyz.reshape(3, -1).T
        r = _channels_from_points(flat, target).reshape(target.n_channels, *image.shape)
    out = np.where(image.occupancy[None], r, 0.0)
    return RangeImage(out, image.occupancy.copy(), target)


# -- container file ---------------------------------------------------------

def to_bytes(image: RangeImage) -> bytes:
    H, W = image.shape
    C = image.mode.n_channels
    head = _HEADER.pack(MAGIC, CONTAINER_VERSION, H, W, C, int(image.mode))
    body = np.ascontiguousarray(image.channels.transpose(1, 2, 0), dtype="<f4").tobytes()
    return head + body + image.occupancy.astype(np.uint8).tobytes()


def from_bytes(data: bytes) -> RangeImage:
    if len(data) < _HEADER.size:
        raise ValueError("truncated range-image container")
    magic, version, H, W, C, mode = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != CONTAINER_VERSION:
        raise ValueError(f"unsupported container version {version}")
    mode = ChannelMode(mode)
    if C != mode.n_channels:
        raise ValueError(f"{mode.name} container declares {C} channels")
    n_vals = H * W * C
    expected = _HEADER.size + 4 * n_vals + H * W
    if len(data) != expected:
        raise ValueError(f"container is {len(data)} bytes, expected {expected}")
    off = _HEADER.size
    vals = np.frombuffer(data, dtype="<f4", count=n_vals, offset=off)
    occ = np.frombuffer(data, dtype=np.uint8, count=H * W, offset=off + 4 * n_vals)
    chans = vals.reshape(H, W, C).transpose(2, 0, 1).astype(np.float64)
    return RangeImage(chans, occ.reshape(H, W).astype(bool), mode)


def save_range_image(path, image: RangeImage) -> None:
    Path(path).write_bytes(to_bytes(image))


def load_range_image(path) -> RangeImage:
    return from_bytes(Path(path).read_bytes())


def float32_exact(image: RangeImage) -> RangeImage:
    """Round channels to float32 precision, the container's storage precision."""
    return RangeImage(image.channels.astype(np.float32).astype(np.float64),
                      image.occupancy.copy(), image.mode)


def sensor_to_dict(sensor: SensorModel) -> dict:
    d = {
        "height": sensor.height, "width": sensor.width,
        "f_up": sensor.f_up, "f_down": sensor.f_down,
        "max_range": sensor.max_range, "min_range": sensor.min_range,
    }
    if sensor.elevation_table is not None:
        d["elevation_table"] = ",".join(repr(float(t)) for t in sensor.elevation_table)
    return d


def sensor_from_dict(d: dict) -> SensorModel:
    table = d.get("elevation_table")
    if isinstance(table, str):
        table = tuple(float(t) for t in table.split(",") if t.strip())
    return SensorModel(
        height=int(d["height"]), width=int(d["width"]),
        f_up=float(d["f_up"]), f_down=float(d["f_down"]),
        max_range=float(d.get("max_range", 120.0)),
        min_range=float(d.get("min_range", 0.0)),
        elevation_table=table,
    )
