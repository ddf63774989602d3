"""Synthetic scenes, a ray-cast lidar simulator, and the Velodyne ``.bin`` reader."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .rangeimg import ChannelMode, RangeImage, SensorModel, _channels_from_points

log = logging.getLogger(__name__)

DEFAULT_SENSOR = SensorModel(height=32, width=256, f_up=2.0, f_down=24.8,
                             max_range=80.0, min_range=1.0)
DEFAULT_SENSOR_HEIGHT = 1.73
SCENE_RADIUS = 60.0


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    extents: tuple[float, float, float]

    def __post_init__(self):
        if len(self.center) != 3 or len(self.extents) != 3:
            raise ValueError("box needs a 3D center and 3 extents")
        if not all(np.isfinite(self.center)) or not all(e > 0 and np.isfinite(e) for e in self.extents):
            raise ValueError(f"degenerate box {self}")


@dataclass(frozen=True)
class Cylinder:
    """Vertical cylinder; ``center`` is the centre of its base disc."""

    center: tuple[float, float, float]
    radius: float
    height: float

    def __post_init__(self):
        if len(self.center) != 3 or not all(np.isfinite(self.center)):
            raise ValueError(f"bad cylinder center {self.center}")
        if not (self.radius > 0 and self.height > 0 and np.isfinite(self.radius * self.height)):
            raise ValueError(f"degenerate cylinder {self}")


@dataclass(frozen=True)
class Scene:
    ground_z: float = 0.0
    boxes: tuple[Box, ...] = ()
    cylinders: tuple[Cylinder, ...] = ()
    rng_seed: int | None = None

    def __post_init__(self):
        if not np.isfinite(self.ground_z):
            raise ValueError("ground height must be finite")
        object.__setattr__(self, "boxes", tuple(self.boxes))
        object.__setattr__(self, "cylinders", tuple(self.cylinders))

    def box_array(self) -> np.ndarray:
        return np.array([[*b.center, *b.extents] for b in self.boxes], dtype=np.float64).reshape(-1, 6)

    def cylinder_array(self) -> np.ndarray:
        return np.array([[*c.center, c.radius, c.height] for c in self.cylinders],
                        dtype=np.float64).reshape(-1, 5)


@dataclass(frozen=True)
class ScanJob:
    scene: Scene
    sensor: SensorModel = DEFAULT_SENSOR
    sensor_origin: tuple[float, float, float] = (0.0, 0.0, DEFAULT_SENSOR_HEIGHT)

    def __post_init__(self):
        if self.sensor_origin[2] <= self.scene.ground_z:
            raise ValueError("sensor origin must be above the ground plane")


def ray_directions(sensor: SensorModel) -> np.ndarray:
    """Unit ray per bin, (H, W, 3), at bin-centre azimuth and row elevation."""
    theta = np.radians(sensor.row_elevations())[:, None]
    phi = sensor.column_azimuths()[None, :]
    return np.stack([np.cos(theta) * np.cos(phi),
                     np.cos(theta) * np.sin(phi),
                     np.sin(theta) * np.ones_like(phi)], axis=-1)


def raycast_scan(job: ScanJob, mode=ChannelMode.POLAR) -> RangeImage:
    """Cast one ray per bin and record the nearest hit.

    Returned points are expressed relative to the sensor origin.
    """
    mode = ChannelMode.parse(mode)
    sensor = job.sensor
    dirs = ray_directions(sensor).reshape(-1, 3)
    t = kernels.raycast(np.asarray(job.sensor_origin, dtype=np.float64), dirs,
                        sensor.min_range, sensor.max_range, job.scene.ground_z,
                        job.scene.box_array(), job.scene.cylinder_array())
    hit = np.isfinite(t)
    chans = np.zeros((mode.n_channels, dirs.shape[0]))
    if hit.any():
        pts = dirs[hit] * t[hit, None]
        if mode == ChannelMode.SPHERICAL:
            chans[:, hit] = t[hit][None]
        else:
            chans[:, hit] = _channels_from_points(pts, mode)
    H, W = sensor.height, sensor.width
    return RangeImage(chans.reshape(-1, H, W), hit.reshape(H, W), mode)


def random_scene(seed: int, difficulty: float = 1.0) -> Scene:
    """Ground plane plus seeded boxes and cylinders inside a 60 m disc.

    ``difficulty`` in [0, 1] scales the object count; 0 gives ground only.
    """
    rng = np.random.default_rng(seed)
    difficulty = float(np.clip(difficulty, 0.0, 1.0))
    if difficulty == 0.0:
        return Scene(ground_z=0.0, rng_seed=seed)
    n_boxes = int(round(3 + difficulty * rng.integers(0, 18)))
    n_cyl = int(round(difficulty * rng.integers(0, 11)))

    def place(min_dist):
        # uniform over the annulus area
        rad = np.sqrt(rng.uniform(min_dist ** 2, SCENE_RADIUS ** 2))
        ang = rng.uniform(-np.pi, np.pi)
        return rad * np.cos(ang), rad * np.sin(ang)

    boxes = []
    for _ in range(n_boxes):
        x, y = place(4.0)
        ext = (float(rng.uniform(0.5, 6.0)), float(rng.uniform(0.5, 6.0)), float(rng.uniform(0.8, 4.0)))
        boxes.append(Box((float(x), float(y), ext[2] / 2.0), ext))
    cylinders = []
    for _ in range(n_cyl):
        x, y = place(3.0)
        cylinders.append(Cylinder((float(x), float(y), 0.0),
                                  float(rng.uniform(0.1, 0.6)), float(rng.uniform(1.0, 6.0))))
    return Scene(ground_z=0.0, boxes=tuple(boxes), cylinders=tuple(cylinders), rng_seed=seed)


# -- scene files (key=value) -------------------------------------------------

def scene_to_text(scene: Scene) -> str:
    lines = [f"ground_z={scene.ground_z!r}"]
    if scene.rng_seed is not None:
        lines.append(f"rng_seed={scene.rng_seed}")
    for b in scene.boxes:
        lines.append("box=" + ",".join(repr(float(v)) for v in (*b.center, *b.extents)))
    for c in scene.cylinders:
        lines.append("cylinder=" + ",".join(repr(float(v)) for v in (*c.center, c.radius, c.height)))
    return "\n".join(lines) + "\n"


def scene_from_text(text: str) -> Scene:
    ground_z, seed, boxes, cyls = 0.0, None, [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key = key.strip()
        if key == "ground_z":
            ground_z = float(val)
        elif key == "rng_seed":
            seed = int(val)
        elif key in ("box", "cylinder"):
            nums = [float(x) for x in val.split(",")]
            if key == "box":
                if len(nums) != 6:
                    raise ValueError(f"line {lineno}: box needs 6 numbers")
                boxes.append(Box(tuple(nums[:3]), tuple(nums[3:])))
            else:
                if len(nums) != 5:
                    raise ValueError(f"line {lineno}: cylinder needs 5 numbers")
                cyls.append(Cylinder(tuple(nums[:3]), nums[3], nums[4]))
        else:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
    return Scene(ground_z=ground_z, boxes=tuple(boxes), cylinders=tuple(cyls), rng_seed=seed)


# -- Velodyne binary scans ---------------------------------------------------

@dataclass
class VelodyneScan:
    points: np.ndarray
    n_dropped_nan: int = 0
    reflectance: np.ndarray = field(default=None, repr=False)


def read_velodyne_bin(path) -> np.ndarray:
    """Read a KITTI-style ``.bin`` scan as an (N, 3) float64 array.

    Records are little-endian float32 (x, y, z, reflectance); reflectance is
    discarded and points with NaN coordinates are dropped with a warning.
    """
    return read_velodyne_scan(path).points


def read_velodyne_scan(path) -> VelodyneScan:
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise ValueError(f"{path}: size {len(raw)} is not a multiple of 16 bytes")
    rec = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    bad = ~np.all(np.isfinite(rec[:, :3]), axis=1)
    n_bad = int(bad.sum())
    if n_bad:
        log.warning("%s: dropped %d non-finite points", path, n_bad)
    good = rec[~bad]
    return VelodyneScan(good[:, :3].astype(np.float64), n_bad, good[:, 3].astype(np.float64))


def write_velodyne_bin(path, points, reflectance=None) -> None:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rec = np.zeros((len(pts), 4), dtype="<f4")
    rec[:, :3] = pts
    if reflectance is not None:
        rec[:, 3] = reflectance
    Path(path).write_bytes(rec.tobytes())
