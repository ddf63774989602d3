import numpy as np
import pytest

from hals.beamstats import per_beam_stats
from hals.rangeimg import ChannelMode, SensorModel, float32_exact, project, unproject
from hals.synthscan import (DEFAULT_SENSOR, DEFAULT_SENSOR_HEIGHT, SCENE_RADIUS, Box, Cylinder, Scene,
                            ScanJob, random_scene, raycast_scan, read_velodyne_bin, read_velodyne_scan,
                            scene_from_text, scene_to_text, write_velodyne_bin)

AHEAD = SensorModel(3, 9, 5.0, 15.0, 80.0, 0.0, elevation_table=(3.0, 0.0, -10.0))
COL0 = 4  # W = 9: column 4 is centred on azimuth 0


def test_ground_hit_matches_ray_plane_oracle():
    img = raycast_scan(ScanJob(Scene(), AHEAD), ChannelMode.SPHERICAL)
    expected = DEFAULT_SENSOR_HEIGHT / np.sin(np.radians(10.0))
    assert abs(img.channels[0, 2, COL0] - expected) < 1e-9
    assert abs(expected - 9.962) < 1e-3
    assert not img.occupancy[:2].any()  # level and upward beams see sky


def test_box_entry_face():
    box = Box((10.0, 0.0, DEFAULT_SENSOR_HEIGHT), (1.0, 1.0, 1.0))
    img = raycast_scan(ScanJob(Scene(boxes=(box,)), AHEAD), ChannelMode.SPHERICAL)
    assert abs(img.channels[0, 1, COL0] - 9.5) < 1e-12


def test_cylinder_hit():
    cyl = Cylinder((10.0, 0.0, 0.0), 1.0, 5.0)
    img = raycast_scan(ScanJob(Scene(cylinders=(cyl,)), AHEAD), ChannelMode.SPHERICAL)
    assert abs(img.channels[0, 1, COL0] - 9.0) < 1e-12


def test_ties_go_to_earlier_primitive():
    a = Box((10.0, 0.0, DEFAULT_SENSOR_HEIGHT), (1.0, 1.0, 1.0))
    b = Box((10.0, 0.0, DEFAULT_SENSOR_HEIGHT), (1.0, 3.0, 1.0))
    for order in ((a, b), (b, a)):
        img = raycast_scan(ScanJob(Scene(boxes=order), AHEAD), ChannelMode.SPHERICAL)
        assert img.channels[0, 1, COL0] == 9.5


def test_max_range_leaves_bin_empty():
    far = SensorModel(3, 9, 5.0, 15.0, 5.0, 0.0, elevation_table=(3.0, 0.0, -10.0))
    img = raycast_scan(ScanJob(Scene(), far), ChannelMode.SPHERICAL)
    assert not img.occupancy.any()


def test_ground_only_ranges_per_beam():
    img = raycast_scan(ScanJob(Scene(), DEFAULT_SENSOR), ChannelMode.SPHERICAL)
    el = DEFAULT_SENSOR.row_elevations()
    for v in range(DEFAULT_SENSOR.height):
        row = img.channels[0, v]
        if el[v] >= 0:
            assert not img.occupancy[v].any()
            continue
        r = DEFAULT_SENSOR_HEIGHT / np.sin(np.radians(-el[v]))
        if r > DEFAULT_SENSOR.max_range:
            assert not img.occupancy[v].any()
        else:
            np.testing.assert_allclose(row, r, atol=1e-6)


def test_ground_only_mean_range_grows_toward_horizon():
    scans = [raycast_scan(ScanJob(random_scene(s, difficulty=0.0), DEFAULT_SENSOR)) for s in range(100)]
    st = per_beam_stats(scans, DEFAULT_SENSOR)
    seen = st.mean_range[st.occupied_fraction > 0]
    assert len(seen) > 5
    assert np.all(np.diff(seen[::-1]) > 0)  # bottom row first


def test_scan_is_self_consistent():
    sensor = DEFAULT_SENSOR
    img = float32_exact(raycast_scan(ScanJob(random_scene(11), sensor)))
    again = float32_exact(project(unproject(img, sensor, 0.0), sensor, ChannelMode.POLAR))
    assert again == img


def test_random_scene_contract():
    assert random_scene(0) == random_scene(0)
    assert random_scene(0) != random_scene(1)
    empty = random_scene(5, difficulty=0.0)
    assert empty.boxes == () and empty.cylinders == ()
    for seed in range(30):
        sc = random_scene(seed)
        assert 3 <= len(sc.boxes) <= 20 and 0 <= len(sc.cylinders) <= 10
        centres = np.array([b.center[:2] for b in sc.boxes] + [c.center[:2] for c in sc.cylinders])
        assert np.all(np.hypot(centres[:, 0], centres[:, 1]) <= SCENE_RADIUS)


def test_scene_text_round_trip():
    sc = random_scene(7)
    assert scene_from_text(scene_to_text(sc)) == sc


@pytest.mark.parametrize("make", [
    lambda: Box((0, 0, 0), (1, 0, 1)),
    lambda: Box((0, 0, np.inf), (1, 1, 1)),
    lambda: Cylinder((0, 0, 0), 0.0, 1.0),
    lambda: Cylinder((0, 0, 0), 1.0, -1.0),
    lambda: ScanJob(Scene(ground_z=2.0), DEFAULT_SENSOR, (0, 0, 1.0)),
])
def test_degenerate_primitives_rejected(make):
    with pytest.raises(ValueError):
        make()


def test_scan_determinism():
    job = ScanJob(random_scene(3), DEFAULT_SENSOR)
    assert raycast_scan(job) == raycast_scan(job)


# -- velodyne ----------------------------------------------------------------------

def test_velodyne_two_points(tmp_path):
    path = tmp_path / "a.bin"
    path.write_bytes(np.array([[1, 2, 3, 0.5], [4, 5, 6, 0.1]], "<f4").tobytes())
    np.testing.assert_array_equal(read_velodyne_bin(path), [[1, 2, 3], [4, 5, 6]])


def test_velodyne_truncated(tmp_path):
    path = tmp_path / "b.bin"
    path.write_bytes(b"\x00" * 17)
    with pytest.raises(ValueError):
        read_velodyne_bin(path)


def test_velodyne_nan_dropped(tmp_path, caplog):
    path = tmp_path / "c.bin"
    path.write_bytes(np.array([[1, 2, 3, 0], [np.nan, 0, 0, 0]], "<f4").tobytes())
    scan = read_velodyne_scan(path)
    assert scan.n_dropped_nan == 1 and len(scan.points) == 1
    assert "dropped 1 non-finite" in caplog.text


def test_velodyne_write_read(tmp_path, rng):
    pts = rng.normal(size=(50, 3)).astype(np.float32).astype(np.float64)
    write_velodyne_bin(tmp_path / "d.bin", pts)
    assert (tmp_path / "d.bin").stat().st_size == 50 * 16
    np.testing.assert_array_equal(read_velodyne_bin(tmp_path / "d.bin"), pts)
