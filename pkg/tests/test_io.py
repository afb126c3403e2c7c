import json

import numpy as np
import pytest

from racestack import io as rio
from racestack.errors import FormatError
from racestack.geometry import planar_from_pose, pose_from_planar
from racestack.odometry import LaserScan
from racestack.planning import build_trajectory, sample_waypoints
from racestack.sim import SensorConfig, TrackSpec, generate_track, simulate_lidar
from racestack.trackmap import MappedCone, TrackMap
from racestack.vision import ConeColor, HogGeometry, ImagePatch, LinearSvmModel


@pytest.fixture(scope="module")
def world():
    return generate_track(TrackSpec.reference())


def _same_scan(a, b):
    assert a.n_layers == b.n_layers and a.timestamp == b.timestamp
    for (p, q), (i, j) in zip(zip(a.layers, b.layers), zip(a.azimuth_index, b.azimuth_index)):
        assert np.array_equal(p, q) and np.array_equal(i, j)


@pytest.mark.parametrize("binary", [False, True])
def test_scan_round_trip(tmp_path, world, binary):
    scan = simulate_lidar(world.start, world, SensorConfig(), seed=2, step=1, timestamp=0.1)
    path = tmp_path / "s.scan"
    rio.write_scan(path, scan, binary=binary)
    _same_scan(scan, rio.read_scan(path))


def test_scan_with_empty_layer(tmp_path):
    scan = LaserScan([np.zeros((0, 3)), np.array([[1.0, 0.2, 0.3]])], 1.5, [np.zeros(0, int), np.array([4])])
    for binary in (False, True):
        rio.write_scan(tmp_path / "e", scan, binary=binary)
        _same_scan(scan, rio.read_scan(tmp_path / "e"))


def test_binary_scan_trailing_bytes(tmp_path, world):
    path = tmp_path / "s.bin"
    rio.write_scan(path, simulate_lidar(world.start, world, SensorConfig()), binary=True)
    with open(path, "ab") as f:
        f.write(b"\0")
    with pytest.raises(FormatError):
        rio.read_scan(path)


def test_trackmap_round_trip(tmp_path, world):
    tm = rio.world_to_trackmap(world)
    tm.lap_count = 1
    tm.cones[0] = MappedCone(tm.cones[0].position, ConeColor.UNKNOWN, 7)
    rio.write_trackmap(tmp_path / "m", tm)
    back = rio.read_trackmap(tmp_path / "m")
    assert back.closed and back.lap_count == 1
    assert planar_from_pose(back.start_pose) == pytest.approx(planar_from_pose(tm.start_pose), abs=1e-12)
    assert [c.color for c in back.cones] == [c.color for c in tm.cones]
    assert [c.observation_count for c in back.cones] == [c.observation_count for c in tm.cones]
    assert np.array_equal(np.array([c.position for c in back.cones]), np.array([c.position for c in tm.cones]))


def test_empty_trackmap_round_trip(tmp_path):
    rio.write_trackmap(tmp_path / "m", TrackMap())
    back = rio.read_trackmap(tmp_path / "m")
    assert back.cones == [] and back.start_pose is None and not back.closed


def test_track_round_trip(tmp_path):
    spec = TrackSpec.reference(seed=5)
    rio.write_track(tmp_path / "t", spec)
    back = rio.read_track(tmp_path / "t")
    assert np.array_equal(back.control_points, np.asarray(spec.control_points, float))
    assert (back.width, back.cone_spacing, back.seed, back.cone_jitter, back.scenery) == \
        (spec.width, spec.cone_spacing, spec.seed, spec.cone_jitter, spec.scenery)
    assert np.array_equal(generate_track(back).cones, generate_track(spec).cones)


@pytest.mark.parametrize("closed", [True, False])
def test_waypoints_round_trip(tmp_path, closed):
    pts = np.array([[0, 0], [10, 1], [20, -2], [30, 4], [35, 12]], float)
    wps = sample_waypoints(build_trajectory(pts, closed=closed), 0.7)
    rio.write_waypoints(tmp_path / "w.csv", wps, closed)
    back = rio.read_waypoints(tmp_path / "w.csv")
    assert back.closed == closed
    for a, b in zip(wps, back.to_waypoints()):
        assert (a.x, a.y, a.heading, a.curvature, a.s) == (b.x, b.y, b.heading, b.curvature, b.s)


def test_svm_round_trip(tmp_path):
    g = HogGeometry()
    rng = np.random.default_rng(0)
    model = LinearSvmModel(rng.normal(size=g.descriptor_length()), 0.123, geometry=g)
    rio.write_svm(tmp_path / "m.svm", model)
    back = rio.read_svm(tmp_path / "m.svm")
    assert np.array_equal(back.w, model.w) and back.b == model.b and back.geometry == g


def test_svm_truncated(tmp_path):
    g = HogGeometry()
    rio.write_svm(tmp_path / "m.svm", LinearSvmModel(np.ones(g.descriptor_length()), 0.0, geometry=g))
    lines = (tmp_path / "m.svm").read_text().splitlines()[:-3]
    (tmp_path / "m.svm").write_text("\n".join(lines) + "\n")
    with pytest.raises(FormatError):
        rio.read_svm(tmp_path / "m.svm")


@pytest.mark.parametrize("mode,shape", [("hsv", (5, 4, 3)), ("gray", (6, 3))])
def test_patch_round_trip(tmp_path, mode, shape):
    data = np.random.default_rng(1).uniform(size=shape)
    rio.write_patch(tmp_path / "p", ImagePatch(data, mode))
    back = rio.read_patch(tmp_path / "p")
    assert back.mode == mode and np.array_equal(back.data, data)


def test_step_log_round_trip(tmp_path):
    row = {k: 0.1 * i for i, k in enumerate(rio.STEP_FIELDS)}
    row.update(mode="DetectionDrive", iterations=80, lap=1)
    rio.write_step_log(tmp_path / "s.csv", [row, dict(row, t=5.0)])
    back = rio.read_step_log(tmp_path / "s.csv")
    assert len(back) == 2 and back[0]["mode"] == "DetectionDrive"
    assert all(back[0][k] == pytest.approx(row[k], abs=0) for k in rio.STEP_FIELDS if k != "mode")
    assert back[1]["t"] == 5.0


def test_state_log_has_header(tmp_path):
    rio.write_state_log(tmp_path / "l", ["0.00 AS Off -> AS Ready"])
    assert (tmp_path / "l").read_text().splitlines()[0] == rio.header("statelog")


def test_report_round_trip_and_nonfinite(tmp_path):
    rio.write_report(tmp_path / "r.json", {"a": np.float64(1.5), "b": [np.int64(3), float("nan")]})
    doc = rio.read_report(tmp_path / "r.json")
    assert doc["a"] == 1.5 and doc["b"] == [3, None] and doc["format_version"] == rio.VERSION
    bad = dict(doc, format_version=rio.VERSION + 1)
    (tmp_path / "r.json").write_text(json.dumps(bad))
    with pytest.raises(FormatError):
        rio.read_report(tmp_path / "r.json")


def test_config_round_trip(tmp_path):
    vals = {"controller": "pure_pursuit", "mpc.N": "15", "seed": "4"}
    rio.write_config(tmp_path / "c.cfg", vals)
    assert rio.read_config(tmp_path / "c.cfg") == vals


def test_config_comments_and_errors(tmp_path):
    (tmp_path / "c").write_text("# note\nseed = 3  # trailing\n\n lap1_speed=2.5\n")
    assert rio.read_config(tmp_path / "c") == {"seed": "3", "lap1_speed": "2.5"}
    (tmp_path / "c").write_text("seed 3\n")
    with pytest.raises(FormatError):
        rio.read_config(tmp_path / "c")


@pytest.mark.parametrize("reader,kind", [
    (rio.read_trackmap, "trackmap"), (rio.read_waypoints, "waypoints"), (rio.read_svm, "svm"),
    (rio.read_patch, "patch"), (rio.read_step_log, "steplog"), (rio.read_track, "track"), (rio.read_scan, "scan"),
])
def test_version_and_kind_checked(tmp_path, reader, kind):
    path = tmp_path / "f"
    path.write_text(f"# racestack-{kind} v{rio.VERSION + 1}\n")
    with pytest.raises(FormatError, match="version"):
        reader(path)
    other = "svm" if kind != "svm" else "patch"
    path.write_text(f"# racestack-{other} v{rio.VERSION}\n")
    with pytest.raises(FormatError):
        reader(path)


def test_empty_file_rejected(tmp_path):
    (tmp_path / "e").write_text("")
    with pytest.raises(FormatError):
        rio.read_trackmap(tmp_path / "e")


def test_pose_precision_survives(tmp_path):
    tm = TrackMap(start_pose=pose_from_planar(1 / 3, -2 / 7, 0.1234567890123))
    rio.write_trackmap(tmp_path / "m", tm)
    assert planar_from_pose(rio.read_trackmap(tmp_path / "m").start_pose) == \
        pytest.approx(planar_from_pose(tm.start_pose), abs=1e-15)
