import math

import numpy as np
import pytest

from racestack.control import ControlInput, VehicleParams, VehicleState, integrate
from racestack.errors import InvalidInputError, InvalidTrackError
from racestack.geometry import planar_from_pose
from racestack.harness import train_cone_classifier
from racestack.sim import (
    CameraConfig,
    GpsConfig,
    LidarConfig,
    SensorConfig,
    TrackSpec,
    WorldGroundTruth,
    feature_rich_loop,
    generate_track,
    simulate_camera_patch,
    simulate_gps_ins,
    simulate_lidar,
    step_plant,
)
from racestack.vision import ConeColor, classify_color, hog_features, svm_predict

NOISE_FREE = LidarConfig(range_noise=0.0)


def _single_cone_world(x, y=0.0):
    return WorldGroundTruth(np.array([[x, y]]), [ConeColor.BLUE], None, (0.0, 0.0, 0.0))


def _to_map(points, pose, h=NOISE_FREE.mount_height):
    # sensor frame (forward, down, left) to map (x, y, up)
    x, y, yaw = pose
    c, s = math.cos(yaw), math.sin(yaw)
    return np.column_stack([x + points[:, 0] * c - points[:, 2] * s, y + points[:, 0] * s + points[:, 2] * c,
                            h - points[:, 1]])


def test_circle_cone_radii():
    w = generate_track(TrackSpec.circle(20.0, scenery=False))
    r = np.hypot(*w.cones.T)
    # counter-clockwise circle, so the left (red) row is the inner one
    left = np.array([c is ConeColor.RED for c in w.colors])
    right = np.array([c is ConeColor.BLUE for c in w.colors])
    assert left.sum() > 10 and right.sum() > 10
    assert np.allclose(r[left], 18.0, atol=1e-6)
    assert np.allclose(r[right], 22.0, atol=1e-6)


def test_cone_pair_count():
    R = 200.0 / (2 * math.pi)
    w = generate_track(TrackSpec.circle(R, cone_spacing=5.0, scenery=False))
    assert abs(len(w.cones) / 2 - 40) <= 1


def test_colours_by_side():
    w = generate_track(TrackSpec.reference())
    for p, c in zip(w.cones, w.colors):
        off = w.lateral_offset(*p)
        assert abs(abs(off) - w.width / 2) < 0.05
        if c is ConeColor.RED:
            assert off > 0
        elif c is ConeColor.BLUE:
            assert off < 0
    yellow = [p for p, c in zip(w.cones, w.colors) if c is ConeColor.YELLOW]
    assert len(yellow) == 2
    sx, sy, _ = w.start
    assert all(math.hypot(p[0] - sx, p[1] - sy) == pytest.approx(2.0, abs=1e-6) for p in yellow)


def test_same_seed_identical():
    a = generate_track(TrackSpec.reference(seed=3))
    b = generate_track(TrackSpec.reference(seed=3))
    assert np.array_equal(a.cones, b.cones) and np.array_equal(a.cylinders, b.cylinders)
    assert a.colors == b.colors


def test_invalid_tracks():
    t = np.linspace(0, 2 * np.pi, 40, endpoint=False)
    eight = np.column_stack([30 * np.sin(t), 15 * np.sin(2 * t)])
    with pytest.raises(InvalidTrackError):
        generate_track(TrackSpec(eight))
    with pytest.raises(InvalidTrackError):
        TrackSpec.circle(20.0, width=1.0)
    with pytest.raises(InvalidTrackError):
        TrackSpec.circle(20.0, cone_spacing=0.0)


def test_flat_ground_returns(backend):
    w = WorldGroundTruth(np.zeros((0, 2)), [], None, (0.0, 0.0, 0.0))
    scan = simulate_lidar((0.0, 0.0, 0.0), w, NOISE_FREE)
    pts = scan.points()
    assert len(pts) > 0
    assert np.allclose(pts[:, 1], NOISE_FREE.mount_height, atol=1e-9)
    noisy = simulate_lidar((0.0, 0.0, 0.0), w, LidarConfig(range_noise=0.02), seed=1).points()
    r = np.linalg.norm(pts, axis=1)
    rn = np.linalg.norm(noisy, axis=1)
    assert len(rn) == len(r)
    assert np.std(rn - r) == pytest.approx(0.02, rel=0.1)


def test_cone_ahead_cluster(backend):
    w = _single_cone_world(5.0)
    scan = simulate_lidar((0.0, 0.0, 0.0), w, NOISE_FREE)
    pts = scan.points()
    on_cone = pts[pts[:, 1] < NOISE_FREE.mount_height - 1e-6]
    assert len(on_cone) >= 3
    # analytic check: each hit is on the cylinder side at a height inside the cone
    m = _to_map(on_cone, (0.0, 0.0, 0.0))
    assert np.allclose(np.hypot(m[:, 0] - 5.0, m[:, 1]), w.cone_radius, atol=1e-9)
    assert np.all((m[:, 2] >= -1e-9) & (m[:, 2] <= w.cone_height + 1e-9))
    assert np.all(np.abs(on_cone[:, 0] - (5.0 - w.cone_radius)) < w.cone_radius + 1e-9)


def test_far_cone_vertical_gap(backend):
    scan = simulate_lidar((0.0, 0.0, 0.0), _single_cone_world(40.0), NOISE_FREE)
    pts = scan.points()
    assert np.sum(pts[:, 1] < NOISE_FREE.mount_height - 1e-6) <= 2


def _segment_distance(m, ax, ay, bx, by):
    d = np.array([bx - ax, by - ay])
    t = np.clip(((m[:, 0] - ax) * d[0] + (m[:, 1] - ay) * d[1]) / (d @ d), 0.0, 1.0)
    return np.hypot(m[:, 0] - ax - t * d[0], m[:, 1] - ay - t * d[1])


@pytest.mark.parametrize("scene", ["reference", "walled"])
def test_returns_on_world_surfaces(backend, scene):
    w = generate_track(TrackSpec.reference()) if scene == "reference" else feature_rich_loop()
    pose = w.start
    m = _to_map(simulate_lidar(pose, w, NOISE_FREE).points(), pose)
    resid = np.abs(m[:, 2])  # ground
    for cx, cy, r, z0, z1 in w.solids():
        d = np.abs(np.hypot(m[:, 0] - cx, m[:, 1] - cy) - r)
        inside = (m[:, 2] >= z0 - 1e-9) & (m[:, 2] <= z1 + 1e-9)
        resid = np.minimum(resid, np.where(inside, d, np.inf))
    for ax, ay, bx, by, z0, z1 in w.walls.reshape(-1, 6):
        inside = (m[:, 2] >= z0 - 1e-9) & (m[:, 2] <= z1 + 1e-9)
        resid = np.minimum(resid, np.where(inside, _segment_distance(m, ax, ay, bx, by), np.inf))
    assert len(m) > 1000
    assert np.all(resid < 1e-9)


def test_scan_deterministic():
    w = generate_track(TrackSpec.reference())
    a = simulate_lidar(w.start, w, SensorConfig(), seed=4, step=9)
    b = simulate_lidar(w.start, w, SensorConfig(), seed=4, step=9)
    assert np.array_equal(a.points(), b.points())


def test_gps_exact_and_dropout():
    s = VehicleState(x=3.0, y=-2.0, psi=0.4)
    g = simulate_gps_ins(s, GpsConfig(pos_noise=0.0, heading_noise=0.0))
    assert planar_from_pose(g) == pytest.approx((3.0, -2.0, 0.4), abs=1e-12)
    assert all(simulate_gps_ins(s, GpsConfig(dropout=1.0), step=k) is None for k in range(50))


def test_gps_noise_statistics():
    cfg = GpsConfig(pos_noise=0.05, heading_noise=0.0)
    s = VehicleState(x=1.0, y=1.0)
    xs = np.array([planar_from_pose(simulate_gps_ins(s, cfg, seed=2, step=k))[0] for k in range(10_000)])
    assert abs(np.std(xs - 1.0) - 0.05) <= 0.05 * 0.05


def test_sensor_config_validation():
    with pytest.raises(InvalidInputError):
        SensorConfig(gps=GpsConfig(dropout=1.5))
    with pytest.raises(InvalidInputError):
        SensorConfig(lidar=LidarConfig(rate=0.0))
    with pytest.raises(InvalidInputError):
        SensorConfig(gps=GpsConfig(pos_noise=-0.1))


def test_plant_straight_second():
    s = VehicleState(U=5.0)
    for _ in range(20):
        s = step_plant(s, ControlInput(), 0.05, VehicleParams())
    assert s.x == pytest.approx(5.0, abs=1e-6)
    assert s.y == 0.0


def test_plant_equals_model():
    p = VehicleParams()
    rng = np.random.default_rng(0)
    s = VehicleState(U=6.0, V=0.1, r=0.2, delta_f=0.05)
    x = s.as_array()
    for k in range(40):
        u = ControlInput(*rng.uniform(-1, 1, 2))
        s = step_plant(s, u, 0.05, p)
        x = integrate(x, u.as_array(), 0.0, 0.05, p)
        x[2] = math.atan2(math.sin(x[2]), math.cos(x[2]))
        assert np.allclose(s.as_array(), x, atol=1e-9)


@pytest.mark.parametrize("C_ar", [30000.0, 45000.0])
def test_step_steer_yaw_gain(C_ar):
    p = VehicleParams(C_ar=C_ar)
    U, delta = 8.0, 0.03
    K = p.M / p.wheelbase * (p.l_r / p.C_af - p.l_f / p.C_ar)  # understeer gradient
    gain = U / (p.wheelbase + K * U * U)
    s = VehicleState(U=U, delta_f=delta)
    for _ in range(100):
        s = step_plant(s, ControlInput(), 0.05, p)
    assert s.r == pytest.approx(gain * delta, rel=0.01)


def test_friction_limit_caps_lateral_acceleration():
    p = VehicleParams()
    s = VehicleState(U=10.0, delta_f=0.3)
    for _ in range(60):
        s = step_plant(s, ControlInput(), 0.05, p, friction_limit=0.8)
    assert abs(s.U * s.r) <= 0.8 * 9.81 * 1.01
    with pytest.raises(InvalidInputError):
        step_plant(s, ControlInput(), 0.0, p)


def test_camera_blue_noise_free():
    patch = simulate_camera_patch((6.0, 0.5), ConeColor.BLUE, (0.0, 0.0, 0.0), CameraConfig(patch_noise=0.0))
    assert classify_color(patch) is ConeColor.BLUE


def test_camera_out_of_view():
    assert simulate_camera_patch((-6.0, 0.0), ConeColor.RED, (0.0, 0.0, 0.0), CameraConfig()) is None
    assert simulate_camera_patch((1.0, 8.0), ConeColor.RED, (0.0, 0.0, 0.0), CameraConfig()) is None
    assert simulate_camera_patch((30.0, 0.0), ConeColor.RED, (0.0, 0.0, 0.0), CameraConfig()) is None


def test_camera_seeded():
    cfg = CameraConfig(patch_noise=0.05)
    a = simulate_camera_patch((6.0, -1.0), ConeColor.RED, (0.0, 0.0, 0.0), cfg, seed=3, step=2)
    b = simulate_camera_patch((6.0, -1.0), ConeColor.RED, (0.0, 0.0, 0.0), cfg, seed=3, step=2)
    assert np.array_equal(a.data, b.data)


def test_ground_only_patch_rejected_by_trained_model():
    from racestack.sim import camera_view
    w = _single_cone_world(6.0)
    model = train_cone_classifier(0, 120, 0.03)
    empty = [camera_view(w, (8.0, y), (0.0, 0.0, 0.0), SensorConfig(), seed=1, step=k)
             for k, y in enumerate(np.linspace(-3, 3, 10))]
    assert sum(svm_predict(model, hog_features(p))[0] for p in empty) <= 1
    cone = camera_view(w, (6.0, 0.0), (0.0, 0.0, 0.0), SensorConfig(), seed=1)
    assert svm_predict(model, hog_features(cone))[0]
