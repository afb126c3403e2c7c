import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from racestack.errors import InsufficientDataError, InvalidInputError
from racestack.geometry import pose_from_planar
from racestack.odometry import FusedPose
from racestack.sim import TrackSpec, generate_track
from racestack.trackmap import (
    LoopClosureConfig,
    MappedCone,
    TrackMap,
    detect_loop,
    extract_midline,
    insert_observations,
    loop_closure_coefficient,
    refine_with_map,
)
from racestack.vision import ConeColor

R, B, Y = ConeColor.RED, ConeColor.BLUE, ConeColor.YELLOW


def _truth_map(world):
    return TrackMap([MappedCone(p, c, 5) for p, c in zip(world.cones, world.colors)])


@pytest.fixture(scope="module")
def reference():
    return generate_track(TrackSpec.reference())


def test_insert_two_into_empty():
    m = insert_observations(TrackMap(), [((0.0, 2.0), R), ((0.0, -2.0), B)], (0.0, 0.0, 0.0))
    assert len(m.cones) == 2


def test_reobservation_same_position():
    m = insert_observations(TrackMap(), [((3.0, 1.0), R)], (0, 0, 0))
    insert_observations(m, [((3.0, 1.0), R)], (0, 0, 0))
    assert len(m.cones) == 1
    assert m.cones[0].observation_count == 2
    assert np.array_equal(m.cones[0].position, [3.0, 1.0])


def test_offset_observations_average():
    m = insert_observations(TrackMap(), [((3.1, 1.0), R)], (0, 0, 0))
    insert_observations(m, [((2.9, 1.0), R)], (0, 0, 0))
    assert m.cones[0].position == pytest.approx([3.0, 1.0])


def test_sensor_frame_candidate_transformed():
    class Cand:
        position = np.array([4.0, 0.35, 1.0])  # forward, down, left

    pose = FusedPose(pose_from_planar(10.0, 5.0, math.pi / 2), 1.0, 0.0)
    m = insert_observations(TrackMap(), [(Cand(), B)], pose)
    assert m.cones[0].position == pytest.approx([9.0, 9.0])


@given(st.lists(st.tuples(st.floats(-30, 30), st.floats(-30, 30)), min_size=1, max_size=60))
def test_no_two_cones_within_merge_radius(pts):
    m = TrackMap()
    for p in pts:
        insert_observations(m, [(p, R)], (0, 0, 0))
    P = m.positions()
    d = np.hypot(*(P[:, None, :] - P[None, :, :]).transpose(2, 0, 1))
    np.fill_diagonal(d, np.inf)
    assert d.min() > m.merge_radius
    assert sum(c.observation_count for c in m.cones) == len(pts)


def test_coefficient_zero_at_start():
    m = TrackMap([MappedCone((2, 2), R), MappedCone((2, -2), B)])
    C = loop_closure_coefficient(m, [(2, 2), (2, -2)], 0.3, 0.3, (1, 1), (1, 1), LoopClosureConfig())
    assert C == 0.0


def test_coefficient_distance_only():
    cfg = LoopClosureConfig(W_c=0, W_h=0, W_d=1)
    assert loop_closure_coefficient(TrackMap(), [], 1.0, 0.0, (3, 0), (0, 0), cfg) == pytest.approx(3.0)


def test_coefficient_heading_wrapped():
    cfg = LoopClosureConfig(W_c=0, W_h=1, W_d=0)
    assert loop_closure_coefficient(TrackMap(), [], math.pi - 0.1, -math.pi + 0.1, (0, 0), (0, 0), cfg) == pytest.approx(0.2)


def test_coefficient_needs_map():
    with pytest.raises(InvalidInputError):
        loop_closure_coefficient(TrackMap(), [(1, 1)], 0, 0, (0, 0), (0, 0), LoopClosureConfig())


def test_config_validation():
    with pytest.raises(InvalidInputError):
        LoopClosureConfig(W_c=-1)
    with pytest.raises(InvalidInputError):
        LoopClosureConfig(threshold=0)


def _visible(world, x, y, r=10.0):
    d = np.hypot(world.cones[:, 0] - x, world.cones[:, 1] - y)
    return world.cones[d < r]


def test_mid_lap_above_threshold(reference):
    w = reference
    m = _truth_map(w)
    sx, sy, syaw = w.start
    cfg = LoopClosureConfig()
    path = w.centerline
    for frac in (0.25, 0.5, 0.75):
        x, y = path.point_at_s(frac * path.length)
        yaw = float(path.heading[path.nearest_index(x, y)])
        C = loop_closure_coefficient(m, _visible(w, x, y), yaw, syaw, (x, y), (sx, sy), cfg)
        assert C > cfg.threshold


@given(st.integers(0, 10_000), st.floats(0, 3), st.sampled_from(["W_c", "W_h", "W_d"]))
def test_coefficient_monotone_in_weights(seed, bump, which):
    rng = np.random.default_rng(seed)
    m = TrackMap([MappedCone(p, R) for p in rng.uniform(-10, 10, (5, 2))])
    args = (m, rng.uniform(-10, 10, (3, 2)), rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-5, 5, 2), rng.uniform(-5, 5, 2))
    base = LoopClosureConfig()
    more = LoopClosureConfig(**{**base.__dict__, which: getattr(base, which) + bump})
    c0 = loop_closure_coefficient(*args, base)
    assert c0 >= 0
    assert loop_closure_coefficient(*args, more) >= c0


def test_not_armed_at_start():
    m = TrackMap([MappedCone((2, 2), R)])
    cfg = LoopClosureConfig()
    assert detect_loop(m, [(2, 2)], (0, 0, 0), cfg) is False
    assert detect_loop(m, [(2, 2)], (0.1, 0, 0), cfg) is False
    assert m.lap_count == 0


def test_straight_path_never_closes():
    m = TrackMap([MappedCone((x, 2.0), R) for x in range(0, 200, 5)])
    cfg = LoopClosureConfig()
    fired = [detect_loop(m, [(x - x % 5, 2.0)], (float(x), 0.0, 0.0), cfg) for x in np.arange(0, 200, 0.5)]
    assert not any(fired)


def test_ground_truth_laps_fire_once_each(reference):
    w = reference
    m = _truth_map(w)
    cfg = LoopClosureConfig()
    path = w.centerline
    fires = []
    s = 0.0
    while s < 2 * path.length + 1.0:
        x, y = path.point_at_s(s % path.length)
        yaw = float(path.heading[path.nearest_index(x, y)])
        if detect_loop(m, _visible(w, x, y), (x, y, yaw), cfg):
            fires.append(s)
        s += 0.3
    assert len(fires) == 2
    assert fires[0] == pytest.approx(path.length, abs=3.0)
    assert fires[1] == pytest.approx(2 * path.length, abs=3.0)
    assert m.lap_count == 2 and m.closed


def test_midline_parallel_rows():
    m = TrackMap([MappedCone((x, 2.5), R) for x in range(0, 30, 5)] + [MappedCone((x, -2.5), B) for x in range(0, 30, 5)])
    mid = extract_midline(m).points
    assert len(mid) == 6
    assert np.allclose(mid[:, 1], 0.0)
    assert np.allclose(mid[:, 0], np.arange(0, 30, 5))


def test_midline_single_pair_needs_two():
    m = TrackMap([MappedCone((0, 2.5), R), MappedCone((0, -2.5), B)])
    with pytest.raises(InsufficientDataError):
        extract_midline(m)
    m.cones += [MappedCone((20, 2.5), R), MappedCone((20, -2.5), B)]
    assert extract_midline(m).points[0] == pytest.approx([0, 0])


def test_midline_unpaired_reported():
    m = TrackMap([MappedCone((x, 2.5), R) for x in (0, 5)] + [MappedCone((x, -2.5), B) for x in (0, 5)]
                 + [MappedCone((50, 2.5), R)])
    res = extract_midline(m)
    assert res.unpaired == [4] and len(res.points) == 2


def test_midline_on_circle():
    w = generate_track(TrackSpec.circle(20.0, scenery=False))
    m = _truth_map(w)
    m.closed = True
    res = extract_midline(m, path=np.column_stack([w.centerline.x, w.centerline.y]))
    r = np.hypot(*res.points.T)
    assert np.all(np.abs(r - 20.0) < 0.1)
    ang = np.unwrap(np.arctan2(res.points[:, 1], res.points[:, 0]))
    assert np.all(np.diff(ang) > 0)
    assert res.closed


def test_midline_inside_reference_track(reference):
    w = reference
    res = extract_midline(_truth_map(w), path=np.column_stack([w.centerline.x, w.centerline.y]))
    assert len(res.points) > 20
    for p in res.points:
        assert abs(w.lateral_offset(*p)) < w.width / 2


def test_refine_with_map_recovers_offset(reference):
    w = reference
    m = _truth_map(w)
    x, y = w.centerline.point_at_s(40.0)
    yaw = float(w.centerline.heading[w.centerline.nearest_index(x, y)])
    V = _visible(w, x, y)
    c, s = math.cos(yaw), math.sin(yaw)
    det = np.column_stack([(V[:, 0] - x) * c + (V[:, 1] - y) * s, -(V[:, 0] - x) * s + (V[:, 1] - y) * c])
    out = refine_with_map(m, det, (x + 0.4, y - 0.3, yaw + 0.03))
    assert out is not None
    assert out[:3] == pytest.approx((x, y, yaw), abs=1e-6)
    assert refine_with_map(m, det[:2], (x, y, yaw)) is None
