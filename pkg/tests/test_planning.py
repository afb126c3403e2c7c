import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from racestack.errors import DegenerateError, InsufficientDataError, InvalidInputError
from racestack.planning import (
    build_trajectory,
    curvature_of,
    evaluate,
    fit_segment,
    plan_path,
    sample_waypoints,
)


def _gauss_solve(M, rhs):
    """Plain Gaussian elimination with partial pivoting, kept apart from numpy.linalg."""
    A = [list(map(float, row)) + list(map(float, r)) for row, r in zip(M, rhs)]
    n = len(A)
    for c in range(n):
        p = max(range(c, n), key=lambda r: abs(A[r][c]))
        A[c], A[p] = A[p], A[c]
        for r in range(n):
            if r != c:
                f = A[r][c] / A[c][c]
                A[r] = [a - f * b for a, b in zip(A[r], A[c])]
    return np.array([[v / A[i][i] for v in A[i][n:]] for i in range(n)])


def _circle(R, n, phase=0.0):
    th = phase + np.linspace(0, 2 * np.pi, n, endpoint=False)
    return np.column_stack([R * np.cos(th), R * np.sin(th)])


def test_collinear_points_stay_on_line():
    P = [(0, 0), (1, 2), (2, 4), (3, 6)]
    seg = fit_segment(*P, 1 / 3, 2 / 3)
    for u in np.linspace(0, 1, 101):
        x, y = evaluate(seg, u)[0]
        assert abs(y - 2 * x) < 1e-9


def test_knots_reproduce_points():
    P = [(0, 0), (1, 1.5), (2.5, 1.0), (4, -1)]
    seg = fit_segment(*P, 0.3, 0.65)
    for u, p in zip(seg.knots, P):
        assert np.allclose(evaluate(seg, u)[0], p, atol=1e-9)
    assert evaluate(seg, 0.0)[0].tolist() == [0.0, 0.0]
    assert np.array_equal(evaluate(seg, 1.0)[0], np.array([4.0, -1.0]))


def test_parabola_matches_independent_solver():
    xs = [-1.0, -0.2, 0.5, 1.3]
    P = [(x, x * x) for x in xs]
    u1, u2 = 0.25, 0.6
    seg = fit_segment(*P, u1, u2)
    V = [[u**3, u**2, u, 1.0] for u in (0.0, u1, u2, 1.0)]
    A = _gauss_solve(V, P)
    assert np.allclose(seg.A, A, atol=1e-12)
    assert np.allclose(evaluate(seg, 0.5)[0], np.array([0.125, 0.25, 0.5, 1.0]) @ A, atol=1e-12)


def test_fit_segment_degenerate():
    with pytest.raises(DegenerateError):
        fit_segment((0, 0), (1, 0), (2, 0), (3, 0), 0.5, 0.5)
    with pytest.raises(DegenerateError):
        fit_segment((0, 0), (0, 0), (2, 0), (3, 0), 0.3, 0.6)


def test_evaluate_out_of_range():
    seg = fit_segment((0, 0), (1, 0), (2, 1), (3, 3), 0.3, 0.6)
    with pytest.raises(InvalidInputError):
        evaluate(seg, 1.01)


@given(st.integers(0, 10_000), st.floats(0.01, 0.99))
def test_derivatives_match_finite_differences(seed, u):
    rng = np.random.default_rng(seed)
    seg = fit_segment(*rng.uniform(-5, 5, (4, 2)) + np.arange(4)[:, None] * 3, 0.3, 0.7)
    h = 1e-6
    p_lo, p_hi = evaluate(seg, u - h)[0], evaluate(seg, u + h)[0]
    _, d1, d2 = evaluate(seg, u)
    fd1 = (p_hi - p_lo) / (2 * h)
    assert np.allclose(fd1, d1, rtol=1e-6, atol=1e-6 * np.abs(d1).max())
    fd2 = (evaluate(seg, u + h)[1] - evaluate(seg, u - h)[1]) / (2 * h)
    assert np.allclose(fd2, d2, rtol=1e-6, atol=1e-6 * np.abs(d2).max())


def test_curvature_vs_finite_difference_1000_params():
    rng = np.random.default_rng(7)
    seg = fit_segment((0, 0), (2, 1.5), (4, 1.0), (6, -1.0), 0.3, 0.62)
    h = 1e-4
    for u in rng.uniform(h, 1 - h, 1000):
        _, d1, d2 = evaluate(seg, u)
        a, b, c = (evaluate(seg, v)[0] for v in (u - h, u, u + h))
        f1 = (c - a) / (2 * h)
        f2 = (c - 2 * b + a) / (h * h)
        assert abs(curvature_of(d1, d2) - curvature_of(f1, f2)) < 1e-4


def test_straight_line_zero_curvature():
    P = np.column_stack([np.linspace(0, 10, 6), np.zeros(6)])
    wps = sample_waypoints(build_trajectory(P), 1.0)
    assert len(wps) == 11
    assert all(abs(w.curvature) < 1e-9 and abs(w.heading) < 1e-9 for w in wps)
    assert all(abs(w.y) < 1e-9 for w in wps)


def test_circle_curvature_within_two_percent():
    traj = build_trajectory(_circle(10.0, 36), closed=True)
    wps = sample_waypoints(traj, 0.5)
    k = np.array([w.curvature for w in wps])
    assert np.all(np.abs(k - 0.1) < 0.002)
    assert np.all(np.abs(np.hypot([w.x for w in wps], [w.y for w in wps]) - 10.0) < 0.01)


def test_clockwise_circle_negative_curvature():
    wps = sample_waypoints(build_trajectory(_circle(10.0, 36)[::-1], closed=True), 0.5)
    assert np.all(np.abs(np.array([w.curvature for w in wps]) + 0.1) < 0.002)


def test_closed_loop_is_c0_closed():
    sq = np.array([(0, 0), (5, -0.3), (10, 0), (10.4, 5), (10, 10), (5, 10.3), (0, 10), (-0.3, 5)], float)
    traj = build_trajectory(sq, closed=True)
    first = traj.pieces[0]
    last = traj.pieces[-1]
    assert np.allclose(evaluate(last.segment, last.u1)[0], evaluate(first.segment, first.u0)[0], atol=1e-9)


def _joins(traj):
    for a, b in zip(traj.pieces, traj.pieces[1:] + (traj.pieces[:1] if traj.closed else [])):
        yield evaluate(a.segment, a.u1), evaluate(b.segment, b.u0)


@given(st.integers(0, 10_000), st.booleans())
def test_interpolation_and_continuity(seed, closed):
    rng = np.random.default_rng(seed)
    th = np.sort(rng.uniform(0, 2 * np.pi, 10))
    th = th[np.concatenate([[True], np.diff(th) > 0.2])]
    if len(th) < 5:
        return
    P = np.column_stack([(20 + rng.uniform(-2, 2, len(th))) * np.cos(th), (15 + rng.uniform(-2, 2, len(th))) * np.sin(th)])
    traj = build_trajectory(P, closed)
    for piece, p in zip(traj.pieces if closed else traj.pieces[1:], P if closed else P[1:]):
        assert np.allclose(evaluate(piece.segment, piece.u0)[0], p, atol=1e-9)
        assert 0.0 < piece.segment.knots[1] < piece.segment.knots[2] < 1.0
    for (pa, da, _), (pb, db, _) in _joins(traj):
        assert np.allclose(pa, pb, atol=1e-9)
        ang = abs(math.atan2(da[0] * db[1] - da[1] * db[0], da @ db))
        assert ang < 1e-9


def test_circle_tangents_are_exact():
    # the two windows meeting at a circle point err by mirror-image amounts, so the shared
    # direction is exactly perpendicular to the radius
    P = _circle(10.0, 36)
    traj = build_trajectory(P, closed=True)
    for piece, p in zip(traj.pieces, P):
        d = evaluate(piece.segment, piece.u0)[1]
        assert abs(d @ p) / (np.linalg.norm(d) * 10.0) < 1e-12


@given(st.integers(0, 10_000), st.floats(0.2, 3.0))
def test_sampling_spacing_and_monotone_s(seed, spacing):
    rng = np.random.default_rng(seed)
    P = np.cumsum(rng.uniform(1, 4, (8, 2)) * [1, 0.3] + [0, -0.5], axis=0)
    wps = sample_waypoints(build_trajectory(P), spacing)
    s = np.array([w.s for w in wps])
    assert np.all(np.diff(s) > 0)
    xy = np.array([(w.x, w.y) for w in wps])
    gaps = np.hypot(*np.diff(xy, axis=0).T)
    step = s[1] - s[0]
    assert abs(step - spacing) <= 0.5 * spacing + 1e-9 or len(wps) == 2
    assert np.all(np.abs(gaps - step) <= 0.05 * step)
    assert all(-math.pi < w.heading <= math.pi for w in wps)


def test_build_errors():
    with pytest.raises(InsufficientDataError):
        build_trajectory([(0, 0), (1, 0), (2, 0)])
    with pytest.raises(InvalidInputError):
        build_trajectory([(0, 0), (1, 0), (1, 0), (2, 0), (3, 0)])
    with pytest.raises(InvalidInputError):
        sample_waypoints(build_trajectory([(0, 0), (1, 0), (2, 0), (3, 0)]), 0.0)


def test_plan_path_closed_length():
    path = plan_path(_circle(10.0, 36), closed=True, spacing=0.5)
    assert path.length == pytest.approx(2 * math.pi * 10.0, rel=1e-3)
    assert path.closed
