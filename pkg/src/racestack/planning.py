"""Parametric cubic spline trajectories through midline points.

Each segment is ``P(u) = [u^3, u^2, u, 1] @ A`` on ``u in [0, 1]`` with four
interpolated points at knots ``0 < u1 < u2 < 1``.  A trajectory slides a
four-point window along the input and keeps only the span between the two
middle points of each window, so the chain passes through every input point.
Neighbouring spans are then made to share their tangent direction at each
input point.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateError, InsufficientDataError, InvalidInputError
from .geometry import wrap_angle


@dataclass(frozen=True)
class SplineSegment:
    A: np.ndarray  # (4, 2) rows multiply u^3, u^2, u, 1
    knots: tuple  # (0, u1, u2, 1)


@dataclass(frozen=True)
class Piece:
    segment: SplineSegment
    u0: float
    u1: float


@dataclass
class Trajectory:
    pieces: list
    closed: bool
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __len__(self) -> int:
        return len(self.pieces)


@dataclass(frozen=True)
class Waypoint:
    x: float
    y: float
    heading: float
    curvature: float
    s: float


def _basis(u: float) -> np.ndarray:
    return np.array([u**3, u**2, u, 1.0])


def fit_segment(P0, P1, P2, P3, u1: float, u2: float) -> SplineSegment:
    """Solve the 4x4 Vandermonde system for the cubic through four points at knots 0, u1, u2, 1."""
    if not 0.0 < u1 < u2 < 1.0:
        raise DegenerateError(f"interior knots must satisfy 0 < u1 < u2 < 1, got {u1}, {u2}")
    P = np.array([P0, P1, P2, P3], dtype=float).reshape(4, 2)
    if np.min(np.linalg.norm(np.diff(P, axis=0), axis=1)) == 0.0:
        raise DegenerateError("consecutive control points coincide")
    V = np.array([_basis(0.0), _basis(u1), _basis(u2), _basis(1.0)])
    try:
        A = np.linalg.solve(V, P)
    except np.linalg.LinAlgError as exc:
        raise DegenerateError("singular knot system") from exc
    return SplineSegment(A, (0.0, float(u1), float(u2), 1.0))


def evaluate(seg: SplineSegment, u: float):
    """Position, first and second derivative with respect to ``u``."""
    if not 0.0 <= u <= 1.0:
        raise InvalidInputError(f"u={u} outside [0, 1]")
    A = seg.A
    if u == 0.0:
        pos = A[3].copy()
    elif u == 1.0:
        pos = A.sum(axis=0)
    else:
        pos = _basis(u) @ A
    d1 = np.array([3 * u * u, 2 * u, 1.0, 0.0]) @ A
    d2 = np.array([6 * u, 2.0, 0.0, 0.0]) @ A
    return pos, d1, d2


def _chord_knots(P: np.ndarray) -> tuple[float, float]:
    d = np.linalg.norm(np.diff(P, axis=0), axis=1)
    total = d.sum()
    return float(d[0] / total), float((d[0] + d[1]) / total)


def build_trajectory(points, closed: bool = False) -> Trajectory:
    """Interpolating cubic chain through ``points`` using chord-length knots."""
    P = np.asarray(points, dtype=float).reshape(-1, 2)
    if closed and len(P) > 1 and np.allclose(P[0], P[-1], atol=1e-12):
        P = P[:-1]
    n = len(P)
    if n < 4:
        raise InsufficientDataError(f"need at least 4 points, got {n}")
    if np.any(np.linalg.norm(np.diff(P, axis=0), axis=1) == 0.0) or (
        closed and np.linalg.norm(P[0] - P[-1]) == 0.0
    ):
        raise InvalidInputError("consecutive duplicate points")

    pieces = []

    def window(idx):
        W = P[np.asarray(idx) % n]
        u1, u2 = _chord_knots(W)
        return fit_segment(W[0], W[1], W[2], W[3], u1, u2)

    if closed:
        for i in range(n):
            seg = window([i - 1, i, i + 1, i + 2])
            pieces.append(Piece(seg, seg.knots[1], seg.knots[2]))
    else:
        first = window([0, 1, 2, 3])
        pieces.append(Piece(first, 0.0, first.knots[1]))
        for i in range(1, n - 2):
            seg = window([i - 1, i, i + 1, i + 2])
            pieces.append(Piece(seg, seg.knots[1], seg.knots[2]))
        last = window([n - 4, n - 3, n - 2, n - 1])
        pieces.append(Piece(last, last.knots[2], 1.0))
    pieces = _share_tangents(pieces, closed)
    return Trajectory(pieces, closed, P.copy())


def _share_tangents(pieces: list, closed: bool) -> list:
    """Re-shape each span so that neighbours leave and enter a point in one direction.

    Piece ``k`` runs from input point ``k`` to point ``k + 1``.  Adjacent windows
    generally disagree slightly on the tangent at the point they share, so the
    unit tangents meeting at a point are averaged.  Each span keeps its own
    end-derivative lengths and becomes the cubic with those end conditions,
    written back as a four-point fit at uniform knots.
    """
    m = len(pieces)
    ends = []
    for p in pieces:
        scale = p.u1 - p.u0
        d0 = evaluate(p.segment, p.u0)[1] * scale
        d1 = evaluate(p.segment, p.u1)[1] * scale
        ends.append((evaluate(p.segment, p.u0)[0], evaluate(p.segment, p.u1)[0], d0, d1))
    n_pts = m if closed else m + 1
    dirs = np.zeros((n_pts, 2))
    for k, (_, _, d0, d1) in enumerate(ends):
        dirs[k] += d0 / np.linalg.norm(d0)
        dirs[(k + 1) % n_pts] += d1 / np.linalg.norm(d1)
    norms = np.linalg.norm(dirs, axis=1)
    if np.any(norms < 1e-9):  # a cusp: neighbouring spans point opposite ways
        return pieces
    dirs /= norms[:, None]
    out = []
    third = 1.0 / 3.0
    for k, (a, b, d0, d1) in enumerate(ends):
        m0 = np.linalg.norm(d0) * dirs[k]
        m1 = np.linalg.norm(d1) * dirs[(k + 1) % n_pts]

        def herm(t):
            t2, t3 = t * t, t * t * t
            return (2 * t3 - 3 * t2 + 1) * a + (t3 - 2 * t2 + t) * m0 + (-2 * t3 + 3 * t2) * b + (t3 - t2) * m1

        seg = fit_segment(a, herm(third), herm(2 * third), b, third, 2 * third)
        out.append(Piece(seg, 0.0, 1.0))
    return out


def curvature_of(d1, d2) -> float:
    den = (d1[0] ** 2 + d1[1] ** 2) ** 1.5
    if den == 0.0:
        return 0.0
    return float((d1[0] * d2[1] - d1[1] * d2[0]) / den)


def _piece_table(piece: Piece, n: int = 64):
    u = np.linspace(piece.u0, piece.u1, n + 1)
    A = piece.segment.A
    pts = np.column_stack([u**3, u**2, u, np.ones_like(u)]) @ A
    s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
    return u, s


def trajectory_length(traj: Trajectory, n: int = 64) -> float:
    return float(sum(_piece_table(p, n)[1][-1] for p in traj.pieces))


def sample_waypoints(traj: Trajectory, spacing: float) -> list[Waypoint]:
    """Arc-length-uniform waypoints with heading and signed curvature."""
    if spacing <= 0:
        raise InvalidInputError("spacing must be positive")
    tables = [_piece_table(p) for p in traj.pieces]
    lengths = np.array([t[1][-1] for t in tables])
    starts = np.concatenate([[0.0], np.cumsum(lengths)])
    total = float(starts[-1])
    n_int = max(1, int(round(total / spacing)))
    step = total / n_int
    count = n_int if traj.closed else n_int + 1
    out = []
    for k in range(count):
        s = min(k * step, total)
        i = int(np.searchsorted(starts, s, side="right") - 1)
        i = min(max(i, 0), len(traj.pieces) - 1)
        u_tab, s_tab = tables[i]
        u = float(np.interp(s - starts[i], s_tab, u_tab))
        piece = traj.pieces[i]
        u = min(max(u, piece.u0), piece.u1)
        pos, d1, d2 = evaluate(piece.segment, u)
        out.append(Waypoint(float(pos[0]), float(pos[1]), wrap_angle(math.atan2(d1[1], d1[0])),
                            curvature_of(d1, d2), float(s)))
    return out


class WaypointPath:
    """Array view of a waypoint list with projection helpers used by the controllers."""

    def __init__(self, waypoints, closed: bool = False):
        wps = list(waypoints)
        if not wps:
            raise InvalidInputError("empty waypoint path")
        self.x = np.array([w.x for w in wps])
        self.y = np.array([w.y for w in wps])
        self.heading = np.array([w.heading for w in wps])
        self.curvature = np.array([w.curvature for w in wps])
        self.s = np.array([w.s for w in wps])
        self.closed = closed
        if closed and len(wps) > 1:
            self.length = float(self.s[-1] + math.hypot(self.x[0] - self.x[-1], self.y[0] - self.y[-1]))
        else:
            self.length = float(self.s[-1])

    @classmethod
    def from_arrays(cls, x, y, closed=False):
        """Waypoints from a dense polyline (heading/curvature by finite differences)."""
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        if closed:
            dx = np.roll(x, -1) - np.roll(x, 1)
            dy = np.roll(y, -1) - np.roll(y, 1)
        else:
            dx = np.gradient(x)
            dy = np.gradient(y)
        hd = np.arctan2(dy, dx)
        seg = np.hypot(np.diff(x), np.diff(y))
        s = np.concatenate([[0.0], np.cumsum(seg)])
        dh = np.gradient(np.unwrap(hd))
        ds = np.gradient(s) if len(s) > 1 else np.ones(1)
        k = dh / np.where(ds > 0, ds, 1.0)
        return cls([Waypoint(*v) for v in zip(x, y, hd, k, s)], closed)

    def __len__(self) -> int:
        return len(self.x)

    def nearest_index(self, x: float, y: float, hint: int | None = None, window: int = 40) -> int:
        n = len(self.x)
        if hint is None or n <= 2 * window + 1:
            idx = np.arange(n)
        else:
            idx = np.arange(hint - window // 4, hint + window)
            idx = idx % n if self.closed else idx[(idx >= 0) & (idx < n)]
        d2 = (self.x[idx] - x) ** 2 + (self.y[idx] - y) ** 2
        return int(idx[int(np.argmin(d2))])

    def project(self, x: float, y: float, hint: int | None = None):
        """Arc coordinate, signed lateral offset (left positive) and segment index of ``(x, y)``."""
        i = self.nearest_index(x, y, hint)
        n = len(self.x)
        best = None
        for j in (i - 1, i):
            if self.closed:
                a, b = j % n, (j + 1) % n
            else:
                if j < 0 or j + 1 >= n:
                    continue
                a, b = j, j + 1
            ax, ay = self.x[a], self.y[a]
            ex, ey = self.x[b] - ax, self.y[b] - ay
            L2 = ex * ex + ey * ey
            t = 0.0 if L2 == 0 else min(max(((x - ax) * ex + (y - ay) * ey) / L2, 0.0), 1.0)
            px, py = ax + t * ex, ay + t * ey
            d2 = (x - px) ** 2 + (y - py) ** 2
            if best is None or d2 < best[0]:
                seg_len = math.sqrt(L2)
                side = ex * (y - ay) - ey * (x - ax)
                s = self.s[a] + t * seg_len
                best = (d2, s, math.copysign(math.sqrt(d2), side) if d2 > 0 else 0.0, a, t)
        if best is None:
            return float(self.s[i]), math.hypot(x - self.x[i], y - self.y[i]), i, 0.0
        return best[1], best[2], best[3], best[4]

    def heading_at(self, a: int, t: float) -> float:
        n = len(self.x)
        b = (a + 1) % n if self.closed else min(a + 1, n - 1)
        dh = wrap_angle(self.heading[b] - self.heading[a])
        return wrap_angle(self.heading[a] + t * dh)

    def curvature_at_s(self, s):
        s = np.asarray(s, dtype=float)
        if self.closed:
            xs = np.concatenate([self.s, [self.length]])
            ks = np.concatenate([self.curvature, [self.curvature[0]]])
            return np.interp(np.mod(s, self.length), xs, ks)
        return np.interp(s, self.s, self.curvature)

    def point_at_s(self, s: float):
        if self.closed:
            s = s % self.length
            xs = np.concatenate([self.s, [self.length]])
            return (float(np.interp(s, xs, np.append(self.x, self.x[0]))),
                    float(np.interp(s, xs, np.append(self.y, self.y[0]))))
        s = min(max(s, 0.0), self.length)
        return float(np.interp(s, self.s, self.x)), float(np.interp(s, self.s, self.y))

    def to_waypoints(self) -> list[Waypoint]:
        return [Waypoint(*v) for v in zip(self.x, self.y, self.heading, self.curvature, self.s)]


def plan_path(points, closed: bool, spacing: float = 0.5) -> WaypointPath:
    traj = build_trajectory(points, closed)
    return WaypointPath(sample_waypoints(traj, spacing), closed)
