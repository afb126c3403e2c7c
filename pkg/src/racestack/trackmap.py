"""Cone landmark map, weighted loop-closure test, midline extraction and map-based pose correction."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import InsufficientDataError, InvalidInputError
from .geometry import PoseTransform, planar_from_pose, pose_from_planar, sensor_to_map, wrap_angle
from .vision import ConeColor

MERGE_RADIUS = 1.0
PAIRING_GATE = 7.0


@dataclass
class MappedCone:
    position: np.ndarray
    color: ConeColor
    observation_count: int = 1
    votes: Counter = field(default_factory=Counter)

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(2)
        if self.observation_count < 1:
            raise InvalidInputError("observation_count must be >= 1")
        if not self.votes:
            self.votes[self.color] = self.observation_count


@dataclass
class TrackMap:
    cones: list = field(default_factory=list)
    start_pose: PoseTransform | None = None
    lap_count: int = 0
    closed: bool = False
    merge_radius: float = MERGE_RADIUS
    distance_since_closure: float = 0.0
    in_closure: bool = False
    _last_xy: tuple | None = None

    def positions(self) -> np.ndarray:
        if not self.cones:
            return np.zeros((0, 2))
        return np.array([c.position for c in self.cones])

    def colors(self) -> list:
        return [c.color for c in self.cones]

    def snapshot(self) -> "TrackMap":
        return TrackMap(
            [MappedCone(c.position.copy(), c.color, c.observation_count, Counter(c.votes)) for c in self.cones],
            self.start_pose, self.lap_count, self.closed, self.merge_radius,
            self.distance_since_closure, self.in_closure, self._last_xy,
        )

    def advance(self, x: float, y: float) -> float:
        """Accumulate travelled distance used for loop-closure arming."""
        if self._last_xy is not None:
            self.distance_since_closure += math.hypot(x - self._last_xy[0], y - self._last_xy[1])
        self._last_xy = (float(x), float(y))
        return self.distance_since_closure


@dataclass(frozen=True)
class LoopClosureConfig:
    W_c: float = 0.5
    W_h: float = 1.0
    W_d: float = 1.0
    threshold: float = 2.0
    arming_distance: float = 15.0

    def __post_init__(self):
        if min(self.W_c, self.W_h, self.W_d) < 0:
            raise InvalidInputError("loop-closure weights must be nonnegative")
        if self.threshold <= 0:
            raise InvalidInputError("threshold must be positive")


def _pose_xyyaw(pose):
    if hasattr(pose, "pose"):  # FusedPose
        pose = pose.pose
    if isinstance(pose, PoseTransform):
        return planar_from_pose(pose)
    x, y, yaw = pose
    return float(x), float(y), float(yaw)


def insert_observations(tmap: TrackMap, candidates, pose) -> TrackMap:
    """Add ``(candidate, color)`` observations seen from ``pose`` to the map (in place; also returned).

    A candidate is either a detection object with a sensor-frame ``position``
    (x forward, z left) or a plain ``(x, y)`` map point.
    """
    x, y, yaw = _pose_xyyaw(pose)
    for cand, color in candidates:
        pos = getattr(cand, "position", cand)
        pos = np.asarray(pos, dtype=float)
        world = sensor_to_map(pos.reshape(1, 3), x, y, yaw)[0] if pos.size == 3 else pos.reshape(2)
        _insert_one(tmap, world, color)
    return tmap


def _insert_one(tmap: TrackMap, world: np.ndarray, color: ConeColor) -> None:
    P = tmap.positions()
    if len(P):
        d = np.hypot(P[:, 0] - world[0], P[:, 1] - world[1])
        i = int(np.argmin(d))
        if d[i] <= tmap.merge_radius:
            c = tmap.cones[i]
            c.observation_count += 1
            c.position = c.position + (world - c.position) / c.observation_count
            c.votes[color] += 1
            c.color = _majority(c.votes)
            _merge_neighbours(tmap, i)
            return
    tmap.cones.append(MappedCone(world.copy(), color, 1))


def _majority(votes: Counter) -> ConeColor:
    known = [(n, k.value, k) for k, n in votes.items() if k is not ConeColor.UNKNOWN and n > 0]
    if not known:
        return ConeColor.UNKNOWN
    return max(known, key=lambda t: (t[0], t[1]))[2]


def _merge_neighbours(tmap: TrackMap, i: int) -> None:
    c = tmap.cones[i]
    for j in range(len(tmap.cones) - 1, -1, -1):
        if j == i:
            continue
        o = tmap.cones[j]
        if np.hypot(*(o.position - c.position)) <= tmap.merge_radius:
            n = c.observation_count + o.observation_count
            c.position = (c.position * c.observation_count + o.position * o.observation_count) / n
            c.observation_count = n
            c.votes.update(o.votes)
            c.color = _majority(c.votes)
            del tmap.cones[j]
            if j < i:
                i -= 1
                c = tmap.cones[i]


def loop_closure_coefficient(tmap: TrackMap, detected, heading_now: float, heading_start: float,
                             pos_now, pos_start, cfg: LoopClosureConfig) -> float:
    """Weighted sum of landmark mismatch, heading change and distance to the start pose."""
    D = np.asarray(detected, dtype=float).reshape(-1, 2)
    term_c = 0.0
    if cfg.W_c > 0 and len(D):
        P = tmap.positions()
        if not len(P):
            raise InvalidInputError("landmark term needs a nonempty map")
        d, _ = cKDTree(P).query(D)
        term_c = float(np.sum(d))
    term_h = abs(wrap_angle(float(heading_now) - float(heading_start)))
    term_d = math.hypot(float(pos_now[0]) - float(pos_start[0]), float(pos_now[1]) - float(pos_start[1]))
    return cfg.W_c * term_c + cfg.W_h * term_h + cfg.W_d * term_d


def detect_loop(tmap: TrackMap, detected, pose, cfg: LoopClosureConfig) -> bool:
    """Rising-edge loop detector; updates the map's lap count and closed flag when it fires."""
    x, y, yaw = _pose_xyyaw(pose)
    tmap.advance(x, y)
    if tmap.start_pose is None:
        tmap.start_pose = pose_from_planar(x, y, yaw)
        return False
    sx, sy, syaw = planar_from_pose(tmap.start_pose)
    if tmap.distance_since_closure < cfg.arming_distance:
        return False
    if cfg.W_c > 0 and not tmap.cones:
        return False
    C = loop_closure_coefficient(tmap, detected, yaw, syaw, (x, y), (sx, sy), cfg)
    if C < cfg.threshold:
        if not tmap.in_closure:
            tmap.in_closure = True
            tmap.closed = True
            tmap.lap_count += 1
            tmap.distance_since_closure = 0.0
            return True
        return False
    tmap.in_closure = False
    return False


@dataclass
class MidlineResult:
    points: np.ndarray
    closed: bool
    unpaired: list


def extract_midline(tmap: TrackMap, path=None, pairing_gate: float = PAIRING_GATE, min_separation: float = 1.0):
    """Midpoints of left/right cone pairs ordered along the track.

    ``path`` is the driven polyline (``(n, 2)``) used to order the midpoints by
    arc progress; without it the points are chained greedily from the cone
    pair nearest the map's start pose.  Yellow cones pair with each other.
    Returns a :class:`MidlineResult` whose ``unpaired`` lists skipped cones.
    """
    P = tmap.positions()
    cols = tmap.colors()
    red = [i for i, c in enumerate(cols) if c is ConeColor.RED]
    blue = [i for i, c in enumerate(cols) if c is ConeColor.BLUE]
    yellow = [i for i, c in enumerate(cols) if c is ConeColor.YELLOW]
    if len(red) < 2 or len(blue) < 2:
        raise InsufficientDataError(f"need >= 2 red and >= 2 blue cones, have {len(red)} / {len(blue)}")
    mids, unpaired = [], []
    bt = cKDTree(P[blue])
    for i in red:
        d, j = bt.query(P[i])
        if d <= pairing_gate:
            mids.append(0.5 * (P[i] + P[blue[j]]))
        else:
            unpaired.append(i)
    used = set()
    for i in yellow:
        if i in used:
            continue
        others = [j for j in yellow if j != i and j not in used]
        if not others:
            unpaired.append(i)
            continue
        d = [np.hypot(*(P[j] - P[i])) for j in others]
        k = int(np.argmin(d))
        if d[k] <= pairing_gate:
            used.update((i, others[k]))
            mids.append(0.5 * (P[i] + P[others[k]]))
        else:
            unpaired.append(i)
    M = np.array(mids)
    M = _dedupe(M, min_separation)
    if path is not None and len(path) >= 2:
        M = M[np.argsort(_arc_position(np.asarray(path, dtype=float), M), kind="stable")]
    else:
        M = _greedy_chain(M, tmap)
    return MidlineResult(M, bool(tmap.closed), unpaired)


def _dedupe(M: np.ndarray, sep: float) -> np.ndarray:
    keep = []
    for p in M:
        if all(np.hypot(*(p - q)) >= sep for q in keep):
            keep.append(p)
    return np.array(keep)


def _arc_position(path: np.ndarray, pts: np.ndarray) -> np.ndarray:
    seg = np.diff(path, axis=0)
    L2 = np.maximum((seg**2).sum(axis=1), 1e-18)
    s0 = np.concatenate([[0.0], np.cumsum(np.sqrt(L2))])
    out = np.empty(len(pts))
    for k, p in enumerate(pts):
        t = np.clip(((p - path[:-1]) * seg).sum(axis=1) / L2, 0.0, 1.0)
        proj = path[:-1] + t[:, None] * seg
        d = ((proj - p) ** 2).sum(axis=1)
        i = int(np.argmin(d))
        out[k] = s0[i] + t[i] * math.sqrt(L2[i])
    return out


def _greedy_chain(M: np.ndarray, tmap: TrackMap) -> np.ndarray:
    if len(M) < 2:
        return M
    start = np.zeros(2)
    if tmap.start_pose is not None:
        sx, sy, _ = planar_from_pose(tmap.start_pose)
        start = np.array([sx, sy])
    order = [int(np.argmin(np.hypot(*(M - start).T)))]
    left = set(range(len(M))) - set(order)
    while left:
        last = M[order[-1]]
        nxt = min(left, key=lambda j: (np.hypot(*(M[j] - last)), j))
        order.append(nxt)
        left.remove(nxt)
    return M[order]


def refine_with_map(tmap: TrackMap, detections, pose, gate: float = 1.0, iterations: int = 5, min_matches: int = 3):
    """Correct a planar pose by aligning current cone detections to the map (2-D rigid ICP).

    ``detections`` are ``(k, 2)`` sensor-plane points ``(forward, left)``.
    Returns ``(x, y, yaw, n_matches)`` or ``None`` when too few cones match.
    """
    x, y, yaw = _pose_xyyaw(pose)
    D = np.asarray(detections, dtype=float).reshape(-1, 2)
    P = tmap.positions()
    if len(D) < min_matches or len(P) < min_matches:
        return None
    tree = cKDTree(P)
    n = 0
    for _ in range(iterations):
        c, s = math.cos(yaw), math.sin(yaw)
        W = np.column_stack([x + D[:, 0] * c - D[:, 1] * s, y + D[:, 0] * s + D[:, 1] * c])
        d, j = tree.query(W)
        m = d <= gate
        n = int(m.sum())
        if n < min_matches:
            return None
        src, dst = W[m], P[j[m]]
        mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
        H = (src - mu_s).T @ (dst - mu_d)
        dth = math.atan2(H[0, 1] - H[1, 0], H[0, 0] + H[1, 1])
        cr, sr = math.cos(dth), math.sin(dth)
        R = np.array([[cr, -sr], [sr, cr]])
        t = mu_d - R @ mu_s
        x, y = R @ np.array([x, y]) + t
        yaw = wrap_angle(yaw + dth)
        if abs(dth) < 1e-9 and np.hypot(*t) < 1e-9:
            break
    return float(x), float(y), float(yaw), n
