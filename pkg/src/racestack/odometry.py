"""Scan-matching LIDAR odometry, multi-frame accumulation and GPS-INS fusion.

Features follow the LOAM recipe: a local smoothness score per point separates
sharp edge points from flat planar points; the current scan's features are
registered against the previous scan's feature pools with point-to-line and
point-to-plane residuals minimised by Levenberg-Marquardt.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import _kernels
from .errors import (
    DegenerateRegistrationError,
    InvalidIndexError,
    InvalidInputError,
    LocalizationLostError,
)
from .geometry import PoseTransform, compose, quat_from_rotvec, quat_slerp, transfer_point


@dataclass
class LaserScan:
    """One multi-layer sweep; ``layers[l]`` is an ``(n_l, 3)`` array ordered by azimuth.

    ``azimuth_index[l]`` holds the integer azimuth bin of each return so that
    gaps left by rays without a return can be recognised.
    """

    layers: list
    timestamp: float = 0.0
    azimuth_index: list | None = None

    def __post_init__(self):
        self.layers = [np.ascontiguousarray(np.asarray(l, dtype=np.float64).reshape(-1, 3)) for l in self.layers]
        if self.azimuth_index is None:
            self.azimuth_index = [np.arange(l.shape[0], dtype=np.int64) for l in self.layers]
        else:
            self.azimuth_index = [np.ascontiguousarray(a, dtype=np.int64) for a in self.azimuth_index]
        if len(self.azimuth_index) != len(self.layers):
            raise InvalidInputError("azimuth_index must have one entry per layer")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def points(self) -> np.ndarray:
        if not self.layers:
            return np.zeros((0, 3))
        return np.vstack(self.layers)

    def __len__(self) -> int:
        return sum(l.shape[0] for l in self.layers)


@dataclass
class FeatureSet:
    """Selected features plus the denser pools that the next scan is matched against."""

    edge_points: np.ndarray
    edge_layers: np.ndarray
    edge_index: np.ndarray
    planar_points: np.ndarray
    planar_layers: np.ndarray
    planar_index: np.ndarray
    edge_pool: np.ndarray | None = None
    edge_pool_layers: np.ndarray | None = None
    planar_pool: np.ndarray | None = None
    planar_pool_layers: np.ndarray | None = None

    @classmethod
    def empty(cls) -> "FeatureSet":
        z3 = np.zeros((0, 3))
        zi = np.zeros(0, dtype=np.int64)
        return cls(z3, zi, zi, z3, zi, zi, z3, zi, z3, zi)

    def __len__(self) -> int:
        return len(self.edge_points) + len(self.planar_points)

    def transformed(self, T: PoseTransform) -> "FeatureSet":
        def tf(p):
            return None if p is None else (T.apply(p) if len(p) else p)

        return FeatureSet(
            tf(self.edge_points), self.edge_layers, self.edge_index,
            tf(self.planar_points), self.planar_layers, self.planar_index,
            tf(self.edge_pool), self.edge_pool_layers, tf(self.planar_pool), self.planar_pool_layers,
        )


@dataclass
class OdometryEstimate:
    pose: PoseTransform
    residual: float
    initial_residual: float = float("nan")
    converged: bool = True
    iterations: int = 0
    correspondences: int = 0
    degenerate: bool = False
    history: list = field(default_factory=list)


@dataclass(frozen=True)
class FusedPose:
    pose: PoseTransform
    lidar_weight: float
    gps_weight: float


@dataclass(frozen=True)
class OdometryConfig:
    half_window: int = 3
    edge_thresh: float = 0.05
    plane_thresh: float = 0.005
    max_per_sector: int = 12
    n_sectors: int = 6
    occlusion_ratio: float = 0.1
    pool_voxel: float = 0.2
    max_corr_dist: float = 1.0
    plane_neighbours: int = 24
    plane_fit_tol: float = 0.05
    robust_scale: float | None = 0.1
    max_lm_iter: int = 20
    lm_inner: int = 3
    step_tol: float = 1e-4
    lambda0: float = 1e-3
    degeneracy_ratio: float = 1e-7
    min_range: float = 0.5


def smoothness(scan: LaserScan, layer: int, i: int, half_window: int) -> float:
    """Local smoothness of point ``i`` on ``layer`` over its ``2*half_window`` neighbours."""
    if not 0 <= layer < scan.n_layers:
        raise InvalidIndexError(f"layer {layer} out of range")
    pts = scan.layers[layer]
    if half_window < 1 or i - half_window < 0 or i + half_window >= pts.shape[0]:
        raise InvalidIndexError(f"window of {half_window} around index {i} leaves layer bounds")
    x = pts[i]
    nrm = float(np.linalg.norm(x))
    if nrm == 0.0:
        raise InvalidInputError("smoothness undefined at a zero-norm point")
    nb = np.concatenate([pts[i - half_window:i], pts[i + 1:i + half_window + 1]])
    s = (x - nb).sum(axis=0)
    return float(np.linalg.norm(s) / (nb.shape[0] * nrm))


def _voxel_downsample(points: np.ndarray, layers: np.ndarray, voxel: float):
    if points.shape[0] == 0 or voxel <= 0:
        return points, layers
    keys = np.floor(points / voxel).astype(np.int64)
    keys = np.column_stack([keys, layers])
    _, first = np.unique(keys, axis=0, return_index=True)
    first.sort()
    return points[first], layers[first]


def extract_features(
    scan: LaserScan,
    edge_thresh: float = 0.05,
    plane_thresh: float = 0.005,
    max_per_sector: int = 12,
    *,
    half_window: int = 3,
    n_sectors: int = 6,
    occlusion_ratio: float = 0.1,
    pool_voxel: float = 0.2,
    min_range: float = 0.5,
) -> FeatureSet:
    """Split a scan into edge (``c > edge_thresh``) and planar (``c < plane_thresh``) features.

    Points next to a range discontinuity on the far side are treated as occluded
    and never become features.  Within each azimuth sector of each layer at most
    ``max_per_sector`` edges (highest ``c``) and planars (lowest ``c``) are kept.
    """
    if not plane_thresh < edge_thresh:
        raise InvalidInputError("plane_thresh must be below edge_thresh")
    e_pts, e_lay, e_idx, p_pts, p_lay, p_idx = [], [], [], [], [], []
    ep_pts, ep_lay, pp_pts, pp_lay = [], [], [], []
    for li, pts in enumerate(scan.layers):
        n = pts.shape[0]
        if n < 2 * half_window + 1:
            continue
        az = scan.azimuth_index[li]
        c = _kernels.layer_smoothness(pts, az, half_window)
        rng = np.linalg.norm(pts, axis=1)
        valid = np.isfinite(c) & (rng > min_range)
        # occlusion: the farther side of a depth jump between neighbours
        jump = np.abs(np.diff(rng)) > occlusion_ratio * np.minimum(rng[:-1], rng[1:])
        occluded = np.zeros(n, dtype=bool)
        for k in np.flatnonzero(jump):
            if rng[k] > rng[k + 1]:
                occluded[max(0, k - half_window + 1):k + 1] = True
            else:
                occluded[k + 1:k + 1 + half_window] = True
        valid &= ~occluded
        is_edge = valid & (c > edge_thresh)
        is_plane = valid & (c < plane_thresh)
        ep_pts.append(pts[is_edge])
        ep_lay.append(np.full(int(is_edge.sum()), li, dtype=np.int64))
        pp_pts.append(pts[is_plane])
        pp_lay.append(np.full(int(is_plane.sum()), li, dtype=np.int64))

        azimuth = np.arctan2(pts[:, 2], pts[:, 0])
        sector = np.minimum(((azimuth + np.pi) / (2 * np.pi) * n_sectors).astype(np.int64), n_sectors - 1)
        for s in range(n_sectors):
            in_s = sector == s
            cand = np.flatnonzero(in_s & is_edge)
            if cand.size:
                chosen = cand[np.argsort(-c[cand], kind="stable")]
                taken = []
                blocked = set()
                for j in chosen:
                    if j in blocked:
                        continue
                    taken.append(j)
                    blocked.update(range(j - half_window, j + half_window + 1))
                    if len(taken) >= max_per_sector:
                        break
                taken = np.sort(np.array(taken, dtype=np.int64))
                e_pts.append(pts[taken])
                e_lay.append(np.full(taken.size, li, dtype=np.int64))
                e_idx.append(taken)
            cand = np.flatnonzero(in_s & is_plane)
            if cand.size:
                # spread planar picks evenly over the sector instead of clumping at the minimum
                step = max(1, cand.size // max_per_sector)
                taken = cand[::step][:max_per_sector]
                p_pts.append(pts[taken])
                p_lay.append(np.full(taken.size, li, dtype=np.int64))
                p_idx.append(taken)

    def cat(lst, shape):
        return np.concatenate(lst) if lst else np.zeros(shape)

    pool_p = cat(pp_pts, (0, 3))
    pool_l = cat(pp_lay, (0,)).astype(np.int64)
    pool_p, pool_l = _voxel_downsample(pool_p, pool_l, pool_voxel)
    return FeatureSet(
        cat(e_pts, (0, 3)), cat(e_lay, (0,)).astype(np.int64), cat(e_idx, (0,)).astype(np.int64),
        cat(p_pts, (0, 3)), cat(p_lay, (0,)).astype(np.int64), cat(p_idx, (0,)).astype(np.int64),
        cat(ep_pts, (0, 3)), cat(ep_lay, (0,)).astype(np.int64), pool_p, pool_l,
    )


def features_from_config(scan: LaserScan, cfg: OdometryConfig) -> FeatureSet:
    return extract_features(
        scan, cfg.edge_thresh, cfg.plane_thresh, cfg.max_per_sector,
        half_window=cfg.half_window, n_sectors=cfg.n_sectors, occlusion_ratio=cfg.occlusion_ratio,
        pool_voxel=cfg.pool_voxel, min_range=cfg.min_range,
    )


class _LayeredIndex:
    """Nearest-neighbour lookup per scan layer."""

    def __init__(self, points: np.ndarray, layers: np.ndarray):
        self.points = points
        self.layers = layers
        self.ids = np.unique(layers) if len(layers) else np.zeros(0, dtype=np.int64)
        self.sub = []
        for l in self.ids:
            idx = np.flatnonzero(layers == l)
            self.sub.append((idx, cKDTree(points[idx])))

    def per_layer_nearest(self, q: np.ndarray, gate: float):
        """Distances / global indices of the nearest point of every layer, shape ``(n, L)``."""
        n, L = q.shape[0], len(self.sub)
        d = np.full((n, L), np.inf)
        gi = np.zeros((n, L), dtype=np.int64)
        for k, (idx, tree) in enumerate(self.sub):
            dd, ii = tree.query(q, k=1, distance_upper_bound=gate)
            ok = np.isfinite(dd)
            d[ok, k] = dd[ok]
            gi[ok, k] = idx[ii[ok]]
        return d, gi


class _Registration:
    """Robust point-to-line / point-to-plane objective against the previous feature pools.

    Correspondences come from :meth:`associate` and are held fixed while LM
    steps are taken; the caller re-associates between rounds.
    """

    def __init__(self, prev: FeatureSet, edges: np.ndarray, planars: np.ndarray, gate: float,
                 plane_k: int = 24, plane_fit_tol: float = 0.05, robust_scale: float | None = None):
        self.robust_scale = robust_scale
        self.gate = gate
        self.edges = edges
        self.planars = planars
        pl = prev.planar_pool_layers if prev.planar_pool is not None and len(prev.planar_pool) else prev.planar_layers
        ep = prev.edge_pool if prev.edge_pool is not None and len(prev.edge_pool) else prev.edge_points
        el = prev.edge_pool_layers if prev.edge_pool is not None and len(prev.edge_pool) else prev.edge_layers
        pp = prev.planar_pool if prev.planar_pool is not None and len(prev.planar_pool) else prev.planar_points
        self.edge_index = _LayeredIndex(ep, el) if len(ep) >= 2 else None
        self.plane_candidates = plane_k
        self.per_layer = 3
        self.plane_fit_tol = plane_fit_tol
        self.plane_points = np.ascontiguousarray(pp, dtype=np.float64)
        self.plane_layers = np.ascontiguousarray(pl, dtype=np.int64)
        self.plane_tree = cKDTree(pp) if len(pp) >= 3 else None

    def _edge_terms(self, Y):
        ix = self.edge_index
        if ix is None or len(Y) == 0:
            return np.zeros(0, bool), np.zeros((0, 3)), np.zeros((0, 3))
        d, gi = ix.per_layer_nearest(Y, self.gate)
        jcol = np.argmin(d, axis=1)
        rows = np.arange(len(Y))
        dj = d[rows, jcol]
        j = gi[rows, jcol]
        d_other = d.copy()
        d_other[rows, jcol] = np.inf
        mcol = np.argmin(d_other, axis=1)
        dm = d_other[rows, mcol]
        m = gi[rows, mcol]
        # the line must join two scan layers: two points of one ring across a
        # thin object describe a chord, not the object's edge
        l = m
        ok = np.isfinite(dj) & np.isfinite(dm) & (dm <= 2.0 * np.maximum(dj, 0.05) + 0.3)
        a = ix.points[j]
        b = ix.points[l]
        u = b - a
        un = np.linalg.norm(u, axis=1)
        ok &= un > 0.02
        u = u / np.where(un > 0, un, 1.0)[:, None]
        return ok, a, u

    def _plane_terms(self, Y):
        """Plane patch per query: up to three points from each of the three nearest scan layers.

        One ring is a curve that travels with the sensor and two rings can be a
        ground line and a wall line, which always look coplanar; a third layer
        settles the patch orientation.
        """
        if self.plane_tree is None or len(Y) == 0:
            return np.zeros(0, bool), np.zeros((0, 3)), np.zeros((0, 3))
        K = min(self.plane_candidates, len(self.plane_points))
        d, idx = self.plane_tree.query(Y, k=K, distance_upper_bound=4.0 * self.gate)
        found = np.isfinite(d)
        idx = np.ascontiguousarray(np.where(found, idx, 0), dtype=np.int64)
        ok, mu, nrm = _kernels.plane_patches(
            self.plane_points, self.plane_layers, idx, np.ascontiguousarray(found, dtype=np.uint8),
            3, self.per_layer, self.plane_fit_tol,
        )
        return ok, mu, nrm

    def associate(self, T: PoseTransform):
        """Correspondences (anchor point and line direction / plane normal) for the features moved by ``T``."""
        R, t = T.rotation, T.translation
        out = {}
        if len(self.edges):
            out["edge"] = self._edge_terms(self.edges @ R.T + t)
        if len(self.planars):
            out["plane"] = self._plane_terms(self.planars @ R.T + t)
        return out

    def _rho(self, d2: np.ndarray) -> np.ndarray:
        if self.robust_scale is None:
            return d2
        s2 = self.robust_scale**2
        return s2 * np.log1p(d2 / s2)

    def _weight(self, d: np.ndarray) -> np.ndarray:
        if self.robust_scale is None:
            return np.ones_like(d)
        return 1.0 / np.sqrt(1.0 + (d / self.robust_scale) ** 2)

    def evaluate(self, T: PoseTransform, want_jacobian: bool = False, assoc=None):
        """Cost ``sum(rho(min(d_i, gate)^2))``; re-associates unless ``assoc`` is given.

        ``rho`` is the identity (truncated least squares) or the Cauchy loss
        when a robust scale is set; the returned residuals and Jacobian are
        reweighted so that a Gauss-Newton step on them descends ``rho``.
        """
        if assoc is None:
            assoc = self.associate(T)
        R, t = T.rotation, T.translation
        cost = 0.0
        res, jac = [], []
        n_ok = 0
        c2 = self.gate**2
        if "edge" in assoc:
            Y = self.edges @ R.T + t
            ok, a, u = assoc["edge"]
            diff = Y - a
            e = diff - (diff * u).sum(axis=1)[:, None] * u
            dist = np.linalg.norm(e, axis=1)
            cost += float(self._rho(np.minimum(dist[ok] ** 2, c2)).sum())
            ok = ok & (dist < self.gate)
            n_ok += int(ok.sum())
            if want_jacobian and ok.any():
                eh = e[ok] / np.maximum(dist[ok], 1e-12)[:, None]
                w = self._weight(dist[ok])
                res.append(w * dist[ok])
                jac.append(w[:, None] * np.hstack([eh, np.cross(Y[ok], eh)]))
        if "plane" in assoc:
            Y = self.planars @ R.T + t
            ok, p0, nrm = assoc["plane"]
            dist = ((Y - p0) * nrm).sum(axis=1)
            cost += float(self._rho(np.minimum(dist[ok] ** 2, c2)).sum())
            ok = ok & (np.abs(dist) < self.gate)
            n_ok += int(ok.sum())
            if want_jacobian and ok.any():
                w = self._weight(dist[ok])
                res.append(w * dist[ok])
                jac.append(w[:, None] * np.hstack([nrm[ok], np.cross(Y[ok], nrm[ok])]))
        if not want_jacobian:
            return cost, n_ok
        r = np.concatenate(res) if res else np.zeros(0)
        J = np.vstack(jac) if jac else np.zeros((0, 6))
        return cost, n_ok, r, J


def _apply_increment(T: PoseTransform, delta: np.ndarray) -> PoseTransform:
    inc = PoseTransform.from_arrays(delta[:3], quat_from_rotvec(delta[3:]))
    return compose(inc, T)


def match_and_solve(
    prev: FeatureSet,
    curr,
    T_init: PoseTransform | None = None,
    max_lm_iter: int = 20,
    lambda0: float = 1e-3,
    *,
    cfg: OdometryConfig | None = None,
) -> OdometryEstimate:
    """Register ``curr`` (a scan or its features) against ``prev`` starting from ``T_init``.

    The returned pose maps the current sensor frame into the frame in which
    ``prev`` is expressed.  Each LM step solves
    ``(J^T J + lambda*diag(J^T J)) delta = -J^T d`` for a left-multiplied
    increment on fixed correspondences; a step is kept only if the robust
    cost drops, so the cost never increases over accepted steps.  Between
    rounds the features are re-associated at the current estimate.
    """
    cfg = cfg or OdometryConfig()
    if prev is None or len(prev) == 0:
        raise InvalidInputError("previous feature set is empty")
    feats = curr if isinstance(curr, FeatureSet) else features_from_config(curr, cfg)
    T = T_init or PoseTransform.identity()
    reg = _Registration(prev, feats.edge_points, feats.planar_points, cfg.max_corr_dist,
                        cfg.plane_neighbours, cfg.plane_fit_tol, cfg.robust_scale)

    assoc = reg.associate(T)
    cost, n_ok, r, J = reg.evaluate(T, True, assoc)
    initial = cost
    if n_ok < 6:
        raise DegenerateRegistrationError(f"only {n_ok} feature correspondences")
    ev = np.linalg.eigvalsh(J.T @ J)
    if ev[0] <= cfg.degeneracy_ratio * max(ev[-1], 1e-300):
        raise DegenerateRegistrationError("registration is unobservable in at least one direction")

    # Outer loop: re-associate at the current estimate.  Inner loop: a few LM
    # steps on fixed correspondences, each accepted only if it lowers that cost.
    # The best freshly associated pose is returned, so the final cost never
    # exceeds the cost at T_init.
    lam = lambda0
    history = [cost]
    it = 0
    converged = False
    T_cur, r_cur, J_cur = T, r, J
    while it < max_lm_iter:
        c_in = reg.evaluate(T_cur, False, assoc)[0]
        moved = 0.0
        accepted = 0
        while accepted < cfg.lm_inner and it < max_lm_iter and lam < 1e8:
            it += 1
            H = J_cur.T @ J_cur
            g = J_cur.T @ r_cur
            try:
                delta = -np.linalg.solve(H + lam * np.diag(np.diag(H)), g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            T_new = _apply_increment(T_cur, delta)
            c_new, n_new = reg.evaluate(T_new, False, assoc)
            if c_new < c_in and n_new >= 6:
                T_cur, c_in = T_new, c_new
                lam = max(lam / 10.0, 1e-12)
                moved += float(np.linalg.norm(delta))
                accepted += 1
                _, _, r_cur, J_cur = reg.evaluate(T_cur, True, assoc)
            else:
                lam *= 10.0
        assoc = reg.associate(T_cur)
        c_fresh, n_fresh, r_cur, J_cur = reg.evaluate(T_cur, True, assoc)
        if n_fresh < 6:
            break
        if c_fresh < cost:
            T, cost, n_ok = T_cur, c_fresh, n_fresh
            history.append(cost)
        if moved < cfg.step_tol:
            converged = True
            break
    return OdometryEstimate(
        pose=T,
        residual=cost,
        initial_residual=initial,
        converged=converged,
        iterations=it,
        correspondences=n_ok,
        history=history,
    )


def accumulate_frames(frames, target: PoseTransform, m: int = 5) -> np.ndarray:
    """Stack the points of the last ``m`` ``(scan, pose)`` frames expressed in ``target``'s frame."""
    if m < 1:
        raise InvalidInputError("m must be >= 1")
    out = []
    for scan, pose in list(frames)[-m:]:
        pts = scan.points() if isinstance(scan, LaserScan) else np.asarray(scan, dtype=float).reshape(-1, 3)
        if len(pts):
            out.append(transfer_point(pts, pose, target))
    return np.vstack(out) if out else np.zeros((0, 3))


def fuse_pose(lidar: OdometryEstimate | None, gps: PoseTransform | None, alpha: float) -> FusedPose:
    """Fixed-gain complementary blend; ``alpha`` is the GPS weight.

    Translation is interpolated linearly and rotation by slerp.  A missing or
    degenerate source hands over to the other one unchanged.
    """
    if not 0.0 <= alpha <= 1.0:
        raise InvalidInputError("alpha must lie in [0, 1]")
    lidar_ok = lidar is not None and not lidar.degenerate
    if not lidar_ok and gps is None:
        raise LocalizationLostError("neither LIDAR odometry nor GPS-INS is available")
    if gps is None:
        return FusedPose(lidar.pose, 1.0, 0.0)
    if not lidar_ok:
        return FusedPose(gps, 0.0, 1.0)
    if alpha == 0.0:
        return FusedPose(lidar.pose, 1.0, 0.0)
    if alpha == 1.0:
        return FusedPose(gps, 0.0, 1.0)
    t = (1.0 - alpha) * lidar.pose.translation + alpha * gps.translation
    q = quat_slerp(lidar.pose.quaternion, gps.quaternion, alpha)
    return FusedPose(PoseTransform.from_arrays(t, q), 1.0 - alpha, alpha)


class LidarOdometry:
    """Sequential scan-to-scan odometry; owns the previous features and the pose chain.

    ``update`` registers a new scan against the previous one using the previous
    pose as the initial guess.  ``reset_pose`` lets a fusion stage feed its
    corrected pose back so the chain does not drift away from it.
    """

    def __init__(self, cfg: OdometryConfig | None = None, initial: PoseTransform | None = None):
        self.cfg = cfg or OdometryConfig()
        self.pose = initial or PoseTransform.identity()
        self._prev: FeatureSet | None = None
        self._prev_pose: PoseTransform | None = None
        self.last: OdometryEstimate | None = None

    def update(self, scan: LaserScan, prior: PoseTransform | None = None) -> OdometryEstimate:
        feats = features_from_config(scan, self.cfg)
        if self._prev is None:
            est = OdometryEstimate(self.pose, 0.0, 0.0, True, 0, 0)
        else:
            prev_world = self._prev.transformed(self._prev_pose)
            try:
                est = match_and_solve(
                    prev_world, feats, prior or self.pose, self.cfg.max_lm_iter, self.cfg.lambda0, cfg=self.cfg
                )
            except (DegenerateRegistrationError, InvalidInputError):
                est = OdometryEstimate(prior or self.pose, float("nan"), float("nan"), False, 0, 0, degenerate=True)
        self.pose = est.pose
        self._prev = feats
        self._prev_pose = est.pose
        self.last = est
        return est

    def reset_pose(self, pose: PoseTransform) -> None:
        self.pose = pose
        if self._prev is not None:
            self._prev_pose = pose
