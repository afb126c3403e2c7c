"""Deterministic synthetic world: track generator, vehicle plant, LIDAR, GPS-INS and camera patches.

Every stochastic sensor draws from ``default_rng([seed, sensor_id, step])`` so a
reading depends only on the seed and the step index, never on call order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import _kernels
from .control import (
    ControlInput,
    VehicleParams,
    VehicleState,
    integrate,
    rk4_step,
    tire_forces,
    vehicle_derivative,
)
from .errors import InvalidInputError, InvalidTrackError, LowSpeedError
from .geometry import PoseTransform, planar_from_pose, pose_from_planar, wrap_angle
from .odometry import LaserScan
from .planning import WaypointPath, build_trajectory, sample_waypoints
from .vision import REFERENCE_HUES, ConeColor, ImagePatch

LIDAR_ID, GPS_ID, CAMERA_ID, PLANT_ID = 1, 2, 3, 4


@dataclass(frozen=True)
class TrackSpec:
    control_points: np.ndarray
    width: float = 4.0
    cone_spacing: float = 5.0
    seed: int = 0
    cone_jitter: float = 0.0
    scenery: bool = True

    def __post_init__(self):
        pts = np.array(self.control_points, dtype=float).reshape(-1, 2)
        pts.setflags(write=False)
        object.__setattr__(self, "control_points", pts)
        if self.width <= VehicleParams().width:
            raise InvalidTrackError("track width must exceed the vehicle width")
        if self.cone_spacing <= 0:
            raise InvalidTrackError("cone spacing must be positive")

    @classmethod
    def reference(cls, seed: int = 0) -> "TrackSpec":
        """The fixed reference circuit (about 190 m, one hairpin-free chicane)."""
        th = np.linspace(0.0, 2 * np.pi, 24, endpoint=False)
        r = 24.0 + 3.0 * np.cos(2 * th) + 2.0 * np.sin(3 * th)
        return cls(np.column_stack([1.35 * r * np.cos(th), r * np.sin(th)]), seed=seed)

    @classmethod
    def circle(cls, radius: float, n: int = 360, **kw) -> "TrackSpec":
        th = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
        return cls(np.column_stack([radius * np.cos(th), radius * np.sin(th)]), **kw)


@dataclass
class WorldGroundTruth:
    cones: np.ndarray  # (n, 2)
    colors: list
    centerline: WaypointPath
    start: tuple  # (x, y, yaw)
    width: float = 4.0
    cylinders: np.ndarray = field(default_factory=lambda: np.zeros((0, 5)))  # scenery (cx, cy, r, z0, z1)
    walls: np.ndarray = field(default_factory=lambda: np.zeros((0, 6)))
    cone_radius: float = 0.12
    cone_height: float = 0.3

    def cone_cylinders(self) -> np.ndarray:
        n = len(self.cones)
        return np.column_stack([self.cones, np.full(n, self.cone_radius), np.zeros(n), np.full(n, self.cone_height)])

    def solids(self) -> np.ndarray:
        return np.vstack([self.cone_cylinders(), self.cylinders.reshape(-1, 5)])

    def lateral_offset(self, x: float, y: float, hint=None) -> float:
        return self.centerline.project(x, y, hint)[1]


def _segments_intersect(P: np.ndarray) -> bool:
    """True when two non-adjacent edges of the closed polyline ``P`` cross."""
    A = P
    B = np.roll(P, -1, axis=0)
    n = len(P)
    d = B - A
    for i in range(n):
        j = np.arange(i + 2, n)
        if i == 0:
            j = j[j != n - 1]
        if j.size == 0:
            continue
        r = d[i]
        s = d[j]
        qp = A[j] - A[i]
        den = r[0] * s[:, 1] - r[1] * s[:, 0]
        ok = np.abs(den) > 1e-12
        dsafe = np.where(ok, den, 1.0)
        t = (qp[:, 0] * s[:, 1] - qp[:, 1] * s[:, 0]) / dsafe
        u = (qp[:, 0] * r[1] - qp[:, 1] * r[0]) / dsafe
        if np.any(ok & (t >= 0) & (t <= 1) & (u >= 0) & (u <= 1)):
            return True
    return False


def generate_track(spec: TrackSpec) -> WorldGroundTruth:
    """Closed spline centreline through the control points with cone pairs every ``cone_spacing`` metres.

    Left cones are red, right cones blue; the pair at the start line is yellow.
    """
    traj = build_trajectory(spec.control_points, closed=True)
    dense = sample_waypoints(traj, 0.5)
    P = np.array([[w.x, w.y] for w in dense])
    if _segments_intersect(P):
        raise InvalidTrackError("centreline intersects itself")
    kmax = max(abs(w.curvature) for w in dense)
    if kmax * spec.width / 2.0 >= 1.0:
        raise InvalidTrackError("a corner is tighter than half the track width")
    centerline = WaypointPath(dense, closed=True)
    pairs = sample_waypoints(traj, spec.cone_spacing)
    rng = np.random.default_rng([spec.seed, 0])
    cones, colors = [], []
    half = spec.width / 2.0
    for k, w in enumerate(pairs):
        nx, ny = -math.sin(w.heading), math.cos(w.heading)
        for side, color in ((1.0, ConeColor.RED), (-1.0, ConeColor.BLUE)):
            cones.append((w.x + side * half * nx, w.y + side * half * ny))
            colors.append(ConeColor.YELLOW if k == 0 else color)
    cones = np.array(cones)
    if spec.cone_jitter > 0:
        cones = cones + rng.normal(0.0, spec.cone_jitter, cones.shape)
    start = (dense[0].x, dense[0].y, dense[0].heading)
    cyl = _scenery(pairs, spec, rng) if spec.scenery else np.zeros((0, 5))
    return WorldGroundTruth(cones, colors, centerline, start, spec.width, cyl)


def _scenery(pairs, spec: TrackSpec, rng) -> np.ndarray:
    """Tyre stacks a few metres outside the track: landmarks for scan matching, too big to pass as cones."""
    out = []
    for k, w in enumerate(pairs):
        if k % 2:
            continue
        nx, ny = -math.sin(w.heading), math.cos(w.heading)
        for side in (1.0, -1.0):
            off = spec.width / 2.0 + 3.5 + float(rng.uniform(0.0, 2.0))
            out.append((w.x + side * off * nx, w.y + side * off * ny, 0.5, 0.0, 0.8))
    cyl = np.array(out).reshape(-1, 5)
    # drop stacks that ended up inside the corridor elsewhere on the circuit
    traj_pts = np.array([[w.x, w.y] for w in pairs])
    keep = []
    for c in cyl:
        d = np.hypot(traj_pts[:, 0] - c[0], traj_pts[:, 1] - c[1]).min()
        keep.append(d > spec.width / 2.0 + 2.0)
    return cyl[np.array(keep, dtype=bool)] if len(cyl) else cyl


def feature_rich_loop(length: float = 40.0, breadth: float = 20.0, seed: int = 0) -> WorldGroundTruth:
    """Walled rectangular circuit with posts: a structured scene for scan-matching tests."""
    corners = np.array([[0.0, 0.0], [length, 0.0], [length, breadth], [0.0, breadth]])
    pts = []
    for a, b in zip(corners, np.roll(corners, -1, axis=0)):
        for t in np.linspace(0.0, 1.0, 9)[:-1]:
            pts.append(a + t * (b - a))
    pts = np.array(pts)
    # round the corners by smoothing the polygon once
    pts = 0.25 * np.roll(pts, 1, axis=0) + 0.5 * pts + 0.25 * np.roll(pts, -1, axis=0)
    traj = build_trajectory(pts, closed=True)
    dense = sample_waypoints(traj, 0.5)
    path = WaypointPath(dense, closed=True)
    walls = []
    for off, h in ((-6.0, 2.5), (6.0, 2.5)):
        lo = corners + np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]]) * (-off)
        for a, b in zip(lo, np.roll(lo, -1, axis=0)):
            walls.append((a[0], a[1], b[0], b[1], 0.0, h))
    rng = np.random.default_rng([seed, 7])
    posts = []
    for w in sample_waypoints(traj, 6.0):
        nx, ny = -math.sin(w.heading), math.cos(w.heading)
        for side in (1.0, -1.0):
            off = 3.5 + float(rng.uniform(0.0, 1.0))
            posts.append((w.x + side * off * nx, w.y + side * off * ny, 0.15, 0.0, 1.5))
    start = (dense[0].x, dense[0].y, dense[0].heading)
    return WorldGroundTruth(np.zeros((0, 2)), [], path, start, 4.0, np.array(posts), np.array(walls))


# -- sensors -------------------------------------------------------------------------


@dataclass(frozen=True)
class LidarConfig:
    n_layers: int = 16
    fov_low: float = -15.0
    fov_high: float = 15.0
    azimuth_res: float = 0.4
    range_noise: float = 0.02
    rate: float = 10.0
    max_range: float = 60.0
    mount_height: float = 0.35


@dataclass(frozen=True)
class GpsConfig:
    pos_noise: float = 0.05
    heading_noise: float = 0.005
    dropout: float = 0.0
    rate: float = 100.0


@dataclass(frozen=True)
class CameraConfig:
    patch_noise: float = 0.0
    patch_size: int = 64
    fov_deg: float = 90.0
    max_range: float = 15.0


@dataclass(frozen=True)
class SensorConfig:
    lidar: LidarConfig = field(default_factory=LidarConfig)
    gps: GpsConfig = field(default_factory=GpsConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)

    def __post_init__(self):
        l, g, c = self.lidar, self.gps, self.camera
        if l.rate <= 0 or g.rate <= 0:
            raise InvalidInputError("sensor rates must be positive")
        if l.range_noise < 0 or g.pos_noise < 0 or g.heading_noise < 0 or c.patch_noise < 0:
            raise InvalidInputError("noise levels must be nonnegative")
        if not 0.0 <= g.dropout <= 1.0:
            raise InvalidInputError("dropout must be a probability")
        if l.n_layers < 1 or l.azimuth_res <= 0:
            raise InvalidInputError("bad LIDAR geometry")


@lru_cache(maxsize=8)
def _ray_table(cfg: LidarConfig):
    elev = np.radians(np.linspace(cfg.fov_low, cfg.fov_high, cfg.n_layers))
    n_az = int(round(360.0 / cfg.azimuth_res))
    az = np.radians(-180.0 + cfg.azimuth_res * np.arange(n_az))
    E, A = np.meshgrid(elev, az, indexing="ij")
    fwd = np.cos(E) * np.cos(A)
    left = np.cos(E) * np.sin(A)
    up = np.sin(E)
    return fwd.ravel(), left.ravel(), up.ravel(), n_az


def _planar(pose):
    if isinstance(pose, VehicleState):
        return pose.x, pose.y, pose.psi
    if isinstance(pose, PoseTransform):
        return planar_from_pose(pose)
    x, y, yaw = pose
    return float(x), float(y), float(yaw)


def lidar_ranges(pose, world: WorldGroundTruth, cfg: LidarConfig):
    """Noise-free ranges for every ray (``inf`` for no return) plus the ray table."""
    x, y, yaw = _planar(pose)
    fwd, left, up, n_az = _ray_table(cfg)
    c, s = math.cos(yaw), math.sin(yaw)
    dirs = np.ascontiguousarray(np.column_stack([fwd * c - left * s, fwd * s + left * c, up]))
    solids = world.solids()
    if len(solids):
        near = np.hypot(solids[:, 0] - x, solids[:, 1] - y) < cfg.max_range + 1.0
        solids = solids[near]
    origin = np.array([x, y, cfg.mount_height])
    t = _kernels.raycast(origin, dirs, float(cfg.max_range), np.ascontiguousarray(solids.reshape(-1, 5)),
                         np.ascontiguousarray(world.walls.reshape(-1, 6)), 0.0)
    return t, (fwd, left, up, n_az)


def simulate_lidar(pose, world: WorldGroundTruth, cfg: SensorConfig | LidarConfig, seed: int = 0,
                   step: int = 0, timestamp: float = 0.0) -> LaserScan:
    """Multi-layer scan in the sensor frame (x forward, y down, z left)."""
    lc = cfg.lidar if isinstance(cfg, SensorConfig) else cfg
    t, (fwd, left, up, n_az) = lidar_ranges(pose, world, lc)
    rng = np.random.default_rng([seed, LIDAR_ID, step])
    noise = rng.normal(0.0, 1.0, t.shape) * lc.range_noise
    r = t + noise
    ok = np.isfinite(t) & (r > 0.0) & (r < lc.max_range)
    r = np.where(ok, r, 0.0)
    pts = np.column_stack([r * fwd, -r * up, r * left])
    layers, az_idx = [], []
    az = np.tile(np.arange(n_az), lc.n_layers)
    for l in range(lc.n_layers):
        sl = slice(l * n_az, (l + 1) * n_az)
        m = ok[sl]
        layers.append(pts[sl][m])
        az_idx.append(az[sl][m])
    return LaserScan(layers, timestamp, az_idx)


def simulate_gps_ins(true_state, cfg: SensorConfig | GpsConfig, seed: int = 0, step: int = 0,
                     height: float | None = None) -> PoseTransform | None:
    """Noisy sensor-frame pose, or ``None`` when the fix drops out."""
    gc = cfg.gps if isinstance(cfg, SensorConfig) else cfg
    h = height if height is not None else (cfg.lidar.mount_height if isinstance(cfg, SensorConfig) else 0.35)
    rng = np.random.default_rng([seed, GPS_ID, step])
    drop, nx, ny, nh = rng.random(), rng.normal(), rng.normal(), rng.normal()
    if drop < gc.dropout:
        return None
    x, y, yaw = _planar(true_state)
    return pose_from_planar(x + gc.pos_noise * nx, y + gc.pos_noise * ny, wrap_angle(yaw + gc.heading_noise * nh), h)


# -- plant --------------------------------------------------------------------------------


def _saturated_derivative(limit: float):
    def deriv(s, u, kappa, params):
        d = vehicle_derivative(s, u, kappa, params)
        try:
            Fyf, Fyr = tire_forces(s, params)
        except LowSpeedError:
            return d
        cap_f = limit * params.M * 9.81 * params.l_r / params.wheelbase
        cap_r = limit * params.M * 9.81 * params.l_f / params.wheelbase
        Sf = float(np.clip(Fyf, -cap_f, cap_f))
        Sr = float(np.clip(Fyr, -cap_r, cap_r))
        d[4] = (Sf + Sr) / params.M - s[3] * s[5]
        d[5] = (Sf * params.l_f - Sr * params.l_r) / params.I_zz
        return d

    return deriv


def step_plant(state: VehicleState, u: ControlInput, dt: float, params: VehicleParams, seed: int = 0,
               friction_limit: float | None = None, kappa_ref: float = 0.0, max_substep: float = 0.005) -> VehicleState:
    """Advance the plant by ``dt`` with substepped RK4.

    Without ``friction_limit`` this is exactly the controller's model
    integration.  With it, each axle's lateral force is clipped to its share of
    ``mu * M * g``.
    """
    if dt <= 0:
        raise InvalidInputError("dt must be positive")
    if friction_limit is None:
        return VehicleState.from_array(integrate(state, u, kappa_ref, dt, params, max_substep))
    deriv = _saturated_derivative(friction_limit)
    n = max(1, int(math.ceil(dt / max_substep - 1e-9)))
    s = state.as_array()
    for _ in range(n):
        s = rk4_step(s, u, kappa_ref, dt / n, params, deriv)
    return VehicleState.from_array(s)


# -- camera --------------------------------------------------------------------------------

GROUND_HUE = 150.0


def _coord_key(v: float) -> int:
    """Millimetre coordinate folded into a nonnegative seed word."""
    return int(round(float(v) * 1000)) % (1 << 32)


def _smooth_noise(rng, n: int, scale: int = 8) -> np.ndarray:
    coarse = rng.random((n // scale + 2, n // scale + 2))
    xs = np.linspace(0, coarse.shape[0] - 2, n)
    i = np.floor(xs).astype(int)
    f = xs - i
    rows = coarse[i] * (1 - f)[:, None] + coarse[i + 1] * f[:, None]
    return rows[:, i] * (1 - f)[None, :] + rows[:, i + 1] * f[None, :]


def render_ground(rng, size: int = 64) -> np.ndarray:
    hsv = np.zeros((size, size, 3))
    hsv[..., 0] = GROUND_HUE + rng.normal(0.0, 4.0, (size, size))
    hsv[..., 1] = 0.12 + 0.06 * _smooth_noise(rng, size)
    hsv[..., 2] = 0.3 + 0.25 * _smooth_noise(rng, size, 4)
    return hsv


def render_cone(hsv: np.ndarray, hue: float, scale: float, cx: float, stripe: bool = True) -> np.ndarray:
    """Paint a cone silhouette (isosceles triangle on a base band) standing on the patch bottom."""
    n = hsv.shape[0]
    height = scale * (n - 4)
    base_half = 0.35 * height
    rows = np.arange(n)[:, None]
    cols = np.arange(n)[None, :]
    bottom = n - 3
    top = bottom - height
    frac = (rows - top) / max(height, 1e-9)
    half_w = np.where((rows >= top) & (rows <= bottom), 1.0 + frac * base_half, -1.0)
    mask = np.abs(cols - cx) <= half_w
    out = hsv.copy()
    out[..., 0] = np.where(mask, hue, out[..., 0])
    out[..., 1] = np.where(mask, 0.85, out[..., 1])
    out[..., 2] = np.where(mask, 0.8, out[..., 2])
    if stripe:
        band = mask & (frac > 0.45) & (frac < 0.6)
        out[..., 1] = np.where(band, 0.3, out[..., 1])
        out[..., 2] = np.where(band, 0.95, out[..., 2])
    return out


def add_pixel_noise(hsv: np.ndarray, sigma: float, rng) -> np.ndarray:
    if sigma <= 0:
        return hsv
    out = hsv.copy()
    out[..., 0] = np.mod(out[..., 0] + 360.0 * sigma * rng.normal(size=out.shape[:2]), 360.0)
    out[..., 1:] = np.clip(out[..., 1:] + sigma * rng.normal(size=out[..., 1:].shape), 0.0, 1.0)
    return out


def simulate_camera_patch(cone_xy, color: ConeColor, vehicle_pose, cfg: SensorConfig | CameraConfig,
                          seed: int = 0, step: int = 0) -> ImagePatch | None:
    """HSV patch of one cone as seen from ``vehicle_pose``; ``None`` when outside the camera view."""
    cc = cfg.camera if isinstance(cfg, SensorConfig) else cfg
    x, y, yaw = _planar(vehicle_pose)
    dx, dy = float(cone_xy[0]) - x, float(cone_xy[1]) - y
    fwd = dx * math.cos(yaw) + dy * math.sin(yaw)
    lat = -dx * math.sin(yaw) + dy * math.cos(yaw)
    dist = math.hypot(fwd, lat)
    if fwd <= 0.5 or dist > cc.max_range or abs(math.degrees(math.atan2(lat, fwd))) > cc.fov_deg / 2:
        return None
    rng = np.random.default_rng([seed, CAMERA_ID, step, _coord_key(cone_xy[0]), _coord_key(cone_xy[1])])
    hsv = render_ground(rng, cc.patch_size)
    hue = REFERENCE_HUES.get(color, 0.0)
    scale = float(np.clip(3.0 / dist, 0.55, 0.9))
    hsv = render_cone(hsv, hue, scale, cc.patch_size / 2 + rng.uniform(-3, 3))
    return ImagePatch(add_pixel_noise(hsv, cc.patch_noise, rng), "hsv")


def synthetic_patch(positive: bool, rng, size: int = 64, noise: float = 0.0, color: ConeColor | None = None):
    """Training sample: a cone silhouette over ground, or a textured negative (ground, stripes, blobs)."""
    hsv = render_ground(rng, size)
    if positive:
        col = color or [ConeColor.RED, ConeColor.BLUE, ConeColor.YELLOW][int(rng.integers(3))]
        hsv = render_cone(hsv, REFERENCE_HUES[col], float(rng.uniform(0.5, 0.95)), size / 2 + rng.uniform(-6, 6),
                          stripe=bool(rng.integers(2)))
    else:
        kind = int(rng.integers(3))
        if kind == 1:  # painted line
            c0 = int(rng.integers(0, size - 8))
            w = int(rng.integers(3, 8))
            hsv[:, c0:c0 + w, 2] = 0.9
            hsv[:, c0:c0 + w, 1] = 0.05
        elif kind == 2:  # random blob
            cy, cx = rng.uniform(10, size - 10, 2)
            rr = rng.uniform(4, 12)
            yy, xx = np.mgrid[:size, :size]
            m = (yy - cy) ** 2 + (xx - cx) ** 2 < rr * rr
            hsv[..., 2] = np.where(m, rng.uniform(0.5, 0.9), hsv[..., 2])
    return ImagePatch(add_pixel_noise(hsv, noise, rng), "hsv")


def camera_view(world: WorldGroundTruth, target_xy, vehicle_pose, cfg: SensorConfig | CameraConfig, seed: int = 0,
                step: int = 0, match_radius: float = 0.5) -> ImagePatch | None:
    """Patch around a LIDAR-pointed map position: the real cone there if any, else background clutter."""
    cc = cfg.camera if isinstance(cfg, SensorConfig) else cfg
    tx, ty = float(target_xy[0]), float(target_xy[1])
    if len(world.cones):
        d = np.hypot(world.cones[:, 0] - tx, world.cones[:, 1] - ty)
        i = int(np.argmin(d))
        if d[i] <= match_radius:
            return simulate_camera_patch(world.cones[i], world.colors[i], vehicle_pose, cc, seed, step)
    x, y, yaw = _planar(vehicle_pose)
    fwd = (tx - x) * math.cos(yaw) + (ty - y) * math.sin(yaw)
    if fwd <= 0.5:
        return None
    rng = np.random.default_rng([seed, CAMERA_ID, step, _coord_key(tx), _coord_key(ty)])
    return synthetic_patch(False, rng, cc.patch_size, cc.patch_noise)
