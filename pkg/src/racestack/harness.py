"""Two-lap mission runner, driving metrics and the MPC / pure-pursuit comparison.

The simulated world is the only source of truth.  The autonomy loop sees it
through the LIDAR, GPS-INS and camera simulators plus the vehicle's own speed,
yaw-rate and actuator readings; it never reads cone positions directly.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io as rio
from .control import (
    ControlInput,
    MpcConfig,
    MpcController,
    PurePursuitConfig,
    PurePursuitController,
    VehicleParams,
    VehicleState,
    vehicle_derivative,
)
from .detection import DetectionConfig, detect_cones
from .errors import (
    DegenerateError,
    InsufficientDataError,
    InvalidInputError,
    InvalidLogError,
    LocalizationLostError,
)
from .geometry import planar_from_pose, pose_from_planar, sensor_to_map, wrap_angle
from .ground import GroundConfig, segment
from .mission import AsState, MissionEvent, MissionMode, StateMachine
from .odometry import LidarOdometry, OdometryConfig, OdometryEstimate, fuse_pose
from .planning import WaypointPath, plan_path
from .sim import (
    SensorConfig,
    TrackSpec,
    WorldGroundTruth,
    camera_view,
    generate_track,
    simulate_gps_ins,
    simulate_lidar,
    step_plant,
    synthetic_patch,
)
from .trackmap import (
    LoopClosureConfig,
    TrackMap,
    detect_loop,
    extract_midline,
    insert_observations,
    loop_closure_coefficient,
    refine_with_map,
)
from .vision import ConeColor, classify_color, hog_features, svm_predict, svm_train

CONTROLLERS = ("mpc", "pure_pursuit")

# mission-time odometry: fewer features and LM rounds than the offline default,
# since a dead-reckoned prior is available and GPS is blended in
MISSION_ODOMETRY = OdometryConfig(max_per_sector=6, max_lm_iter=9)
# warm-started every step, so far fewer solver iterations than a cold solve needs
MISSION_MPC = MpcConfig(iterations=80)


@dataclass
class RunConfig:
    track: TrackSpec = field(default_factory=TrackSpec.reference)
    track_file: str | None = None
    sensors: SensorConfig = field(default_factory=SensorConfig)
    controller: str = "mpc"
    seed: int = 0
    output_dir: str | None = None
    lap1_speed: float = 3.0
    lap2_ratio: float = 2.2
    dt: float = 0.05
    lidar_every: int = 2
    gps_alpha_lap1: float = 0.5
    gps_alpha_lap2: float = 0.8
    lap2_gps_dropout: float | None = None
    estop_time: float | None = None
    friction_limit: float | None = None
    max_time: float = 240.0
    use_lidar_odometry: bool = True
    detection_range: float = 14.0
    local_horizon: float = 18.0
    blind_limit: float = 3.0
    svm_samples: int = 120
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    mpc: MpcConfig = MISSION_MPC
    pure_pursuit: PurePursuitConfig = field(default_factory=PurePursuitConfig)
    odometry: OdometryConfig = MISSION_ODOMETRY
    loop: LoopClosureConfig = field(default_factory=LoopClosureConfig)
    ground: GroundConfig = field(default_factory=GroundConfig)
    detection: DetectionConfig = field(default_factory=DetectionConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.controller not in CONTROLLERS:
            raise InvalidInputError(f"controller must be one of {CONTROLLERS}, got {self.controller!r}")
        if not isinstance(self.seed, (int, np.integer)) or isinstance(self.seed, bool):
            raise InvalidInputError("seed must be an integer")
        if self.lap1_speed <= 0 or self.lap2_ratio <= 0:
            raise InvalidInputError("target speeds must be positive")
        if self.dt <= 0 or self.lidar_every < 1 or self.max_time <= 0:
            raise InvalidInputError("dt, lidar_every and max_time must be positive")
        for a in (self.gps_alpha_lap1, self.gps_alpha_lap2):
            if not 0.0 <= a <= 1.0:
                raise InvalidInputError("GPS blend factors must lie in [0, 1]")
        if self.lap2_gps_dropout is not None and not 0.0 <= self.lap2_gps_dropout <= 1.0:
            raise InvalidInputError("lap2_gps_dropout must lie in [0, 1]")

    @property
    def lap2_speed(self) -> float:
        return self.lap1_speed * self.lap2_ratio


# flat key = value names accepted by the CLI and config files, mapped onto RunConfig fields
_SECTIONS = {
    "vehicle": VehicleParams, "mpc": MpcConfig, "pure_pursuit": PurePursuitConfig, "odometry": OdometryConfig,
    "loop": LoopClosureConfig, "ground": GroundConfig, "detection": DetectionConfig,
}
_SENSOR_SECTIONS = ("lidar", "gps", "camera")


def _convert(text: str, current):
    if isinstance(current, bool):
        low = text.strip().lower()
        if low not in ("1", "0", "true", "false", "yes", "no"):
            raise InvalidInputError(f"not a boolean: {text!r}")
        return low in ("1", "true", "yes")
    if isinstance(current, (int, np.integer)):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if current is None:
        low = text.strip().lower()
        if low in ("none", ""):
            return None
        try:
            return float(text)
        except ValueError:
            return text
    return text


def run_config_from_mapping(values: dict, base: RunConfig | None = None) -> RunConfig:
    """Apply ``key = value`` strings; dotted keys reach nested sections, e.g. ``mpc.N`` or ``gps.dropout``.

    Raises :class:`InvalidInputError` for unknown keys or unparsable values.
    """
    cfg = base or RunConfig()
    top, nested = {}, {}
    for key, text in values.items():
        key = key.strip().replace("-", "_")
        if "." in key:
            sec, name = key.split(".", 1)
            nested.setdefault(sec, {})[name] = text
        else:
            top[key] = text
    changes = {}
    names = {f.name: f for f in dataclasses.fields(RunConfig)}
    try:
        for key, text in top.items():
            if key == "track_file":
                changes[key] = None if text.strip().lower() in ("", "none") else text
            elif key == "output_dir":
                changes[key] = text
            elif key == "controller":
                changes[key] = text.strip()
            elif key in names and key not in _SECTIONS and key not in ("track", "sensors"):
                changes[key] = _convert(text, getattr(cfg, key))
            else:
                raise InvalidInputError(f"unknown config key {key!r}")
        sensors = cfg.sensors
        for sec, kv in nested.items():
            if sec in _SECTIONS:
                obj = changes.get(sec, getattr(cfg, sec))
                changes[sec] = dataclasses.replace(obj, **_converted(obj, kv))
            elif sec in _SENSOR_SECTIONS:
                obj = getattr(sensors, sec)
                sensors = dataclasses.replace(sensors, **{sec: dataclasses.replace(obj, **_converted(obj, kv))})
            elif sec == "track":
                tr = changes.get("track", cfg.track)
                changes["track"] = dataclasses.replace(tr, **_converted(tr, kv))
            else:
                raise InvalidInputError(f"unknown config section {sec!r}")
        if sensors is not cfg.sensors:
            changes["sensors"] = sensors
        return dataclasses.replace(cfg, **changes)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, InvalidInputError):
            raise
        raise InvalidInputError(str(exc)) from exc


def _converted(obj, kv: dict) -> dict:
    fields = {f.name for f in dataclasses.fields(obj)}
    out = {}
    for name, text in kv.items():
        if name not in fields or name == "control_points":
            raise InvalidInputError(f"unknown setting {name!r} for {type(obj).__name__}")
        out[name] = _convert(text, getattr(obj, name))
    return out


@dataclass(frozen=True)
class MetricBlock:
    lat_acc_std: float
    lateral_error: float
    avg_speed: float
    sideslip: float

    def __post_init__(self):
        vals = (self.lat_acc_std, self.lateral_error, self.avg_speed, self.sideslip)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidLogError("metrics must be finite")
        if self.lat_acc_std < 0 or self.avg_speed < 0:
            raise InvalidLogError("std dev and speed must be nonnegative")

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class MissionReport:
    controller: str
    seed: int
    complete: bool
    cause: str
    lap_times: list
    lap_count: int
    boundary_violations: int
    metrics: MetricBlock | None
    metrics_lap1: MetricBlock | None
    final_state: str
    loop_closures: list = field(default_factory=list)
    step_log_path: str | None = None
    steps: list = field(default_factory=list, repr=False)
    loop_trace: list = field(default_factory=list, repr=False)
    state_log: list = field(default_factory=list, repr=False)
    lap2_path: WaypointPath | None = field(default=None, repr=False)
    track_map: TrackMap | None = field(default=None, repr=False)

    def as_dict(self) -> dict:
        return {
            "controller": self.controller,
            "seed": int(self.seed),
            "complete": bool(self.complete),
            "cause": self.cause,
            "lap_times": [float(t) for t in self.lap_times],
            "lap_count": int(self.lap_count),
            "boundary_violations": int(self.boundary_violations),
            "metrics": self.metrics.as_dict() if self.metrics else None,
            "metrics_lap1": self.metrics_lap1.as_dict() if self.metrics_lap1 else None,
            "final_state": self.final_state,
            "loop_closures": self.loop_closures,
            "step_log": self.step_log_path,
            "steps": len(self.steps),
        }


# -- metrics ----------------------------------------------------------------------------


def _polyline(truth) -> tuple[np.ndarray, bool]:
    if isinstance(truth, WaypointPath):
        return np.column_stack([truth.x, truth.y]), truth.closed
    if isinstance(truth, WorldGroundTruth):
        return _polyline(truth.centerline)
    P = np.asarray(truth, dtype=float).reshape(-1, 2)
    return P, False


def distance_to_polyline(points, polyline, closed: bool = False) -> np.ndarray:
    """Euclidean distance from each point to the nearest segment of ``polyline``."""
    Q = np.asarray(points, dtype=float).reshape(-1, 2)
    P = np.asarray(polyline, dtype=float).reshape(-1, 2)
    if len(P) == 0:
        raise InvalidLogError("empty truth polyline")
    if len(P) == 1:
        return np.hypot(Q[:, 0] - P[0, 0], Q[:, 1] - P[0, 1])
    A = P if closed else P[:-1]
    B = np.roll(P, -1, axis=0) if closed else P[1:]
    D = B - A
    L2 = np.maximum((D**2).sum(axis=1), 1e-18)
    out = np.empty(len(Q))
    for i, q in enumerate(Q):
        t = np.clip(((q - A) * D).sum(axis=1) / L2, 0.0, 1.0)
        proj = A + t[:, None] * D
        out[i] = math.sqrt(float(((proj - q) ** 2).sum(axis=1).min()))
    return out


def compute_metrics(step_log, truth) -> MetricBlock:
    """Driving statistics of a step log against the ground-truth midline.

    ``step_log`` rows need ``t, x, y, U, V, a_y``; ``truth`` is a
    :class:`WaypointPath`, a world, or an ``(n, 2)`` polyline.  Lateral
    acceleration spread is the population standard deviation, speed is
    travelled distance over elapsed time and sideslip is ``atan(V/U)``.
    """
    rows = list(step_log)
    if not rows:
        raise InvalidLogError("empty step log")
    try:
        t = np.array([float(r["t"]) for r in rows])
        xy = np.array([[float(r["x"]), float(r["y"])] for r in rows])
        U = np.array([float(r["U"]) for r in rows])
        V = np.array([float(r["V"]) for r in rows])
        ay = np.array([float(r["a_y"]) for r in rows])
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidLogError(f"step log row lacks a required field: {exc}") from exc
    if np.any(np.diff(t) < 0):
        raise InvalidLogError("step log is not time ordered")
    P, closed = _polyline(truth)
    lat = float(np.mean(distance_to_polyline(xy, P, closed)))
    elapsed = float(t[-1] - t[0])
    dist = float(np.hypot(*np.diff(xy, axis=0).T).sum()) if len(xy) > 1 else 0.0
    speed = dist / elapsed if elapsed > 0 else 0.0
    beta = np.where(U > 0, np.arctan(V / np.where(U > 0, U, 1.0)), 0.0)
    return MetricBlock(float(np.std(ay)), lat, speed, float(np.mean(beta)))


# -- perception ---------------------------------------------------------------------------


def train_cone_classifier(seed: int, n: int, noise: float, size: int = 64):
    """HOG + linear SVM cone verifier trained on synthetic patches."""
    rng = np.random.default_rng([seed, 77])
    pos = [hog_features(synthetic_patch(True, rng, size, noise)) for _ in range(n)]
    neg = [hog_features(synthetic_patch(False, rng, size, noise)) for _ in range(n)]
    return svm_train(pos, neg, seed=seed)


def _perceive(scan, true_pose, world, model, cfg: RunConfig, step: int, tmap: TrackMap | None = None,
              est_pose=None, confirmed: int = 3):
    """Verified cone detections: list of (candidate, colour, (forward, left)).

    A candidate landing within half a metre of a map cone already seen
    ``confirmed`` times keeps that cone's colour without a new camera check.
    """
    pts = scan.points()
    if len(pts) < 3:
        return []
    try:
        seg = segment(pts, cfg.ground, seed=cfg.seed * 100003 + step)
    except (InsufficientDataError, DegenerateError):
        return []
    cands = detect_cones(pts[seg.obstacle_indices], cfg.detection, seg.model)
    out = []
    tx, ty, tyaw = true_pose
    P = tmap.positions() if tmap is not None and est_pose is not None else np.zeros((0, 2))
    for c in cands:
        fwd, left = float(c.position[0]), float(c.position[2])
        if math.hypot(fwd, left) > cfg.detection_range:
            continue
        if len(P):
            m = sensor_to_map(c.position.reshape(1, 3), *est_pose)[0]
            d = np.hypot(P[:, 0] - m[0], P[:, 1] - m[1])
            i = int(np.argmin(d))
            if d[i] < 0.5 and tmap.cones[i].observation_count >= confirmed:
                out.append((c, tmap.cones[i].color, (fwd, left)))
                continue
        # the camera looks where the LIDAR return really is
        target = sensor_to_map(c.position.reshape(1, 3), tx, ty, tyaw)[0]
        patch = camera_view(world, target, true_pose, cfg.sensors, cfg.seed, step)
        if patch is None:
            continue
        is_cone, _ = svm_predict(model, hog_features(patch))
        if not is_cone:
            continue
        color = classify_color(patch, seed=cfg.seed)
        if color is ConeColor.UNKNOWN:
            continue
        out.append((c, color, (fwd, left)))
    return out


def _boundary_guides(P: np.ndarray, cols: list, pose, half_width: float) -> np.ndarray:
    """Centre-line guesses from single cones: shift each cone inward by half the track width.

    The boundary direction comes from the nearest cone of the same colour, or
    the vehicle heading when that cone stands alone.  Yellow cones take their
    side from where they sit relative to the vehicle.
    """
    x, y, yaw = pose
    hd = np.array([math.cos(yaw), math.sin(yaw)])
    out = []
    for i, (p, col) in enumerate(zip(P, cols)):
        if col is ConeColor.YELLOW:
            side = [j for j, c in enumerate(cols) if c in (ConeColor.RED, ConeColor.BLUE)]
            if not side:
                out.append((np.nan, np.nan))
                continue
            j = side[int(np.argmin(np.hypot(P[side, 0] - p[0], P[side, 1] - p[1])))]
            left = cols[j] is ConeColor.RED
        elif col in (ConeColor.RED, ConeColor.BLUE):
            left = col is ConeColor.RED
        else:
            out.append((np.nan, np.nan))
            continue
        same = [j for j, c in enumerate(cols) if c is col and j != i]
        d = hd
        if same:
            dist = np.hypot(P[same, 0] - p[0], P[same, 1] - p[1])
            k = int(np.argmin(dist))
            if 1.0 < dist[k] < 8.0:
                d = P[same[k]] - p
                d = d / np.hypot(*d)
                if d @ hd < 0:
                    d = -d
        inward = np.array([d[1], -d[0]]) if left else np.array([-d[1], d[0]])
        out.append(p + half_width * inward)
    return np.array(out).reshape(-1, 2)


def _local_path(tmap: TrackMap, pose, horizon: float, previous, half_width: float = 2.0):
    """Short open centre line ahead of the vehicle built from the cones mapped so far.

    Pair midpoints are preferred; single-boundary guesses fill the gaps so the
    path reaches as far as the detections do.
    """
    x, y, yaw = pose
    P = tmap.positions()
    if len(P) < 1:
        return previous
    c, s = math.cos(yaw), math.sin(yaw)
    fwd = (P[:, 0] - x) * c + (P[:, 1] - y) * s
    lat = -(P[:, 0] - x) * s + (P[:, 1] - y) * c
    keep = np.flatnonzero((fwd > -6.0) & (np.hypot(fwd, lat) < horizon))
    if len(keep) == 0:
        return previous
    local = TrackMap([tmap.cones[i] for i in keep])
    try:
        mids = extract_midline(local).points.reshape(-1, 2)
    except InsufficientDataError:
        mids = np.zeros((0, 2))
    guides = _boundary_guides(P[keep], [tmap.cones[i].color for i in keep], pose, half_width)
    if len(mids):
        # a cone already bracketed by a pair needs no single-sided guess
        near = np.hypot(*(P[keep][:, None, :] - mids[None, :, :]).transpose(2, 0, 1)).min(axis=1)
        guides = guides[near > half_width + 1.0]
    guides = guides[np.isfinite(guides[:, 0])]
    pts = mids
    for g in guides:
        if not len(pts) or np.hypot(pts[:, 0] - g[0], pts[:, 1] - g[1]).min() >= 2.0:
            pts = np.vstack([pts, g])
    if len(pts) == 0:
        return previous
    # chain forward from the point nearest the car, never turning back on the current direction
    d = np.array([c, s])
    cur = np.array([x, y])
    chain = []
    left = list(range(len(pts)))
    while left:
        rel = pts[left] - cur
        dist = np.hypot(rel[:, 0], rel[:, 1])
        ahead = (rel @ d > -3.0 if not chain else rel @ d > 0.0) & (dist < 9.0)
        if not ahead.any():
            break
        k = int(np.flatnonzero(ahead)[np.argmin(dist[ahead])])
        j = left.pop(k)
        if chain:
            d = (pts[j] - cur) / max(dist[k], 1e-9)
        chain.append(pts[j])
        cur = pts[j]
    if not chain:
        return previous
    thin = [chain[0]]
    for p in chain[1:]:
        if np.hypot(*(p - thin[-1])) >= 1.5:
            thin.append(p)
    pts = np.array(thin)
    if (pts[0, 0] - x) * c + (pts[0, 1] - y) * s > -1.0:
        # extend backwards so the car projects onto the path
        d = pts[1] - pts[0] if len(pts) > 1 else np.array([c, s])
        d = d / max(np.hypot(*d), 1e-9)
        pts = np.vstack([pts[0] - 4.0 * d, pts])
    if len(pts) < 4:
        # the spline wants four points; resample the polyline evenly
        s_cum = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(pts, axis=0).T))])
        u = np.linspace(0.0, s_cum[-1], 4)
        pts = np.column_stack([np.interp(u, s_cum, pts[:, 0]), np.interp(u, s_cum, pts[:, 1])])
    try:
        return plan_path(pts, closed=False, spacing=0.5)
    except (InvalidInputError, InsufficientDataError, DegenerateError):
        return previous


# -- mission ---------------------------------------------------------------------------------


def build_world(cfg: RunConfig) -> WorldGroundTruth:
    return generate_track(rio.read_track(cfg.track_file) if cfg.track_file else cfg.track)


def _make_controller(cfg: RunConfig):
    if cfg.controller == "mpc":
        return MpcController(dataclasses.replace(cfg.mpc, dt=cfg.dt), cfg.vehicle)
    return PurePursuitController(dataclasses.replace(cfg.pure_pursuit, dt=cfg.dt), cfg.vehicle)


def run_two_lap_mission(cfg: RunConfig) -> MissionReport:
    """Drive two laps with no prior track knowledge: map in lap 1, track the stored midline in lap 2."""
    cfg.validate()
    world = build_world(cfg)
    params = cfg.vehicle
    ctrl = _make_controller(cfg)
    sm = StateMachine()
    h = cfg.sensors.lidar.mount_height
    world_half_width = cfg.track.width / 2.0

    sm.handle(MissionEvent.ASMS_ON, 0.0)
    model = train_cone_classifier(cfg.seed, cfg.svm_samples, cfg.sensors.camera.patch_noise,
                                  cfg.sensors.camera.patch_size)
    if model.train_accuracy < 0.9:
        sm.handle(MissionEvent.SUBSYSTEM_FAILURE, 0.0)
    else:
        sm.handle(MissionEvent.SYSTEM_CHECKS_PASSED, 0.0)
        sm.handle(MissionEvent.GO_SIGNAL, 0.0)

    sx, sy, syaw = world.start
    truth = VehicleState(sx, sy, syaw)
    est = [sx, sy, syaw]
    tmap = TrackMap()
    odo = LidarOdometry(cfg.odometry, pose_from_planar(sx, sy, syaw, h)) if cfg.use_lidar_odometry else None
    gps_lap2 = cfg.sensors.gps
    if cfg.lap2_gps_dropout is not None:
        gps_lap2 = dataclasses.replace(gps_lap2, dropout=cfg.lap2_gps_dropout)

    path = None
    global_path = None
    trail = [(sx, sy)]
    steps, loop_trace, closures = [], [], []
    lap = 1
    lap_start = 0.0
    lap_times = []
    target = cfg.lap1_speed
    stopping = False
    cause = ""
    violations = 0
    hint = None
    blind_scans = 0
    degraded = False
    n_steps = int(round(cfg.max_time / cfg.dt))

    for k in range(n_steps):
        t = k * cfg.dt
        if sm.state is not AsState.DRIVING:
            break
        if cfg.estop_time is not None and t >= cfg.estop_time:
            sm.handle(MissionEvent.ESTOP, t)
            cause = "emergency stop"
            break
        true_pose = (truth.x, truth.y, truth.psi)

        if k % cfg.lidar_every == 0:
            scan_id = k // cfg.lidar_every
            scan = simulate_lidar(true_pose, world, cfg.sensors, cfg.seed, scan_id, t)
            dets = _perceive(scan, true_pose, world, model, cfg, scan_id, tmap, tuple(est))
            prior = pose_from_planar(est[0], est[1], est[2], h)
            if lap == 1:
                lidar = odo.update(scan, prior) if odo is not None else OdometryEstimate(prior, 0.0)
                gps = simulate_gps_ins(truth, cfg.sensors, cfg.seed, k, h)
                try:
                    fused = fuse_pose(lidar, gps, cfg.gps_alpha_lap1)
                    est = list(planar_from_pose(fused.pose))
                    blind_scans = 0
                except LocalizationLostError:
                    # degenerate scan and no fix: carry on dead reckoning
                    blind_scans += 1
                if odo is not None:
                    odo.reset_pose(pose_from_planar(est[0], est[1], est[2], h))
            else:
                gps = simulate_gps_ins(truth, dataclasses.replace(cfg.sensors, gps=gps_lap2), cfg.seed, k, h)
                if gps is not None:
                    fused = fuse_pose(OdometryEstimate(prior, 0.0), gps, cfg.gps_alpha_lap2)
                    est = list(planar_from_pose(fused.pose))
                    blind_scans = 0
                else:
                    ref = refine_with_map(tmap, np.array([d[2] for d in dets]).reshape(-1, 2), tuple(est))
                    if ref is not None:
                        est = [ref[0], ref[1], ref[2]]
                        blind_scans = 0
                    else:
                        blind_scans += 1
            if blind_scans * cfg.lidar_every * cfg.dt > cfg.blind_limit:
                if not degraded:
                    sm.handle(MissionEvent.LOCALIZATION_LOST, t)
                degraded = True
            elif blind_scans == 0:
                degraded = False

            pose_now = tuple(est)
            near = [sensor_to_map(np.array([[f, 0.0, l]]), *pose_now)[0] for (_, _, (f, l)) in dets]
            near = np.array(near).reshape(-1, 2)
            if tmap.start_pose is not None and len(tmap.cones):
                sp = planar_from_pose(tmap.start_pose)
                C = loop_closure_coefficient(tmap, near, pose_now[2], sp[2], pose_now[:2], sp[:2], cfg.loop)
                loop_trace.append((t, lap, pose_now[0], pose_now[1], C, tmap.distance_since_closure))
            fired = detect_loop(tmap, near, pose_now, cfg.loop)
            if mode_is_mapping(sm) and dets:
                insert_observations(tmap, [(d[0], d[1]) for d in dets], pose_now)
            if fired:
                sm.handle(MissionEvent.LAP_LOOP_DETECTED, t)
                closures.append({"t": t, "lap": lap, "x": truth.x, "y": truth.y,
                                 "offset_from_start": float(math.hypot(truth.x - sx, truth.y - sy))})
                lap_times.append(t - lap_start)
                lap_start = t
                if lap == 1:
                    try:
                        mids = extract_midline(tmap, path=np.array(trail))
                        global_path = plan_path(mids.points, closed=True, spacing=0.5)
                    except (InsufficientDataError, InvalidInputError, DegenerateError) as exc:
                        sm.handle(MissionEvent.SUBSYSTEM_FAILURE, t)
                        cause = f"midline extraction failed: {exc}"
                        break
                    path = global_path
                    hint = None
                    target = cfg.lap2_speed
                    lap = 2
                else:
                    stopping = True
                    target = 0.0
                    lap = 3
            elif lap == 1 or degraded:
                # mapping drive, or the fallback when lap-2 localization is lost
                local = _local_path(tmap, pose_now, cfg.local_horizon, None if lap > 1 and path is global_path
                                    else path, world_half_width)
                path = local if local is not None else path
                hint = None
            elif path is not global_path and global_path is not None:
                path = global_path
                hint = None

        if stopping and truth.U < 0.05:
            sm.handle(MissionEvent.MISSION_COMPLETE, t)
            break
        if path is None:
            # nothing mapped yet: creep straight ahead
            path = WaypointPath.from_arrays(
                est[0] + np.cos(est[2]) * np.arange(-2.0, 20.0, 0.5),
                est[1] + np.sin(est[2]) * np.arange(-2.0, 20.0, 0.5),
            )

        s_proj, e_y, seg, frac = path.project(est[0], est[1], hint)
        hint = seg
        e_psi = wrap_angle(est[2] - path.heading_at(seg, frac))
        ctrl_state = VehicleState(est[0], est[1], est[2], truth.U, truth.V, truth.r, truth.delta_f, truth.a_x,
                                  e_y, e_psi)
        u, info = ctrl.step(ctrl_state, path, target, s_proj if cfg.controller == "mpc" else seg)
        if stopping:
            u = ControlInput(u.zeta_f, u.J_x)
        deriv = vehicle_derivative(truth.as_array(), u.as_array(), 0.0, params)
        a_y = float(deriv[4] + truth.U * truth.r)
        true_offset = world.lateral_offset(truth.x, truth.y)
        steps.append({
            "t": t, "x": truth.x, "y": truth.y, "psi": truth.psi, "U": truth.U, "V": truth.V, "r": truth.r,
            "delta": truth.delta_f, "a_x": truth.a_x, "a_y": a_y, "e_y": e_y, "e_psi": e_psi,
            "zeta": u.zeta_f, "jerk": u.J_x, "cost": float(info.get("cost", 0.0)),
            "iterations": int(info.get("iterations", 0)), "mode": sm.mode.name, "lap": min(lap, 3),
            "true_offset": true_offset,
        })
        if abs(true_offset) > world.width / 2.0:
            violations += 1
            sm.handle(MissionEvent.SUBSYSTEM_FAILURE, t)
            cause = "boundary violation"
            break

        prev = truth
        truth = step_plant(truth, u, cfg.dt, params, cfg.seed, cfg.friction_limit)
        # dead reckoning of the estimate from wheel speed and yaw rate
        U_m, V_m, r_m = 0.5 * (prev.U + truth.U), 0.5 * (prev.V + truth.V), 0.5 * (prev.r + truth.r)
        psi_mid = est[2] + 0.5 * r_m * cfg.dt
        est = [est[0] + (U_m * math.cos(psi_mid) - V_m * math.sin(psi_mid)) * cfg.dt,
               est[1] + (U_m * math.sin(psi_mid) + V_m * math.cos(psi_mid)) * cfg.dt,
               wrap_angle(est[2] + r_m * cfg.dt)]
        if lap == 1:
            trail.append((est[0], est[1]))
    else:
        cause = "time limit reached"

    complete = sm.state is AsState.FINISHED
    if not complete and not cause:
        cause = f"mission ended in state {sm.state.value}"
    lap2_rows = [r for r in steps if r["lap"] == 2]
    lap1_rows = [r for r in steps if r["lap"] == 1]
    m2 = compute_metrics(lap2_rows, world.centerline) if len(lap2_rows) > 1 else None
    m1 = compute_metrics(lap1_rows, world.centerline) if len(lap1_rows) > 1 else None
    report = MissionReport(
        controller=cfg.controller, seed=int(cfg.seed), complete=complete, cause=cause if not complete else "",
        lap_times=lap_times, lap_count=tmap.lap_count, boundary_violations=violations, metrics=m2,
        metrics_lap1=m1, final_state=sm.state.value, loop_closures=closures, steps=steps,
        loop_trace=loop_trace, state_log=sm.log_lines(), lap2_path=global_path, track_map=tmap,
    )
    if cfg.output_dir:
        write_mission_outputs(report, cfg.output_dir)
    return report


def mode_is_mapping(sm: StateMachine) -> bool:
    return sm.mode is MissionMode.DETECTION_DRIVE


def write_mission_outputs(report: MissionReport, out_dir) -> Path:
    """Step log, loop-closure trace, state log, lap-1 map, lap-2 waypoints and the JSON report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rio.write_step_log(out / "steps.csv", report.steps)
    report.step_log_path = "steps.csv"
    rio.write_state_log(out / "states.log", report.state_log)
    with open(out / "loop_trace.csv", "w") as f:
        f.write(rio.header("looptrace") + "\n")
        f.write("t,lap,x,y,coefficient,distance_since_closure\n")
        for row in report.loop_trace:
            f.write(",".join(rio._fmt(v) for v in row) + "\n")
    if report.track_map is not None:
        rio.write_trackmap(out / "trackmap.txt", report.track_map)
    if report.lap2_path is not None:
        rio.write_waypoints(out / "lap2_waypoints.csv", report.lap2_path.to_waypoints(), True)
    rio.write_report(out / "report.json", report.as_dict())
    return out / "report.json"


# -- controller comparison -----------------------------------------------------------------------


def compare_controllers(cfg: RunConfig) -> dict:
    """Run the identical mission with MPC and with pure pursuit; return both reports side by side.

    The plot data covers the path overlay, lateral error, sideslip and lateral
    acceleration of the second lap for both controllers.
    """
    reports = {}
    for name in CONTROLLERS:
        sub = dataclasses.replace(cfg, controller=name,
                                  output_dir=str(Path(cfg.output_dir) / name) if cfg.output_dir else None)
        reports[name] = run_two_lap_mission(sub)
    mpc, pp = reports["mpc"], reports["pure_pursuit"]
    partial = not (mpc.complete and pp.complete)
    checks = {}
    if mpc.metrics and pp.metrics:
        checks = {
            "lateral_error_ratio": mpc.metrics.lateral_error / max(pp.metrics.lateral_error, 1e-12),
            "mpc_speed_not_lower": mpc.metrics.avg_speed >= pp.metrics.avg_speed,
            "mpc_lat_acc_std_not_higher": mpc.metrics.lat_acc_std <= pp.metrics.lat_acc_std,
        }
    result = {
        "partial": partial,
        "mpc": mpc.as_dict(),
        "pure_pursuit": pp.as_dict(),
        "checks": checks,
        "plot_data": {name: plot_series(r) for name, r in reports.items()},
    }
    if cfg.output_dir:
        write_comparison(result, reports, build_world(cfg), cfg.output_dir)
    return result


def plot_series(report: MissionReport) -> dict:
    rows = [r for r in report.steps if r["lap"] == 2]
    return {
        "t": [r["t"] for r in rows],
        "x": [r["x"] for r in rows],
        "y": [r["y"] for r in rows],
        "lateral_error": [r["true_offset"] for r in rows],
        "sideslip": [math.atan2(r["V"], r["U"]) if r["U"] > 0 else 0.0 for r in rows],
        "lateral_acceleration": [r["a_y"] for r in rows],
    }


def write_comparison(result: dict, reports: dict, world: WorldGroundTruth, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    body = {k: v for k, v in result.items() if k != "plot_data"}
    rio.write_report(out / "comparison.json", body)
    series = result["plot_data"]
    for quantity in ("lateral_error", "sideslip", "lateral_acceleration"):
        with open(out / f"{quantity}.csv", "w") as f:
            f.write(rio.header("plotdata") + "\n")
            f.write("controller,t,value\n")
            for name in CONTROLLERS:
                for t, v in zip(series[name]["t"], series[name][quantity]):
                    f.write(f"{name},{rio._fmt(t)},{rio._fmt(v)}\n")
    with open(out / "path_overlay.csv", "w") as f:
        f.write(rio.header("plotdata") + "\n")
        f.write("source,x,y\n")
        for x, y in zip(world.centerline.x, world.centerline.y):
            f.write(f"truth,{rio._fmt(x)},{rio._fmt(y)}\n")
        for name in CONTROLLERS:
            for x, y in zip(series[name]["x"], series[name]["y"]):
                f.write(f"{name},{rio._fmt(x)},{rio._fmt(y)}\n")
    render_plots(series, world, out)


def render_plots(series: dict, world: WorldGroundTruth, out: Path) -> None:
    """Vector renderings of the four comparison plots."""
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "racestack"
    import matplotlib.pyplot as plt

    styles = {"mpc": "tab:blue", "pure_pursuit": "tab:orange"}
    fig, ax = plt.subplots(figsize=(6, 5))
    ax.plot(world.centerline.x, world.centerline.y, "k--", lw=0.8, label="midline")
    ax.scatter(world.cones[:, 0], world.cones[:, 1], s=4, c=[c.name.lower() for c in world.colors])
    for name in CONTROLLERS:
        ax.plot(series[name]["x"], series[name]["y"], color=styles[name], lw=1.0, label=name)
    ax.set_aspect("equal")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.legend(loc="best", fontsize=8)
    fig.savefig(out / "path_overlay.svg", metadata={"Date": None})
    plt.close(fig)
    labels = {"lateral_error": "lateral error (m)", "sideslip": "sideslip (rad)",
              "lateral_acceleration": "lateral acceleration (m/s^2)"}
    for quantity, label in labels.items():
        fig, ax = plt.subplots(figsize=(6, 3))
        for name in CONTROLLERS:
            ax.plot(series[name]["t"], series[name][quantity], color=styles[name], lw=0.8, label=name)
        ax.set_xlabel("t (s)")
        ax.set_ylabel(label)
        ax.legend(loc="best", fontsize=8)
        fig.tight_layout()
        fig.savefig(out / f"{quantity}.svg", metadata={"Date": None})
        plt.close(fig)
