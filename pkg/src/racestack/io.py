"""Versioned file formats.

Every file begins with a header line ``# racestack-<kind> v<N>``.  Text formats
store floats with ``repr`` so a write/read round trip is lossless.
"""
from __future__ import annotations

import csv
import json
import math
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .geometry import planar_from_pose, pose_from_planar
from .odometry import LaserScan
from .planning import Waypoint, WaypointPath
from .trackmap import MappedCone, TrackMap
from .vision import ConeColor, HogGeometry, ImagePatch, LinearSvmModel

VERSION = 1
BINARY_SCAN_MAGIC = b"RSSCAN\x00\x01"


def header(kind: str) -> str:
    return f"# racestack-{kind} v{VERSION}"


def _check_header(line: str, kind: str) -> None:
    want = f"# racestack-{kind} v"
    if not line.startswith(want):
        raise FormatError(f"expected a {kind} file, header was {line.strip()!r}")
    try:
        v = int(line.strip()[len(want):])
    except ValueError as exc:
        raise FormatError(f"malformed version in {line.strip()!r}") from exc
    if v != VERSION:
        raise FormatError(f"unsupported {kind} format version {v}")


def _lines(path) -> list[str]:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines:
        raise FormatError(f"{path} is empty")
    return lines


# -- scans ------------------------------------------------------------------------------


def write_scan(path, scan: LaserScan, binary: bool = False) -> None:
    if binary:
        with open(path, "wb") as f:
            f.write(BINARY_SCAN_MAGIC)
            f.write(struct.pack("<Id", scan.n_layers, float(scan.timestamp)))
            for pts, az in zip(scan.layers, scan.azimuth_index):
                f.write(struct.pack("<I", pts.shape[0]))
                rec = np.zeros(pts.shape[0], dtype=[("az", "<i4"), ("p", "<f8", 3)])
                rec["az"] = az
                rec["p"] = pts
                f.write(rec.tobytes())
        return
    out = [header("scan"), f"layers {scan.n_layers}", f"timestamp {float(scan.timestamp)!r}"]
    for l, (pts, az) in enumerate(zip(scan.layers, scan.azimuth_index)):
        out.append(f"layer {l} {pts.shape[0]}")
        out.extend(f"{int(a)} {p[0]!r} {p[1]!r} {p[2]!r}" for a, p in zip(az, pts.tolist()))
    Path(path).write_text("\n".join(out) + "\n")


def read_scan(path) -> LaserScan:
    raw = Path(path).read_bytes()
    if raw.startswith(BINARY_SCAN_MAGIC):
        off = len(BINARY_SCAN_MAGIC)
        n_layers, ts = struct.unpack_from("<Id", raw, off)
        off += struct.calcsize("<Id")
        layers, azs = [], []
        dt = np.dtype([("az", "<i4"), ("p", "<f8", 3)])
        for _ in range(n_layers):
            (n,) = struct.unpack_from("<I", raw, off)
            off += 4
            rec = np.frombuffer(raw, dtype=dt, count=n, offset=off)
            off += n * dt.itemsize
            layers.append(rec["p"].copy())
            azs.append(rec["az"].astype(np.int64))
        if off != len(raw):
            raise FormatError("trailing bytes in binary scan")
        return LaserScan(layers, ts, azs)
    lines = raw.decode().splitlines()
    _check_header(lines[0], "scan")
    try:
        n_layers = int(lines[1].split()[1])
        ts = float(lines[2].split()[1])
        i = 3
        layers, azs = [], []
        for _ in range(n_layers):
            tok = lines[i].split()
            n = int(tok[2])
            rows = [ln.split() for ln in lines[i + 1:i + 1 + n]]
            azs.append(np.array([int(r[0]) for r in rows], dtype=np.int64))
            layers.append(np.array([[float(v) for v in r[1:4]] for r in rows]).reshape(-1, 3))
            i += 1 + n
    except (IndexError, ValueError) as exc:
        raise FormatError(f"malformed scan file {path}") from exc
    return LaserScan(layers, ts, azs)


# -- track map -----------------------------------------------------------------------------


def write_trackmap(path, tmap: TrackMap) -> None:
    out = [header("trackmap"), f"closed {int(tmap.closed)}", f"lap_count {tmap.lap_count}"]
    if tmap.start_pose is not None:
        x, y, yaw = planar_from_pose(tmap.start_pose)
        out.append(f"start {x!r} {y!r} {yaw!r}")
    out.append(f"cones {len(tmap.cones)}")
    for c in tmap.cones:
        out.append(f"{float(c.position[0])!r} {float(c.position[1])!r} {c.color.value} {c.observation_count}")
    Path(path).write_text("\n".join(out) + "\n")


def read_trackmap(path) -> TrackMap:
    lines = _lines(path)
    _check_header(lines[0], "trackmap")
    tmap = TrackMap()
    try:
        i = 1
        while i < len(lines):
            tok = lines[i].split()
            i += 1
            if not tok:
                continue
            if tok[0] == "closed":
                tmap.closed = bool(int(tok[1]))
            elif tok[0] == "lap_count":
                tmap.lap_count = int(tok[1])
            elif tok[0] == "start":
                tmap.start_pose = pose_from_planar(float(tok[1]), float(tok[2]), float(tok[3]))
            elif tok[0] == "cones":
                for ln in lines[i:i + int(tok[1])]:
                    x, y, col, n = ln.split()
                    tmap.cones.append(MappedCone(np.array([float(x), float(y)]), ConeColor(col), int(n)))
                i += int(tok[1])
            else:
                raise FormatError(f"unknown record {tok[0]!r}")
    except (IndexError, ValueError) as exc:
        raise FormatError(f"malformed track map {path}") from exc
    return tmap


def world_to_trackmap(world) -> TrackMap:
    """Ground-truth map of a simulated world (closed, one observation per cone)."""
    x, y, yaw = world.start
    tm = TrackMap(start_pose=pose_from_planar(x, y, yaw), closed=True)
    tm.cones = [MappedCone(p.copy(), c, 1) for p, c in zip(world.cones, world.colors)]
    return tm


# -- track specs -----------------------------------------------------------------------------


def write_track(path, spec) -> None:
    """Centreline control points plus width, cone spacing and seed of a track spec."""
    out = [header("track"), f"width {float(spec.width)!r}", f"cone_spacing {float(spec.cone_spacing)!r}",
           f"seed {int(spec.seed)}", f"cone_jitter {float(spec.cone_jitter)!r}", f"scenery {int(spec.scenery)}", "x,y"]
    out += [f"{float(x)!r},{float(y)!r}" for x, y in np.asarray(spec.control_points, dtype=float)]
    Path(path).write_text("\n".join(out) + "\n")


def read_track(path):
    """Inverse of :func:`write_track`; returns a ``TrackSpec``."""
    from .sim import TrackSpec

    lines = _lines(path)
    _check_header(lines[0], "track")
    try:
        k = [ln.strip() for ln in lines].index("x,y")
        meta = dict(ln.split(None, 1) for ln in lines[1:k])
        pts = np.array([[float(v) for v in ln.split(",")] for ln in lines[k + 1:] if ln.strip()])
        return TrackSpec(pts.reshape(-1, 2), width=float(meta["width"]), cone_spacing=float(meta["cone_spacing"]),
                         seed=int(meta["seed"]), cone_jitter=float(meta.get("cone_jitter", 0.0)),
                         scenery=bool(int(meta.get("scenery", 1))))
    except (KeyError, ValueError, IndexError) as exc:
        raise FormatError(f"malformed track file {path}: {exc}") from exc


# -- waypoints -----------------------------------------------------------------------------


def write_waypoints(path, waypoints, closed: bool) -> None:
    if isinstance(waypoints, WaypointPath):
        waypoints = waypoints.to_waypoints()
    with open(path, "w", newline="") as f:
        f.write(header("waypoints") + "\n")
        f.write(f"# closed={int(closed)}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["s", "x", "y", "heading", "curvature"])
        for p in waypoints:
            w.writerow([repr(float(p.s)), repr(float(p.x)), repr(float(p.y)), repr(float(p.heading)),
                        repr(float(p.curvature))])


def read_waypoints(path) -> WaypointPath:
    lines = _lines(path)
    _check_header(lines[0], "waypoints")
    if not lines[1].startswith("# closed="):
        raise FormatError("missing closed flag")
    closed = bool(int(lines[1].split("=")[1]))
    rows = list(csv.DictReader(lines[2:]))
    try:
        wps = [Waypoint(float(r["x"]), float(r["y"]), float(r["heading"]), float(r["curvature"]), float(r["s"]))
               for r in rows]
    except (KeyError, ValueError) as exc:
        raise FormatError(f"malformed waypoint file {path}") from exc
    return WaypointPath(wps, closed)


# -- SVM model and patches ---------------------------------------------------------------


def write_svm(path, model: LinearSvmModel) -> None:
    g = model.geometry
    out = [header("svm"), f"hog {g.cell} {g.bins} {g.block} {g.patch}", f"length {model.w.size}",
           f"bias {float(model.b)!r}", "weights"]
    out.extend(repr(float(v)) for v in model.w)
    Path(path).write_text("\n".join(out) + "\n")


def read_svm(path) -> LinearSvmModel:
    lines = _lines(path)
    _check_header(lines[0], "svm")
    try:
        cell, bins, block, patch = (int(v) for v in lines[1].split()[1:5])
        n = int(lines[2].split()[1])
        b = float(lines[3].split()[1])
        if lines[4].strip() != "weights":
            raise FormatError("weights block missing")
        w = np.array([float(v) for v in lines[5:5 + n]])
    except (IndexError, ValueError) as exc:
        raise FormatError(f"malformed SVM model {path}") from exc
    if w.size != n:
        raise FormatError("weight count does not match declared length")
    return LinearSvmModel(w, b, geometry=HogGeometry(cell, bins, block, patch))


def write_patch(path, patch: ImagePatch) -> None:
    h, w = patch.shape
    d = patch.data.reshape(h, w, -1)
    out = [header("patch"), f"mode {patch.mode}", f"size {h} {w}"]
    for row in d:
        out.append(" ".join(repr(float(v)) for v in row.ravel()))
    Path(path).write_text("\n".join(out) + "\n")


def read_patch(path) -> ImagePatch:
    lines = _lines(path)
    _check_header(lines[0], "patch")
    try:
        mode = lines[1].split()[1]
        h, w = (int(v) for v in lines[2].split()[1:3])
        rows = [[float(v) for v in ln.split()] for ln in lines[3:3 + h]]
    except (IndexError, ValueError) as exc:
        raise FormatError(f"malformed patch {path}") from exc
    arr = np.array(rows)
    arr = arr.reshape(h, w) if mode == "gray" else arr.reshape(h, w, 3)
    return ImagePatch(arr, mode)


# -- step logs ------------------------------------------------------------------------------

STEP_FIELDS = ["t", "x", "y", "psi", "U", "V", "r", "delta", "a_x", "a_y", "e_y", "e_psi", "zeta", "jerk",
               "cost", "iterations", "mode", "lap", "true_offset"]


def write_step_log(path, rows) -> None:
    with open(path, "w", newline="") as f:
        f.write(header("steplog") + "\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(STEP_FIELDS)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in STEP_FIELDS])


def _fmt(v):
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    if isinstance(v, str):
        return v
    return repr(float(v))


def read_step_log(path) -> list[dict]:
    lines = _lines(path)
    _check_header(lines[0], "steplog")
    rows = []
    for r in csv.DictReader(lines[1:]):
        try:
            rows.append({k: (r[k] if k == "mode" else float(r[k])) for k in STEP_FIELDS})
        except (KeyError, ValueError) as exc:
            raise FormatError(f"malformed step log {path}") from exc
    return rows


def write_state_log(path, lines: list[str]) -> None:
    Path(path).write_text("\n".join([header("statelog")] + list(lines)) + "\n")


# -- report and config --------------------------------------------------------------------------


def write_report(path, report: dict) -> None:
    """Canonical JSON (sorted keys, fixed float repr) so identical runs give identical bytes."""
    doc = {"format": "racestack-report", "format_version": VERSION, **report}
    Path(path).write_text(json.dumps(_clean(doc), sort_keys=True, indent=2) + "\n")


def _clean(v):
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, (np.floating, float)):
        f = float(v)
        return f if math.isfinite(f) else None
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def read_report(path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "racestack-report" or doc.get("format_version") != VERSION:
        raise FormatError("not a racestack mission report of a supported version")
    return doc


def read_config(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment.  A version header is optional for configs."""
    out = {}
    for n, ln in enumerate(Path(path).read_text().splitlines(), 1):
        if n == 1 and ln.startswith("# racestack-config"):
            _check_header(ln, "config")
            continue
        s = ln.split("#", 1)[0].strip()
        if not s:
            continue
        if "=" not in s:
            raise FormatError(f"{path}:{n}: expected key = value")
        k, v = s.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def write_config(path, values: dict) -> None:
    out = [header("config")] + [f"{k} = {v}" for k, v in sorted(values.items())]
    Path(path).write_text("\n".join(out) + "\n")
