"""``racestack`` command line: track generation, missions, offline perception, comparison and metrics.

Exit codes: 0 mission complete (or command succeeded), 2 mission incomplete,
3 invalid configuration or input file.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import io as rio
from .detection import DetectionConfig, detect_cones
from .errors import FormatError, InsufficientDataError, InvalidInputError, InvalidLogError, RaceStackError
from .ground import GroundConfig, segment
from .harness import RunConfig, compare_controllers, compute_metrics, run_config_from_mapping, run_two_lap_mission
from .sim import SensorConfig, TrackSpec, generate_track, simulate_lidar

EXIT_OK, EXIT_INCOMPLETE, EXIT_CONFIG = 0, 2, 3

# flags that map one to one onto RunConfig fields
_RUN_FLAGS = {
    "controller": str, "seed": int, "output_dir": str, "track_file": str, "lap1_speed": float,
    "lap2_ratio": float, "dt": float, "lidar_every": int, "gps_alpha_lap1": float, "gps_alpha_lap2": float,
    "lap2_gps_dropout": float, "estop_time": float, "friction_limit": float, "max_time": float,
}


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file; flags given here override it")
    for name, typ in _RUN_FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="any RunConfig setting, dotted for sections (mpc.N=15, gps.dropout=0.2)")


def _run_config(args) -> RunConfig:
    values = rio.read_config(args.config) if args.config else {}
    for item in args.overrides:
        if "=" not in item:
            raise InvalidInputError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    for name in _RUN_FLAGS:
        v = getattr(args, name)
        if v is not None:
            values[name] = str(v)
    return run_config_from_mapping(values)


def _cmd_generate_track(args) -> int:
    if args.circle is not None:
        spec = TrackSpec.circle(args.circle, width=args.width, cone_spacing=args.spacing, seed=args.seed)
    elif args.control_points:
        spec = TrackSpec(np.loadtxt(args.control_points, delimiter=",", ndmin=2), width=args.width,
                         cone_spacing=args.spacing, seed=args.seed)
    else:
        base = TrackSpec.reference(args.seed)
        spec = TrackSpec(base.control_points, width=args.width, cone_spacing=args.spacing, seed=args.seed)
    world = generate_track(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rio.write_track(out / "track.txt", spec)
    rio.write_trackmap(out / "truth_map.txt", rio.world_to_trackmap(world))
    rio.write_waypoints(out / "centerline.csv", world.centerline, True)
    sensors = SensorConfig()
    for i in range(args.scans):
        x, y = world.centerline.point_at_s(i * args.scan_spacing)
        a = world.centerline.nearest_index(x, y)
        pose = (x, y, float(world.centerline.heading[a]))
        scan = simulate_lidar(pose, world, sensors, args.seed, i, 0.1 * i)
        rio.write_scan(out / f"scan_{i:03d}.txt", scan)
    print(f"{len(world.cones)} cones, centreline {world.centerline.length:.1f} m -> {out}")
    return EXIT_OK


def _cmd_run_mission(args) -> int:
    cfg = _run_config(args)
    report = run_two_lap_mission(cfg)
    print(json.dumps(rio._clean(report.as_dict()), sort_keys=True, indent=2))
    return EXIT_OK if report.complete else EXIT_INCOMPLETE


def _cmd_compare(args) -> int:
    cfg = _run_config(args)
    result = compare_controllers(cfg)
    body = {k: v for k, v in result.items() if k != "plot_data"}
    print(json.dumps(rio._clean(body), sort_keys=True, indent=2))
    return EXIT_INCOMPLETE if result["partial"] else EXIT_OK


def _cmd_run_perception(args) -> int:
    gcfg, dcfg = GroundConfig(), DetectionConfig()
    lines = [rio.header("detections"), "scan,forward,left,height,extent,points"]
    for path in args.scans:
        scan = rio.read_scan(path)
        pts = scan.points()
        try:
            seg = segment(pts, gcfg, seed=args.seed)
        except InsufficientDataError:
            continue
        for c in detect_cones(pts[seg.obstacle_indices], dcfg, seg.model):
            vals = (float(c.position[0]), float(c.position[2]), float(c.height), float(c.extent))
            lines.append(Path(path).name + "," + ",".join(repr(v) for v in vals) + f",{int(c.point_count)}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _load_truth(path):
    first = Path(path).read_text().splitlines()[:1]
    if first and first[0].startswith("# racestack-track"):
        return generate_track(rio.read_track(path)).centerline
    return rio.read_waypoints(path)


def _cmd_compute_metrics(args) -> int:
    rows = rio.read_step_log(args.steps)
    if args.lap is not None:
        rows = [r for r in rows if int(r["lap"]) == args.lap]
    block = compute_metrics(rows, _load_truth(args.truth))
    print(json.dumps(block.as_dict(), sort_keys=True, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="racestack", description=__doc__.splitlines()[0].replace("``", ""))
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-track", help="write a track spec, its ground-truth map and centreline")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--width", type=float, default=4.0)
    g.add_argument("--spacing", type=float, default=5.0)
    g.add_argument("--circle", type=float, default=None, help="radius of a circular track instead of the reference")
    g.add_argument("--control-points", default=None, help="CSV of x,y centreline control points")
    g.add_argument("--scans", type=int, default=0, help="also write this many LIDAR scans along the centreline")
    g.add_argument("--scan-spacing", type=float, default=1.0)
    g.set_defaults(func=_cmd_generate_track)

    m = sub.add_parser("run-mission", help="two-lap autonomous mission")
    _add_run_flags(m)
    m.set_defaults(func=_cmd_run_mission)

    c = sub.add_parser("compare-controllers", help="same mission with MPC and pure pursuit")
    _add_run_flags(c)
    c.set_defaults(func=_cmd_compare)

    p = sub.add_parser("run-perception", help="ground segmentation and cone detection on scan files")
    p.add_argument("scans", nargs="+")
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_run_perception)

    k = sub.add_parser("compute-metrics", help="driving metrics of a step log against a truth centreline")
    k.add_argument("--steps", required=True)
    k.add_argument("--truth", required=True, help="track spec file or waypoint file")
    k.add_argument("--lap", type=int, default=None, help="only rows of this lap")
    k.set_defaults(func=_cmd_compute_metrics)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InvalidInputError, FormatError, InvalidLogError, FileNotFoundError) as exc:
        print(f"racestack: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RaceStackError as exc:
        print(f"racestack: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INCOMPLETE


if __name__ == "__main__":
    sys.exit(main())
