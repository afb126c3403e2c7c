"""Compiled versus pure-Python kernels on inputs recorded from a real workload.

Run with ``python3 benchmarks/bench_kernels.py [--repeat N]``.  The recorded
calls come from two LIDAR scans on the reference track pushed through ground
segmentation, cone detection and one odometry update.
"""
from __future__ import annotations

import argparse
import math
import time

import numpy as np

from racestack import _kernels
from racestack.detection import DetectionConfig, detect_cones
from racestack.ground import GroundConfig, segment
from racestack.odometry import LidarOdometry, OdometryConfig
from racestack.sim import SensorConfig, TrackSpec, generate_track, simulate_lidar

KERNELS = ("ransac_hypotheses", "raycast", "grid_cluster", "layer_smoothness", "plane_patches")


def record_calls() -> dict:
    """Run a small pipeline with every kernel wrapped so its arguments are kept."""
    calls = {k: [] for k in KERNELS}
    originals = {k: getattr(_kernels, k) for k in KERNELS}

    def wrap(name):
        def inner(*args):
            calls[name].append(tuple(a.copy() if isinstance(a, np.ndarray) else a for a in args))
            return originals[name](*args)
        return inner

    for k in KERNELS:
        setattr(_kernels, k, wrap(k))
    try:
        world = generate_track(TrackSpec.reference())
        sx, sy, syaw = world.start
        sensors = SensorConfig()
        odo = LidarOdometry(OdometryConfig())
        for i in range(2):
            pose = (sx + 0.3 * i * math.cos(syaw), sy + 0.3 * i * math.sin(syaw), syaw)
            scan = simulate_lidar(pose, world, sensors, 0, i)
            pts = scan.points()
            seg = segment(pts, GroundConfig(), seed=i)
            detect_cones(pts[seg.obstacle_indices], DetectionConfig(), seg.model)
            odo.update(scan)
    finally:
        for k, f in originals.items():
            setattr(_kernels, k, f)
    return calls


def time_backend(module, name, calls, repeat: int) -> float:
    fn = getattr(module, name)
    best = math.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        for args in calls:
            fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best / max(len(calls), 1)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if _kernels.cython is None:
        raise SystemExit("compiled kernels are not built; run `python3 setup.py build_ext --inplace` first")
    calls = record_calls()
    print(f"{'kernel':<20}{'calls':>6}{'cython ms':>12}{'python ms':>12}{'speed-up':>10}")
    for name in KERNELS:
        c = time_backend(_kernels.cython, name, calls[name], args.repeat)
        p = time_backend(_kernels.python, name, calls[name], args.repeat)
        print(f"{name:<20}{len(calls[name]):>6}{c * 1e3:>12.3f}{p * 1e3:>12.3f}{p / c:>9.1f}x")


if __name__ == "__main__":
    main()
