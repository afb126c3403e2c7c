import json
import math

import numpy as np
import pytest

from racestack import cli
from racestack import io as rio
from racestack.errors import InvalidInputError, InvalidLogError
from racestack.harness import (
    MetricBlock,
    RunConfig,
    compute_metrics,
    distance_to_polyline,
    run_config_from_mapping,
    run_two_lap_mission,
    write_comparison,
)
from racestack.sim import TrackSpec, generate_track

# ten hand-made rows; the truth line is the x axis from 0 to 20
ROWS = [
    dict(t=0.1 * i, x=0.3 * i, y=y, U=3.0, V=v, a_y=a)
    for i, (y, v, a) in enumerate([
        (0.1, 0.00, 0.2), (-0.2, 0.01, -0.1), (0.0, 0.02, 0.0), (0.3, -0.01, 0.4), (0.1, 0.00, 0.1),
        (-0.1, 0.03, -0.3), (0.2, 0.00, 0.2), (0.0, -0.02, 0.0), (-0.3, 0.01, 0.5), (0.1, 0.00, -0.2),
    ])
]


def _oracle(rows):
    # plain loops over the rows, no numpy
    n = len(rows)
    mean_a = sum(r["a_y"] for r in rows) / n
    std = math.sqrt(sum((r["a_y"] - mean_a) ** 2 for r in rows) / n)
    lat = sum(abs(r["y"]) for r in rows) / n
    dist = sum(math.hypot(b["x"] - a["x"], b["y"] - a["y"]) for a, b in zip(rows, rows[1:]))
    speed = dist / (rows[-1]["t"] - rows[0]["t"])
    beta = sum(math.atan(r["V"] / r["U"]) for r in rows) / n
    return std, lat, speed, beta


def test_metrics_match_hand_oracle():
    m = compute_metrics(ROWS, np.array([[0.0, 0.0], [20.0, 0.0]]))
    for got, want in zip((m.lat_acc_std, m.lateral_error, m.avg_speed, m.sideslip), _oracle(ROWS)):
        assert got == pytest.approx(want, abs=1e-9)


def test_metrics_pure():
    truth = np.array([[0.0, 0.0], [20.0, 0.0]])
    assert compute_metrics(ROWS, truth) == compute_metrics(ROWS, truth)


def test_straight_constant_speed_run():
    rows = [dict(t=0.1 * i, x=0.5 * i, y=0.0, U=5.0, V=0.0, a_y=0.0) for i in range(50)]
    m = compute_metrics(rows, np.array([[-1.0, 0.0], [100.0, 0.0]]))
    assert m.lat_acc_std == 0.0 and m.lateral_error == pytest.approx(0.0, abs=1e-12)
    assert m.sideslip == 0.0 and m.avg_speed == pytest.approx(5.0, rel=1e-12)


def test_metric_errors():
    with pytest.raises(InvalidLogError):
        compute_metrics([], np.zeros((2, 2)))
    with pytest.raises(InvalidLogError):
        compute_metrics(ROWS[::-1], np.array([[0.0, 0.0], [20.0, 0.0]]))
    with pytest.raises(InvalidLogError):
        compute_metrics([{"t": 0.0, "x": 0.0}], np.zeros((2, 2)))
    with pytest.raises(InvalidLogError):
        MetricBlock(-0.1, 0.0, 1.0, 0.0)
    with pytest.raises(InvalidLogError):
        MetricBlock(0.1, float("nan"), 1.0, 0.0)


def test_distance_to_polyline_closed():
    square = np.array([[0, 0], [2, 0], [2, 2], [0, 2]], float)
    d = distance_to_polyline([[1, 1], [-1, 1], [1, 3]], square, closed=True)
    assert np.allclose(d, [1.0, 1.0, 1.0])
    assert distance_to_polyline([[-1, 1]], square, closed=False)[0] == pytest.approx(math.sqrt(2))


def test_config_mapping_and_sections():
    cfg = run_config_from_mapping({"controller": "pure_pursuit", "seed": "7", "mpc.N": "12",
                                   "gps.dropout": "0.3", "lap2_gps_dropout": "1", "track.width": "5.0"})
    assert cfg.controller == "pure_pursuit" and cfg.seed == 7 and cfg.mpc.N == 12
    assert cfg.sensors.gps.dropout == 0.3 and cfg.lap2_gps_dropout == 1.0 and cfg.track.width == 5.0


@pytest.mark.parametrize("values", [
    {"nonsense": "1"}, {"mpc.nonsense": "1"}, {"radar.range": "3"}, {"seed": "x"}, {"controller": "lqr"},
    {"lap1_speed": "-1"}, {"gps_alpha_lap1": "2"}, {"use_lidar_odometry": "maybe"},
])
def test_config_rejects(values):
    with pytest.raises(InvalidInputError):
        run_config_from_mapping(values)


def test_run_config_defaults():
    cfg = RunConfig()
    assert cfg.lap2_speed == pytest.approx(2.2 * cfg.lap1_speed)
    assert cfg.controller == "mpc" and cfg.seed == 0


def test_estop_gives_incomplete_report(tmp_path):
    rep = run_two_lap_mission(RunConfig(estop_time=2.0, output_dir=str(tmp_path)))
    assert not rep.complete and rep.cause == "emergency stop"
    assert rep.final_state == "emergency"
    doc = rio.read_report(tmp_path / "report.json")
    assert doc["complete"] is False and doc["step_log"] == "steps.csv"
    assert len(rio.read_step_log(tmp_path / "steps.csv")) == rep.as_dict()["steps"]
    assert (tmp_path / "states.log").read_text().splitlines()[-1].endswith("driving estop emergency")


def test_comparison_files_written(tmp_path):
    reps = {name: run_two_lap_mission(RunConfig(controller=name, estop_time=1.0)) for name in ("mpc", "pure_pursuit")}
    series = {name: {"t": [0.0, 0.1], "x": [1.0, 2.0], "y": [0.0, 0.1], "lateral_error": [0.0, 0.1],
                     "sideslip": [0.0, 0.01], "lateral_acceleration": [0.1, 0.2]} for name in reps}
    result = {"partial": True, "mpc": reps["mpc"].as_dict(), "pure_pursuit": reps["pure_pursuit"].as_dict(),
              "checks": {}, "plot_data": series}
    write_comparison(result, reps, generate_track(TrackSpec.reference()), tmp_path)
    for q in ("lateral_error", "sideslip", "lateral_acceleration", "path_overlay"):
        assert (tmp_path / f"{q}.csv").read_text().startswith(rio.header("plotdata"))
        assert (tmp_path / f"{q}.svg").read_text().lstrip().startswith("<?xml")
    assert rio.read_report(tmp_path / "comparison.json")["partial"] is True


@pytest.mark.slow
def test_gps_dropout_lap2_completes():
    rep = run_two_lap_mission(RunConfig(lap2_gps_dropout=1.0))
    assert rep.complete, rep.cause
    assert rep.lap_times[1] < rep.lap_times[0]


# -- command line ------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def generated(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen")
    assert cli.main(["generate-track", "--out", str(out), "--scans", "2"]) == cli.EXIT_OK
    return out


def test_cli_generate_track(generated):
    spec = rio.read_track(generated / "track.txt")
    assert spec.width == 4.0 and spec.cone_spacing == 5.0
    assert len(rio.read_trackmap(generated / "truth_map.txt").cones) == len(generate_track(spec).cones)
    assert rio.read_waypoints(generated / "centerline.csv").closed
    assert rio.read_scan(generated / "scan_001.txt").n_layers == 16


def test_cli_generate_circle(tmp_path):
    assert cli.main(["generate-track", "--out", str(tmp_path), "--circle", "20"]) == cli.EXIT_OK
    tm = rio.read_trackmap(tmp_path / "truth_map.txt")
    r = np.hypot(*np.array([c.position for c in tm.cones]).T)
    assert np.all((np.abs(r - 18) < 1e-6) | (np.abs(r - 22) < 1e-6))


def test_cli_run_perception(generated, tmp_path):
    out = tmp_path / "det.csv"
    scans = [str(generated / "scan_000.txt"), str(generated / "scan_001.txt")]
    assert cli.main(["run-perception", *scans, "--out", str(out)]) == cli.EXIT_OK
    lines = out.read_text().splitlines()
    assert lines[0] == rio.header("detections")
    assert len(lines) > 4


def test_cli_compute_metrics(tmp_path, capsys):
    rows = [dict({k: 0.0 for k in rio.STEP_FIELDS}, **r, mode="TrackingDrive", lap=2) for r in ROWS]
    rio.write_step_log(tmp_path / "s.csv", rows)
    rio.write_waypoints(tmp_path / "truth.csv",
                        [type("W", (), dict(x=x, y=0.0, heading=0.0, curvature=0.0, s=x))() for x in (0.0, 20.0)],
                        False)
    assert cli.main(["compute-metrics", "--steps", str(tmp_path / "s.csv"),
                     "--truth", str(tmp_path / "truth.csv")]) == cli.EXIT_OK
    got = json.loads(capsys.readouterr().out)
    assert got["lateral_error"] == pytest.approx(_oracle(ROWS)[1], abs=1e-9)
    assert cli.main(["compute-metrics", "--steps", str(tmp_path / "s.csv"), "--truth", str(tmp_path / "truth.csv"),
                     "--lap", "1"]) == cli.EXIT_CONFIG


def test_cli_estop_exit_code(capsys):
    assert cli.main(["run-mission", "--estop-time", "1.0"]) == cli.EXIT_INCOMPLETE
    assert json.loads(capsys.readouterr().out)["cause"] == "emergency stop"


def test_cli_config_file_and_override(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    rio.write_config(cfg, {"estop_time": "0.5", "controller": "mpc"})
    code = cli.main(["run-mission", "--config", str(cfg), "--controller", "pure_pursuit"])
    assert code == cli.EXIT_INCOMPLETE
    assert json.loads(capsys.readouterr().out)["controller"] == "pure_pursuit"


@pytest.mark.parametrize("argv", [
    ["run-mission", "--set", "bogus=1"],
    ["run-mission", "--set", "noequals"],
    ["run-mission", "--controller", "lqr"],
    ["run-mission", "--config", "/nonexistent/run.cfg"],
    ["compare-controllers", "--set", "mpc.bogus=2"],
    ["compute-metrics", "--steps", "/nonexistent.csv", "--truth", "/nonexistent.csv"],
])
def test_cli_invalid_config_exit_code(argv):
    assert cli.main(argv) == cli.EXIT_CONFIG


def test_cli_bad_version(tmp_path):
    (tmp_path / "s.txt").write_text("# racestack-scan v99\n")
    assert cli.main(["run-perception", str(tmp_path / "s.txt")]) == cli.EXIT_CONFIG
