import csv
import json
import math

import numpy as np
import pytest

from orchardnav import mission
from orchardnav.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, apply_overrides, fmt, main, parse_overrides, UsageError
from orchardnav.io import read_frame_csv, read_pgm, read_ppm, write_frame_csv, write_pgm
from orchardnav.rownav import RowDetectParams
from orchardnav.scan import LidarSpec
from orchardnav.sim import PedestrianConfig, RobotState, WorldConfig, build_world, cast_scan


@pytest.fixture
def world_json(tmp_path):
    p = tmp_path / "world.json"
    p.write_text(json.dumps({"row_count": 1, "row_length": 20}))
    return p


@pytest.fixture
def short_path(tmp_path):
    p = tmp_path / "path.json"
    mission.save_path([mission.PathState(1, "IN_ROW", 1.0, mission.STRAIGHT, "FIXED_LENGTH", 2.0)], p)
    return p


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestHelpers:
    def test_fmt(self):
        assert fmt(1 / 3) == "0.333333" and fmt(7) == "7" and fmt(True) == "1"

    def test_overrides(self):
        p = apply_overrides(RowDetectParams, parse_overrides(["angle_bin=2", "aligned_pairs_only=false"]))
        assert p.angle_bin == 2.0 and p.aligned_pairs_only is False

    @pytest.mark.parametrize("items", [["nope=1"], ["angle_bin"], ["angle_bin=x"], ["angle_bin=-1"]])
    def test_bad_overrides(self, items):
        with pytest.raises(UsageError):
            apply_overrides(RowDetectParams, parse_overrides(items))


class TestExitCodes:
    def test_unknown_flag(self, capsys):
        assert main(["evaluate", "--bogus"]) == EXIT_USAGE
        assert "usage" in capsys.readouterr().err

    def test_no_subcommand(self):
        assert main([]) == EXIT_USAGE

    def test_missing_seed(self, world_json, tmp_path):
        assert main(["simulate", "--world", str(world_json), "--out", str(tmp_path / "o")]) == EXIT_USAGE

    def test_missing_file(self, tmp_path):
        assert main(["evaluate", "--pred", str(tmp_path / "a.pgm"), "--truth", str(tmp_path / "b.pgm")]) == EXIT_DATA

    def test_unknown_parameter(self, tmp_path):
        f = tmp_path / "f.csv"
        write_frame_csv(cast_scan(build_world(WorldConfig(row_count=1)), RobotState(5, 2.5, 0))[0], f)
        assert main(["detect-row", "--frame", str(f), "--set", "colour=1"]) == EXIT_USAGE

    def test_bad_world_key(self, tmp_path):
        w = tmp_path / "w.json"
        w.write_text(json.dumps({"rows": 3}))
        assert main(["simulate", "--world", str(w), "--seed", "1", "--out", str(tmp_path / "o")]) == EXIT_DATA

    def test_ik_needs_something(self):
        assert main(["ik"]) == EXIT_USAGE


class TestEvaluate:
    def test_one_row(self, tmp_path, capsys):
        pred = np.zeros((4, 4))
        truth = np.zeros((4, 4))
        pred[0, :2] = 255
        truth[0, 0] = truth[1, 1] = 255
        write_pgm(pred, tmp_path / "p.pgm")
        write_pgm(truth, tmp_path / "t.pgm")
        assert main(["evaluate", "--pred", str(tmp_path / "p.pgm"), "--truth", str(tmp_path / "t.pgm")]) == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        assert lines == ["tp,fp,tn,fn,precision,recall,specificity", "1,1,13,1,0.5,0.5,0.928571"]

    def test_shape_mismatch(self, tmp_path):
        write_pgm(np.zeros((2, 2)), tmp_path / "p.pgm")
        write_pgm(np.zeros((2, 3)), tmp_path / "t.pgm")
        assert main(["evaluate", "--pred", str(tmp_path / "p.pgm"), "--truth", str(tmp_path / "t.pgm")]) == EXIT_DATA


class TestSimulate:
    def test_outputs(self, world_json, short_path, tmp_path):
        out = tmp_path / "run"
        argv = ["simulate", "--world", str(world_json), "--path", str(short_path), "--seed", "7", "--out", str(out),
                "--start", "3,2.5,0", "--frame-every", "5"]
        assert main(argv) == EXIT_OK
        traj = read_csv(out / "trajectory.csv")
        assert traj[0] == ["t", "x", "y", "heading", "state_id", "v", "omega"] and len(traj) - 1 == 20
        frames = sorted((out / "frames").iterdir())
        assert len(frames) == 4
        assert read_frame_csv(frames[0]).valid.any()
        summary = json.loads((out / "summary.json").read_text())
        assert summary["status"] == "completed" and summary["visited"] == [1]

    def test_deterministic(self, world_json, short_path, tmp_path):
        runs = []
        for k in range(2):
            out = tmp_path / f"run{k}"
            main(["simulate", "--world", str(world_json), "--path", str(short_path), "--seed", "3", "--out", str(out),
                  "--start", "3,2.5,0"])
            runs.append([p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()])
        assert runs[0] == runs[1]

    def test_bad_path_file(self, world_json, tmp_path):
        bad = tmp_path / "p.json"
        bad.write_text("[]")
        argv = ["simulate", "--world", str(world_json), "--path", str(bad), "--seed", "1", "--out", str(tmp_path / "o")]
        assert main(argv) == EXIT_DATA


class TestPerception:
    @pytest.fixture
    def frame_csv(self, tmp_path):
        w = build_world(WorldConfig(row_count=2, row_length=30))
        f = tmp_path / "f.csv"
        write_frame_csv(cast_scan(w, RobotState(10, 2.8, 0.05))[0], f)
        return f

    def test_detect_row(self, frame_csv, tmp_path):
        out = tmp_path / "rows.csv"
        assert main(["detect-row", "--frame", str(frame_csv), "--out", str(out)]) == EXIT_OK
        rows = read_csv(out)
        assert rows[0] == ["frame", "status", "o_l_m", "o_a_rad", "n_left", "n_right"]
        assert rows[1][1] == "ok"
        assert float(rows[1][2]) == pytest.approx(-0.3, abs=0.1)

    @pytest.mark.parametrize("method", ["plane", "density", "vertical"])
    def test_extract(self, frame_csv, tmp_path, method):
        out = tmp_path / f"{method}.pgm"
        assert main(["extract-features", "--frame", str(frame_csv), "--method", method, "--out", str(out),
                     "--csv", str(tmp_path / "g.csv")]) == EXIT_OK
        mask = read_pgm(out)
        assert mask.shape == (1000, 1000) and set(np.unique(mask)) <= {0, 255} and mask.max() == 255

    def test_extract_bad_segments(self, frame_csv, tmp_path):
        argv = ["extract-features", "--frame", str(frame_csv), "--method", "plane", "--set", "segments=7",
                "--out", str(tmp_path / "m.pgm")]
        assert main(argv) == EXIT_USAGE

    def test_wrong_azimuth_count(self, frame_csv):
        assert main(["detect-row", "--frame", str(frame_csv), "--azimuths", "10"]) == EXIT_DATA

    def test_navigate(self, world_json, tmp_path):
        out = tmp_path / "nav.csv"
        argv = ["navigate", "--world", str(world_json), "--seed", "1", "--start", "3,2.7,0.05", "--until", "8",
                "--out", str(out)]
        assert main(argv) == EXIT_OK
        rows = read_csv(out)
        assert rows[0] == ["t", "x", "y", "heading", "o_l_true", "o_a_true", "v", "omega"]
        assert abs(float(rows[-1][4])) < abs(float(rows[1][4]))


class TestSafetyCli:
    def test_stop_latched(self, tmp_path):
        ped = PedestrianConfig(12.0, 2.5, facing=math.pi)
        w = build_world(WorldConfig(row_count=1, row_length=22, pedestrians=(ped,)))
        paths = []
        for k, x in enumerate((4.0, 9.775, 4.0)):
            p = tmp_path / f"f{k}.csv"
            write_frame_csv(cast_scan(w, RobotState(x, 2.5, 0.0), seed=k)[0], p)
            paths.append(str(p))
        zones = tmp_path / "z.json"
        zones.write_text(json.dumps({"decel": {"x_min": 0, "x_max": 4, "y_min": -1.5, "y_max": 1.5,
                                               "z_min": -1, "z_max": 2},
                                     "stop": {"x_min": 0, "x_max": 3, "y_min": -1, "y_max": 1,
                                              "z_min": -1, "z_max": 2}}))
        out = tmp_path / "s.jsonl"
        assert main(["safety-monitor", "--frame", *paths, "--zones", str(zones), "--out", str(out)]) == EXIT_OK
        recs = [json.loads(line) for line in out.read_text().splitlines()]
        assert [r["stop"] for r in recs] == [False, True, True]
        assert recs[0]["detections"] == 1 and not recs[0]["decel"]

    def test_bad_zones(self, tmp_path):
        zones = tmp_path / "z.json"
        zones.write_text(json.dumps({"halt": {}}))
        f = tmp_path / "f.csv"
        write_frame_csv(cast_scan(build_world(WorldConfig(row_count=1)), RobotState(5, 2.5, 0))[0], f)
        assert main(["safety-monitor", "--frame", str(f), "--zones", str(zones)]) == EXIT_DATA


class TestBoomCli:
    def test_setpoints(self, tmp_path, capsys):
        (tmp_path / "s.csv").write_text("scan,y,z\n0,0,2.0\n0,0.1,2.2\n1,0,1.8\n2,5,1.0\n")
        (tmp_path / "o.csv").write_text("scan,distance\n0,0\n1,0.5\n2,1.0\n")
        argv = ["boom-nav", "--scans", str(tmp_path / "s.csv"), "--odometry", str(tmp_path / "o.csv"),
                "--boom-distance", "0.8", "--set", "min_height=1.2"]
        assert main(argv) == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        # scan 2 has no canopy in the region, so its target is the minimum height
        assert lines == ["scan,distance_m,setpoint_m", "0,0,2", "1,0.5,1.8", "2,1,1.2"]

    def test_decreasing_odometry(self, tmp_path):
        (tmp_path / "s.csv").write_text("scan,y,z\n")
        (tmp_path / "o.csv").write_text("scan,distance\n0,1\n1,0.5\n")
        argv = ["boom-nav", "--scans", str(tmp_path / "s.csv"), "--odometry", str(tmp_path / "o.csv"),
                "--boom-distance", "0.8"]
        assert main(argv) == EXIT_DATA


class TestIkCli:
    def test_solutions(self, tmp_path, capsys):
        g = tmp_path / "g.json"
        g.write_text(json.dumps({"r1": 1, "r2": 1, "r3": 1, "base": [0, 0]}))
        assert main(["ik", "--target", "1,2", "--beta", str(math.pi / 2), "--geometry", str(g)]) == EXIT_OK
        res = json.loads(capsys.readouterr().out)
        assert len(res["solutions"]) == 2

    def test_workspace_export(self, tmp_path, capsys):
        prefix = tmp_path / "ws"
        assert main(["ik", "--workspace", str(prefix), "--resolution", "0.01"]) == EXIT_OK
        res = json.loads(capsys.readouterr().out)
        img = read_ppm(f"{prefix}.ppm")
        rows = read_csv(f"{prefix}.csv")
        assert img.shape == (36, 36, 3)
        assert len(rows) - 1 == res["workspace_cells"] == int((img.sum(axis=2) > 0).sum())


class TestSweepCli:
    def run(self, tmp_path, name):
        out = tmp_path / name
        argv = ["sweep", "--seed", "4", "--frames", "2", "--azimuths", "450", "--out", str(out)]
        assert main(argv) == EXIT_OK
        return read_csv(out)

    def test_twelve_rows_deterministic(self, tmp_path):
        a, b = self.run(tmp_path, "a.csv"), self.run(tmp_path, "b.csv")
        assert a[0] == ["segments", "metric", "precision", "recall", "runtime_s", "error"]
        assert len(a) - 1 == 12
        assert {(r[0], r[1]) for r in a[1:]} == {(s, m) for s in ("1", "5", "30", "450")
                                                  for m in ("mean", "median", "maximum")}
        strip = lambda rows: [r[:4] + r[5:] for r in rows]  # runtime varies
        assert strip(a) == strip(b)

    def test_single_point_grid(self, tmp_path, capsys):
        argv = ["sweep", "--seed", "1", "--frames", "1", "--segments", "5", "--metrics", "mean"]
        assert main(argv) == EXIT_OK
        assert len(capsys.readouterr().out.splitlines()) == 2

    def test_failing_cell_recorded(self, tmp_path, capsys):
        argv = ["sweep", "--seed", "1", "--frames", "1", "--segments", "7,5", "--metrics", "mean"]
        assert main(argv) == EXIT_OK
        cap = capsys.readouterr()
        rows = list(csv.reader(cap.out.splitlines()))
        assert rows[1][0] == "7" and rows[1][5] and rows[2][5] == ""
        assert "1 of 2 cells failed" in cap.err
