"""Command-line entry point: every pipeline as a subcommand with file-based inputs and outputs.

Exit codes: 0 success, 1 usage error, 2 data error. Diagnostics go to standard error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import math
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import arm, boom, features, mission, rownav, safety, sweep
from .io import ParseError, read_frame_csv, read_pgm, write_frame_csv, write_grid_csv, write_pgm, write_ppm
from .scan import LidarSpec, rasterize
from .sim import RobotState, WorldConfig, build_world, cast_scan, lidar_pose, step_robot
from .volume import VolumeOfInterest

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def fmt(v: Any) -> str:
    """SI values with 6 significant digits; integers and strings verbatim."""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return str(v)


def _round6(obj: Any) -> Any:
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return float(f"{f:.6g}") if math.isfinite(f) else None
    if isinstance(obj, (list, tuple)):
        return [_round6(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _round6(v) for k, v in obj.items()}
    return obj


def _csv_text(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    return buf.getvalue()


# ------------------------------------------------------------------ overrides


def parse_overrides(items: Sequence[str] | None) -> dict[str, str]:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"override {item!r} is not key=value")
        out[key.strip()] = value.strip()
    return out


def _coerce(value: str, default: Any) -> Any:
    if isinstance(default, bool):
        low = value.lower()
        if low not in ("true", "false", "1", "0"):
            raise UsageError(f"expected a boolean, got {value!r}")
        return low in ("true", "1")
    try:
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError:
        raise UsageError(f"bad number {value!r}") from None
    if isinstance(default, str):
        return value
    raise UsageError("only scalar parameters can be overridden")


def apply_overrides(cls, overrides: dict[str, str], **base):
    """Instantiate dataclass ``cls`` with ``base`` values and string overrides; unknown keys are rejected."""
    defaults = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            defaults[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
            defaults[f.name] = f.default_factory()  # type: ignore[misc]
    unknown = set(overrides) - set(defaults)
    if unknown:
        raise UsageError(f"unknown parameter(s) {sorted(unknown)}; known: {sorted(defaults)}")
    kw = dict(base)
    for k, v in overrides.items():
        kw[k] = _coerce(v, base.get(k, defaults[k]))
    try:
        return cls(**kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# -------------------------------------------------------------------- loaders


def _load_json(path: str) -> Any:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None


def _load_world(path: str, seed: int) -> WorldConfig:
    data = _load_json(path)
    if not isinstance(data, dict):
        raise DataError(f"{path}: world config must be a JSON object")
    data = dict(data, seed=seed)
    try:
        return WorldConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from None


def _spec(n_azimuths: int | None) -> LidarSpec:
    return LidarSpec() if n_azimuths is None else LidarSpec(n_azimuths=n_azimuths)


def _load_frame(path: str, spec: LidarSpec):
    try:
        return read_frame_csv(path, spec)
    except FileNotFoundError:
        raise DataError(f"{path}: no such file") from None
    except ParseError as exc:
        raise DataError(f"{path}: {exc}") from None


def _parse_pose(text: str | None, world: WorldConfig) -> RobotState:
    if text is None:
        return RobotState(0.5, 0.5 * world.row_width, 0.0)
    try:
        x, y, h = (float(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"pose {text!r} must be x,y,heading") from None
    return RobotState(x, y, h)


def _out_dir(path: str) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


# ---------------------------------------------------------------- subcommands


def cmd_simulate(a) -> None:
    cfg = _load_world(a.world, a.seed)
    world = build_world(cfg)
    path = list(mission.ROW_TO_ROW_PATH)
    if a.path:
        try:
            path = mission.load_path(a.path)
        except FileNotFoundError:
            raise DataError(f"{a.path}: no such file") from None
    nav = apply_overrides(mission.NavigatorConfig, parse_overrides(a.set))
    out = _out_dir(a.out)
    start = _parse_pose(a.start, cfg)
    try:
        log = mission.run_path(path, world, start, nav, seed=a.seed)
        status, reason = "completed", ""
    except mission.MissionAbort as exc:
        log, status, reason = exc.log, "aborted", str(exc)
    log.write_csv(out / "trajectory.csv")
    frames = out / "frames"
    frames.mkdir(exist_ok=True)
    saved = 0
    for k in range(0, len(log), a.frame_every):
        pose = RobotState(log.x[k], log.y[k], log.heading[k])
        frame, _ = cast_scan(world, pose, _spec(a.azimuths), seed=k)
        write_frame_csv(frame, frames / f"frame_{k:05d}.csv")
        saved += 1
    summary = {"status": status, "reason": reason, "ticks": len(log), "visited": log.visited,
               "min_post_clearance": log.min_clearance(), "frames": saved}
    (out / "summary.json").write_text(json.dumps(_round6(summary), indent=2) + "\n")
    print(f"{status}: {len(log)} ticks, {saved} frames", file=sys.stderr)


def cmd_detect_row(a) -> None:
    params = apply_overrides(rownav.RowDetectParams, parse_overrides(a.set))
    spec = _spec(a.azimuths)
    rows = []
    for path in a.frame:
        est = rownav.detect_row(_load_frame(path, spec), params)
        rows.append([path, est.status, est.o_l, est.o_a, est.n_l, est.n_r])
    _emit(_csv_text(["frame", "status", "o_l_m", "o_a_rad", "n_left", "n_right"], rows), a.out)


@dataclasses.dataclass(frozen=True)
class ExtractParams:
    metric: str = "median"
    segments: int = 1
    threshold: float = 0.0
    angle_threshold: float = 45.0
    height_threshold: float = 0.45


def cmd_extract_features(a) -> None:
    p = apply_overrides(ExtractParams, parse_overrides(a.set))
    frame = _load_frame(a.frame, _spec(a.azimuths))
    try:
        if a.method == "plane":
            sel = features.select_plane_segmented(frame, p.segments, p.metric)
            cells = (rasterize(sel.points).cells > 0).astype(float)
        elif a.method in ("density", "scaled-density"):
            cells = features.scaled_density_extract(frame, threshold=p.threshold).cells
        else:
            _, grid = features.extract_vertical_objects(frame, p.angle_threshold, p.height_threshold)
            cells = (grid.cells > 0).astype(float)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    write_pgm(np.where(cells > 0, 255.0, 0.0), a.out)
    if a.csv:
        write_grid_csv(cells, a.csv)


def _load_mask(path: str) -> np.ndarray:
    try:
        return read_pgm(path)
    except FileNotFoundError:
        raise DataError(f"{path}: no such file") from None
    except ParseError as exc:
        raise DataError(f"{path}: {exc}") from None


def cmd_evaluate(a) -> None:
    pred, truth = _load_mask(a.pred), _load_mask(a.truth)
    if pred.shape != truth.shape:
        raise DataError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    s = features.evaluate_extraction(pred, truth)
    _emit(_csv_text(["tp", "fp", "tn", "fn", "precision", "recall", "specificity"],
                    [[s.tp, s.fp, s.tn, s.fn, s.precision, s.recall, s.specificity]]), a.out)


def cmd_navigate(a) -> None:
    cfg = _load_world(a.world, a.seed)
    world = build_world(cfg)
    nav = apply_overrides(mission.NavigatorConfig, parse_overrides(a.set))
    follower = rownav.RowFollower(nav.gains, nav.row_params, nav.hold_frames, nav.max_omega)
    robot = _parse_pose(a.start, cfg)
    rows = []
    end_x = cfg.row_length if a.until is None else a.until
    for tick in range(a.max_ticks):
        lp = lidar_pose(world, robot)
        if lp.x >= end_x:
            break
        frame, labels = cast_scan(world, robot, nav.spec, seed=tick)
        omega = follower.update(frame)
        v = a.speed if omega is not None else 0.0
        rows.append([tick * nav.dt, robot.x, robot.y, robot.heading, labels.o_l, labels.o_a, v, omega or 0.0])
        if omega is None:
            print(f"row lost at tick {tick}; stopping", file=sys.stderr)
            break
        robot = step_robot(robot, v, omega, nav.dt)
    _emit(_csv_text(["t", "x", "y", "heading", "o_l_true", "o_a_true", "v", "omega"], rows), a.out)


def _zone(data: dict, key: str) -> VolumeOfInterest | None:
    if key not in data:
        return None
    try:
        return VolumeOfInterest.from_dict(data[key])
    except (TypeError, ValueError) as exc:
        raise DataError(f"zone {key!r}: {exc}") from None


def cmd_safety_monitor(a) -> None:
    zones = _load_json(a.zones) if a.zones else {}
    if not isinstance(zones, dict) or set(zones) - {"decel", "stop"}:
        raise DataError("zones file must be an object with optional 'decel' and 'stop' volumes")
    decel, stop = _zone(zones, "decel"), _zone(zones, "stop")
    spec = _spec(a.azimuths)
    latched = False
    lines = []
    for path in a.frame:
        dets = safety.detect_vests(_load_frame(path, spec), decel, stop)
        latched = latched or any(d.stop for d in dets)
        rec = {"frame": path, "detections": len(dets), "decel": any(d.decelerate for d in dets), "stop": latched,
               "positions": [list(d.position) if d.position else None for d in dets]}
        lines.append(json.dumps(_round6(rec)))
    _emit("".join(line + "\n" for line in lines), a.out)


def _read_rows(path: str, header: Sequence[str]) -> list[list[float]]:
    try:
        fh = open(path, newline="")
    except FileNotFoundError:
        raise DataError(f"{path}: no such file") from None
    with fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None or [h.strip() for h in first] != list(header):
            raise DataError(f"{path}: line 1: expected header {','.join(header)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                vals = [float(v) for v in row]
            except ValueError:
                raise DataError(f"{path}: line {lineno}: non-numeric field") from None
            if len(vals) != len(header) or not all(math.isfinite(v) for v in vals):
                raise DataError(f"{path}: line {lineno}: expected {len(header)} finite fields")
            rows.append(vals)
    return rows


def cmd_boom_nav(a) -> None:
    state = apply_overrides(boom.BoomTargetState, parse_overrides(a.set), boom_distance=a.boom_distance)
    scans = _read_rows(a.scans, ["scan", "y", "z"])
    odo = _read_rows(a.odometry, ["scan", "distance"])
    points: dict[int, list] = {}
    for s, y, z in scans:
        points.setdefault(int(s), []).append((y, z))
    rows, prev = [], None
    for s, dist in odo:
        if prev is not None and dist < prev:
            raise DataError(f"odometry decreases at scan {int(s)}")
        advance = 0.0 if prev is None else dist - prev
        prev = dist
        sp = state.process_scan(np.array(points.get(int(s), []), dtype=float).reshape(-1, 2), advance)
        rows.append([int(s), dist, sp])
    _emit(_csv_text(["scan", "distance_m", "setpoint_m"], rows), a.out)


def _geometry(path: str | None) -> arm.ArmGeometry:
    if path is None:
        return arm.ArmGeometry()
    data = _load_json(path)
    if not isinstance(data, dict):
        raise DataError(f"{path}: geometry must be a JSON object")
    known = {f.name for f in dataclasses.fields(arm.ArmGeometry)}
    if set(data) - known:
        raise DataError(f"{path}: unknown geometry keys {sorted(set(data) - known)}")
    try:
        if "base" in data:
            data["base"] = tuple(data["base"])
        if "limits" in data:
            data["limits"] = tuple(tuple(l) for l in data["limits"])
        return arm.ArmGeometry(**data)
    except (TypeError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from None


def cmd_ik(a) -> None:
    geom = _geometry(a.geometry)
    result: dict[str, Any] = {}
    if a.target is not None:
        try:
            x, y = (float(v) for v in a.target.split(","))
        except ValueError:
            raise UsageError("--target must be x,y") from None
        sols = arm.ik_planar3((x, y), a.beta, geom)
        result = {"target": [x, y], "beta": a.beta,
                  "solutions": [list(s) for s in sols]}
    if a.workspace:
        wmap = arm.build_workspace(geom, a.beta, arm.WorkspaceGrid(resolution=a.resolution))
        prefix = Path(a.workspace)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        write_ppm(wmap.to_rgb()[::-1], f"{prefix}.ppm")  # top row of the image = highest grid row
        rows = []
        for r, c in zip(*np.nonzero(wmap.reachable)):
            xc, yc = wmap.grid.centre(int(r), int(c))
            rows.append([int(r), int(c), fmt(xc), fmt(yc), *(repr(float(v)) for v in wmap.angles[r, c])])
        with open(f"{prefix}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row", "col", "x_m", "y_m", "theta1_rad", "theta2_rad", "theta3_rad"])
            w.writerows(rows)
        result["workspace_cells"] = int(wmap.reachable.sum())
    if not result:
        raise UsageError("ik needs --target and/or --workspace")
    sys.stdout.write(json.dumps(_round6(result)) + "\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise UsageError(f"bad integer list {text!r}") from None


def cmd_sweep(a) -> None:
    template = _load_world(a.world, 0) if a.world else sweep.CLUTTERED_ROWS
    grid = {"segments": _int_list(a.segments), "metric": [m for m in a.metrics.split(",") if m]}
    if not grid["segments"] or not grid["metric"]:
        raise UsageError("empty parameter grid")
    suite = sweep.synthetic_suite(a.frames, seed=a.seed, template=template, spec=_spec(a.azimuths))
    rows = sweep.run_sweep(grid, sweep.plane_selection_pipeline(suite, a.truth))
    out = [[r.params["segments"], r.params["metric"], r.precision, r.recall, r.runtime, r.error] for r in rows]
    _emit(_csv_text(["segments", "metric", "precision", "recall", "runtime_s", "error"], out), a.out)
    failed = sum(1 for r in rows if r.error)
    if failed:
        print(f"{failed} of {len(rows)} cells failed", file=sys.stderr)


# --------------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="orchardnav", description="Orchard lidar navigation pipelines.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def overrides(sp):
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="parameter override (repeatable)")

    def azimuths(sp):
        sp.add_argument("--azimuths", type=int, default=None, help="azimuth columns per frame (default 900)")

    s = sub.add_parser("simulate", help="run a mission path in a synthetic world")
    s.add_argument("--world", required=True)
    s.add_argument("--path", help="path JSON (default: the built-in row-to-row path)")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--start", help="x,y,heading of the kinematic centre")
    s.add_argument("--frame-every", type=int, default=10, help="save a frame every N ticks")
    overrides(s)
    azimuths(s)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("detect-row", help="row offsets from frame CSVs")
    s.add_argument("--frame", required=True, nargs="+")
    s.add_argument("--out")
    azimuths(s)
    overrides(s)
    s.set_defaults(func=cmd_detect_row)

    s = sub.add_parser("extract-features", help="bird's-eye structure mask from a frame CSV")
    s.add_argument("--frame", required=True)
    s.add_argument("--method", choices=("plane", "density", "vertical", "scaled-density", "vertical-objects"),
                   default="vertical")
    s.add_argument("--out", required=True, help="mask PGM")
    s.add_argument("--csv", help="also write the raw grid as CSV")
    azimuths(s)
    overrides(s)
    s.set_defaults(func=cmd_extract_features)

    s = sub.add_parser("evaluate", help="confusion counts of a predicted mask against a truth mask")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("navigate", help="closed-loop row following in a synthetic world")
    s.add_argument("--world", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--start", help="x,y,heading of the kinematic centre")
    s.add_argument("--speed", type=float, default=1.0)
    s.add_argument("--until", type=float, help="stop when the lidar passes this x (default: row end)")
    s.add_argument("--max-ticks", type=int, default=2000)
    s.add_argument("--out")
    overrides(s)
    s.set_defaults(func=cmd_navigate)

    s = sub.add_parser("safety-monitor", help="vest detection with deceleration and stop zones")
    s.add_argument("--frame", required=True, nargs="+")
    s.add_argument("--zones", help="JSON with 'decel' and 'stop' volumes")
    s.add_argument("--out")
    azimuths(s)
    s.set_defaults(func=cmd_safety_monitor)

    s = sub.add_parser("boom-nav", help="boom set-points from vertical scans and odometry")
    s.add_argument("--scans", required=True, help="CSV scan,y,z")
    s.add_argument("--odometry", required=True, help="CSV scan,distance")
    s.add_argument("--boom-distance", type=float, required=True)
    s.add_argument("--out")
    overrides(s)
    s.set_defaults(func=cmd_boom_nav)

    s = sub.add_parser("ik", help="planar arm inverse kinematics and workspace export")
    s.add_argument("--target", help="x,y of the end effector")
    s.add_argument("--beta", type=float, default=math.pi / 2, help="end-effector angle (rad)")
    s.add_argument("--geometry", help="JSON with r1, r2, r3, base, limits")
    s.add_argument("--workspace", help="output prefix for the workspace PPM and CSV")
    s.add_argument("--resolution", type=float, default=0.005)
    s.set_defaults(func=cmd_ik)

    s = sub.add_parser("sweep", help="plane-selection parameter sweep on a synthetic suite")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--world", help="template world JSON (its seed is replaced per frame)")
    s.add_argument("--frames", type=int, default=20)
    s.add_argument("--segments", default="1,5,30,450")
    s.add_argument("--metrics", default="mean,median,maximum")
    s.add_argument("--truth", choices=("posts_trunks", "structure"), default="posts_trunks")
    s.add_argument("--out")
    azimuths(s)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "frame_every", 1) < 1:
        print("--frame-every must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ParseError, mission.PathError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
