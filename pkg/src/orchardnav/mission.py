"""Row-end detection, naive row-end turns and the state-machine path executor."""
from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .rownav import ControllerGains, RowDetectParams, RowFollower, detect_row
from .scan import LidarFrame, LidarSpec
from .sim import OrchardWorld, RobotState, cast_scan, footprint_clearance, lidar_pose, step_robot
from .volume import VolumeOfInterest, object_in_volume

STRAIGHT = 1e9  # turn-radius sentinel for straight driving


class VertexType(str, Enum):
    IN_ROW = "IN_ROW"
    ROW_END = "ROW_END"


class Boundary(str, Enum):
    FIXED_LENGTH = "FIXED_LENGTH"
    NO_CANOPY = "NO_CANOPY"
    HEDGE_OFFSET = "HEDGE_OFFSET"
    DEFINITE_ROW = "DEFINITE_ROW"


class Additional(str, Enum):
    NONE = "NONE"
    USE_BUMPER = "USE_BUMPER"


# field name in path files -> attribute
PATH_FIELDS = {
    "State ID": "state_id",
    "Vertex Type": "vertex_type",
    "Offset in Location (m)": "offset_in_location",
    "Target Speed (ms-1)": "target_speed",
    "Goal Turn Radius (m)": "goal_turn_radius",
    "Boundary Condition Criteria": "boundary_condition",
    "Boundary Condition Parameter": "boundary_parameter",
    "Additional Parameter": "additional_parameter",
    "Additional Parameter Value": "additional_value",
}


def _key(name: str) -> str:
    """Lower-case alphanumerics only, so superscript/spacing variants of a field name match."""
    name = name.replace("⁻¹", "-1").replace("⁻", "-").replace("¹", "1")
    return re.sub(r"[^a-z0-9]", "", name.lower())


_FIELD_KEYS = {_key(k): v for k, v in PATH_FIELDS.items()}


class PathError(ValueError):
    pass


@dataclass(frozen=True)
class PathState:
    state_id: int
    vertex_type: VertexType
    target_speed: float
    goal_turn_radius: float = STRAIGHT
    boundary_condition: Boundary = Boundary.FIXED_LENGTH
    boundary_parameter: float = 1.0
    additional_parameter: Additional = Additional.NONE
    additional_value: float = 0.0
    offset_in_location: float = 0.0  # stored, unused by the executor

    def __post_init__(self) -> None:
        object.__setattr__(self, "vertex_type", VertexType(self.vertex_type))
        object.__setattr__(self, "boundary_condition", Boundary(self.boundary_condition))
        object.__setattr__(self, "additional_parameter", Additional(self.additional_parameter))
        for name in ("target_speed", "goal_turn_radius", "boundary_parameter", "additional_value",
                     "offset_in_location"):
            if not math.isfinite(getattr(self, name)):
                raise PathError(f"state {self.state_id}: {name} must be finite")
        if self.target_speed < 0:
            raise PathError(f"state {self.state_id}: target_speed must be >= 0")
        if self.goal_turn_radius == 0:
            raise PathError(f"state {self.state_id}: goal_turn_radius must be non-zero")
        if self.boundary_condition is Boundary.FIXED_LENGTH and not self.boundary_parameter > 0:
            raise PathError(f"state {self.state_id}: FIXED_LENGTH parameter must be > 0")
        if self.boundary_condition in (Boundary.NO_CANOPY, Boundary.DEFINITE_ROW) and self.boundary_parameter < 1:
            raise PathError(f"state {self.state_id}: frame-count parameter must be >= 1")
        if self.boundary_condition is Boundary.HEDGE_OFFSET and not self.boundary_parameter > 0:
            raise PathError(f"state {self.state_id}: HEDGE_OFFSET parameter must be > 0")
        if self.additional_parameter is Additional.USE_BUMPER and not self.additional_value > 0:
            raise PathError(f"state {self.state_id}: USE_BUMPER value must be > 0")

    @property
    def straight(self) -> bool:
        return abs(self.goal_turn_radius) >= STRAIGHT

    def to_record(self) -> dict:
        out = {}
        for name, attr in PATH_FIELDS.items():
            v = getattr(self, attr)
            out[name] = v.value if isinstance(v, Enum) else v
        return out

    @classmethod
    def from_record(cls, rec: dict) -> "PathState":
        if not isinstance(rec, dict):
            raise PathError("path entries must be objects")
        kw = {}
        for k, v in rec.items():
            attr = _FIELD_KEYS.get(_key(k))
            if attr is None:
                raise PathError(f"unknown path field {k!r}")
            kw[attr] = v
        missing = {"state_id", "vertex_type", "target_speed", "boundary_condition"} - kw.keys()
        if missing:
            raise PathError(f"missing path fields: {sorted(missing)}")
        try:
            kw["state_id"] = int(kw["state_id"])
            for name in ("target_speed", "goal_turn_radius", "boundary_parameter", "additional_value",
                         "offset_in_location"):
                if name in kw:
                    kw[name] = float(kw[name])
            return cls(**kw)
        except PathError:
            raise
        except (TypeError, ValueError) as exc:
            raise PathError(f"state {kw.get('state_id')}: {exc}") from exc


def _group_types(states: Sequence[PathState]) -> list[VertexType]:
    groups: list[VertexType] = []
    for s in states:
        if not groups or groups[-1] is not s.vertex_type:
            groups.append(s.vertex_type)
    return groups


def validate_path(states: Sequence[PathState]) -> None:
    """Non-empty, unique ids, and at least one row traversal; consecutive vertices differ by construction."""
    if not states:
        raise PathError("path is empty")
    ids = [s.state_id for s in states]
    if len(set(ids)) != len(ids):
        raise PathError("state ids must be unique")
    if VertexType.IN_ROW not in _group_types(states):
        raise PathError("path needs at least one row traversal")


def load_path(path: str | Path) -> list[PathState]:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise PathError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, list):
        raise PathError("path file must hold a JSON array")
    states = [PathState.from_record(r) for r in data]
    validate_path(states)
    return states


def save_path(states: Sequence[PathState], path: str | Path) -> None:
    Path(path).write_text(json.dumps([s.to_record() for s in states], indent=2) + "\n")


def _s(i, v, speed, radius, bc, bp, ap=Additional.NONE, av=0.0):
    return PathState(i, v, speed, radius, bc, bp, ap, av)


_IN, _END = VertexType.IN_ROW, VertexType.ROW_END
B = Boundary
ROW_TO_ROW_PATH = (
    _s(10, _IN, 0.3, STRAIGHT, B.FIXED_LENGTH, 5.0),
    _s(11, _IN, 1.0, STRAIGHT, B.NO_CANOPY, 5),
    _s(12, _END, 0.3, STRAIGHT, B.HEDGE_OFFSET, 2.3),
    _s(13, _END, 0.3, 2.0, B.FIXED_LENGTH, 2.5),
    _s(14, _END, 0.3, 1.7, B.FIXED_LENGTH, 2.7, Additional.USE_BUMPER, 0.05),
    _s(15, _END, 0.3, 1.7, B.DEFINITE_ROW, 5),
    _s(20, _IN, 0.3, STRAIGHT, B.FIXED_LENGTH, 5.0),
)


# ------------------------------------------------------------------ detectors


def hedge_volume(reach: float, half_width: float = 1.0, z_min: float = -0.3, z_max: float = 1.5,
                 count_threshold: int = 10) -> VolumeOfInterest:
    """Box straight ahead of the lidar whose far face sits ``reach`` metres out."""
    return VolumeOfInterest(0.05, reach, -half_width, half_width, z_min, z_max, count_threshold)


def detect_hedge_proximity(frame: LidarFrame, volume: VolumeOfInterest) -> bool:
    return object_in_volume(frame.points(), volume)


@dataclass
class MissionStatus:
    state_index: int = 0
    entry_odometer: float = 0.0
    debounce: int = 0
    debounce_limit: int = 5
    row_frames: int = 0
    radius: float = STRAIGHT
    last_v: float = 0.0
    last_omega: float = 0.0

    def __post_init__(self) -> None:
        if self.debounce_limit < 1:
            raise ValueError("debounce_limit must be >= 1")
        if not 0 <= self.debounce <= self.debounce_limit:
            raise ValueError("debounce must lie in [0, debounce_limit]")


def default_canopy_volumes(threshold: int = 5) -> tuple[VolumeOfInterest, VolumeOfInterest]:
    """Left/right boxes beside the lidar reaching down to post and trunk height."""
    left = VolumeOfInterest(-3.0, 3.0, 1.0, 4.0, -0.6, 1.5, threshold)
    return left, left.mirrored()


def detect_canopy_absence(frame: LidarFrame, left: VolumeOfInterest, right: VolumeOfInterest,
                          status: MissionStatus) -> bool:
    pts = frame.points()
    absent = left.count(pts) < left.count_threshold or right.count(pts) < right.count_threshold
    status.debounce = min(status.debounce_limit, status.debounce + 1) if absent else 0
    return status.debounce >= status.debounce_limit


@dataclass(frozen=True)
class MotionPrimitive:
    kind: str  # "straight" or "arc"
    length: float  # metres along the path
    radius: float = STRAIGHT
    direction: int = 1  # +1 left, -1 right

    def commands(self, speed: float) -> tuple[float, float]:
        """(v, omega) executing this primitive at ``speed``."""
        if self.kind == "straight":
            return speed, 0.0
        return speed, self.direction * speed / self.radius


def plan_naive_turn(straight_length: float, radius: float, arc_angle: float, direction: int = 1,
                    row_width: float | None = None) -> list[MotionPrimitive]:
    if straight_length < 0:
        raise ValueError("straight_length must be >= 0")
    if not radius > 0:
        raise ValueError("radius must be > 0")
    if not 0 < arc_angle < math.pi:
        raise ValueError("arc_angle must lie in (0, pi)")
    if direction not in (-1, 1):
        raise ValueError("direction must be +1 or -1")
    if row_width is not None and not 2 * radius < row_width:
        raise ValueError("turn diameter must be smaller than the row width")
    return [MotionPrimitive("straight", straight_length),
            MotionPrimitive("arc", radius * arc_angle, radius, direction)]


def primitives_end_pose(primitives: Iterable[MotionPrimitive]) -> tuple[float, float, float]:
    """Pose (x, y, heading) after the primitives, starting at the origin facing +x."""
    x = y = th = 0.0
    for p in primitives:
        if p.kind == "straight":
            x += p.length * math.cos(th)
            y += p.length * math.sin(th)
        else:
            dth = p.direction * p.length / p.radius
            r = p.direction * p.radius
            x += r * (math.sin(th + dth) - math.sin(th))
            y -= r * (math.cos(th + dth) - math.cos(th))
            th += dth
    return x, y, th


def bumper_adjust(frame: LidarFrame, volume: VolumeOfInterest, radius: float, delta: float,
                  min_radius: float = 0.5) -> float:
    """Sharpen the turn by ``delta`` when the bumper field holds an object; the sign is kept."""
    if not delta > 0:
        raise ValueError("delta must be > 0")
    if not object_in_volume(frame.points(), volume):
        return radius
    return math.copysign(max(min_radius, abs(radius) - delta), radius)


# ------------------------------------------------------------------ executor


class MissionAbort(RuntimeError):
    def __init__(self, state_id: int, reason: str, log: "TrajectoryLog | None" = None) -> None:
        super().__init__(f"state {state_id}: {reason}")
        self.state_id = state_id
        self.log = log  # trajectory up to the abort


@dataclass
class NavigatorConfig:
    dt: float = 0.1
    spec: LidarSpec = field(default_factory=lambda: LidarSpec(n_azimuths=450))
    gains: ControllerGains = field(default_factory=ControllerGains)
    row_params: RowDetectParams = field(default_factory=RowDetectParams)
    canopy_volumes: tuple[VolumeOfInterest, VolumeOfInterest] = field(default_factory=default_canopy_volumes)
    hedge_half_width: float = 1.0
    hedge_threshold: int = 10
    # bumper for a left turn (right front of the robot, lidar frame); mirrored for right turns
    bumper: VolumeOfInterest = field(
        default_factory=lambda: VolumeOfInterest(-0.5, 0.5, -1.5, -1.1, -0.6, 1.2, 3))
    min_radius: float = 0.5
    max_omega: float = 1.0
    hold_frames: int = 5
    debounce_limit: int = 5
    watchdog_factor: float = 3.0
    expected_length: dict = field(default_factory=lambda: {
        Boundary.NO_CANOPY: 100.0, Boundary.HEDGE_OFFSET: 20.0, Boundary.DEFINITE_ROW: 5.0})
    turn_direction: int | None = None  # None -> toward the neighbouring row

    def __post_init__(self) -> None:
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if not self.watchdog_factor > 0:
            raise ValueError("watchdog_factor must be > 0")
        if self.turn_direction not in (None, -1, 1):
            raise ValueError("turn_direction must be None, -1 or +1")


@dataclass
class TrajectoryLog:
    t: list = field(default_factory=list)
    x: list = field(default_factory=list)
    y: list = field(default_factory=list)
    heading: list = field(default_factory=list)
    state_id: list = field(default_factory=list)
    v: list = field(default_factory=list)
    omega: list = field(default_factory=list)
    clearance: list = field(default_factory=list)  # footprint-to-post gap per tick
    visited: list = field(default_factory=list)  # state ids in the order entered
    completed: bool = False

    COLUMNS = ("t", "x", "y", "heading", "state_id", "v", "omega")

    def __len__(self) -> int:
        return len(self.t)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for row in zip(*(getattr(self, c) for c in self.COLUMNS)):
                w.writerow([f"{v:.6g}" if isinstance(v, float) else v for v in row])

    def min_clearance(self, state_ids: Iterable[int] | None = None) -> float:
        c = np.asarray(self.clearance, dtype=float)
        if state_ids is not None:
            c = c[np.isin(np.asarray(self.state_id), list(state_ids))]
        return float(c.min()) if c.size else math.inf


def infer_turn_direction(world: OrchardWorld, robot: RobotState) -> int:
    """+1 (left) or -1 (right) so the turn ends in the adjacent row, preferring the next row up."""
    row = world.row_index(robot.y)
    toward_plus_y = row + 1 < world.config.row_count
    facing_plus_x = math.cos(robot.heading) >= 0
    return 1 if toward_plus_y == facing_plus_x else -1


def _watchdog(state: PathState, cfg: NavigatorConfig) -> float:
    if state.boundary_condition is Boundary.FIXED_LENGTH:
        expected = state.boundary_parameter
    else:
        expected = cfg.expected_length[state.boundary_condition]
    return cfg.watchdog_factor * expected


_NEEDS_FRAME = {Boundary.NO_CANOPY, Boundary.HEDGE_OFFSET, Boundary.DEFINITE_ROW}


def run_path(path: Sequence[PathState], world: OrchardWorld, start: RobotState,
             config: NavigatorConfig | None = None, seed: int = 0) -> TrajectoryLog:
    """Drive ``path`` through ``world`` at a fixed tick; raises :class:`MissionAbort` on a stuck state."""
    validate_path(path)
    cfg = config or NavigatorConfig()
    status = MissionStatus(debounce_limit=cfg.debounce_limit)
    follower = RowFollower(cfg.gains, cfg.row_params, cfg.hold_frames, cfg.max_omega)
    log = TrajectoryLog()
    robot = start
    direction = cfg.turn_direction or infer_turn_direction(world, lidar_pose(world, robot))
    max_ticks_idle = int(round(30.0 / cfg.dt))
    idle = 0
    tick = 0

    def enter(i: int) -> None:
        status.state_index = i
        status.entry_odometer = robot.odometer
        status.debounce = 0
        status.row_frames = 0
        status.radius = path[i].goal_turn_radius
        log.visited.append(path[i].state_id)
        if path[i].vertex_type is VertexType.IN_ROW:
            follower.missed = 0

    cached: tuple[int, LidarFrame | None] = (-1, None)
    enter(0)
    while True:
        state = path[status.state_index]
        need_frame = (state.boundary_condition in _NEEDS_FRAME or state.vertex_type is VertexType.IN_ROW
                      or state.additional_parameter is Additional.USE_BUMPER)
        if need_frame and cached[0] != tick:
            cached = (tick, cast_scan(world, robot, cfg.spec, seed=tick)[0])
        frame = cached[1] if need_frame else None
        estimate = None

        travelled = robot.odometer - status.entry_odometer
        bc = state.boundary_condition
        if bc is Boundary.FIXED_LENGTH:
            done = travelled >= state.boundary_parameter - 1e-9
        elif bc is Boundary.NO_CANOPY:
            done = detect_canopy_absence(frame, *cfg.canopy_volumes, status)
        elif bc is Boundary.HEDGE_OFFSET:
            vol = hedge_volume(state.boundary_parameter, cfg.hedge_half_width, count_threshold=cfg.hedge_threshold)
            done = detect_hedge_proximity(frame, vol)
        else:
            estimate = detect_row(frame, cfg.row_params)
            status.row_frames = status.row_frames + 1 if estimate.two_sided else 0
            done = status.row_frames >= state.boundary_parameter
        if done:
            if status.state_index + 1 == len(path):
                log.completed = True
                return log
            enter(status.state_index + 1)
            continue  # the new state is evaluated on this same tick
        if travelled > _watchdog(state, cfg):
            raise MissionAbort(state.state_id, "boundary condition not met within watchdog distance", log)

        v = state.target_speed
        if state.vertex_type is VertexType.IN_ROW:
            omega = follower.update(frame, estimate) if state.straight else direction * v / state.goal_turn_radius
            if omega is None:
                v, omega = 0.0, 0.0
        else:
            if state.additional_parameter is Additional.USE_BUMPER and not state.straight:
                field_ = cfg.bumper if direction > 0 else cfg.bumper.mirrored()
                status.radius = bumper_adjust(frame, field_, status.radius, state.additional_value, cfg.min_radius)
            omega = 0.0 if state.straight else direction * v / status.radius
        idle = idle + 1 if v == 0 else 0
        if idle > max_ticks_idle:
            raise MissionAbort(state.state_id, "robot stopped: row lost", log)

        log.t.append(tick * cfg.dt)
        log.x.append(robot.x)
        log.y.append(robot.y)
        log.heading.append(robot.heading)
        log.state_id.append(state.state_id)
        log.v.append(v)
        log.omega.append(omega)
        log.clearance.append(footprint_clearance(world, robot))
        status.last_v, status.last_omega = v, omega
        robot = step_robot(robot, v, omega, cfg.dt)
        tick += 1
