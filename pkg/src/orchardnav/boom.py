"""Boom-height set-points from a vertical lidar scanning ahead of a spray boom."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .sim import OrchardWorld, RobotState, cast_vertical_scan


def nearest_rank(values, percentile: float) -> float:
    """Nearest-rank percentile: the ceil(p * n / 100)-th smallest value (at least the first)."""
    v = np.sort(np.asarray(values, dtype=float).ravel())
    if not v.size:
        raise ValueError("no values")
    if not 0 <= percentile <= 100:
        raise ValueError("percentile must lie in [0, 100]")
    k = max(1, math.ceil(percentile * v.size / 100.0))
    return float(v[k - 1])


def boom_roi(points: np.ndarray, half_width: float, z_floor: float) -> np.ndarray:
    """Keep (y, z) points inside the boom's possible sweep and above ``z_floor``."""
    p = np.asarray(points, dtype=float).reshape(-1, 2)
    return p[(np.abs(p[:, 0]) <= half_width) & (p[:, 1] > z_floor)]


def scan_target(points: np.ndarray, percentile: float = 10.0, offset: float = 0.0) -> float | None:
    """Boom target for one scan, or ``None`` when the region holds no canopy."""
    p = np.asarray(points, dtype=float)
    if not p.size:
        return None
    z = p.reshape(-1, 2)[:, 1] if p.ndim == 2 else p
    return nearest_rank(z, percentile) - offset


_ODOMETRY_EPS = 1e-9  # keeps a target whose plane the boom has reached up to rounding


class CollationMode(str, Enum):
    MINIMUM = "minimum"
    MEDIAN = "median"


@dataclass
class BoomTargetState:
    boom_distance: float  # along-track distance from the scan plane back to the boom plane
    min_height: float = 0.0
    mode: CollationMode = CollationMode.MINIMUM
    percentile: float = 10.0  # per-scan canopy percentile
    offset: float = 0.0  # canopy offset plus lidar-to-boom-top displacement
    half_width: float = 1.0
    z_floor: float = 1.0
    targets: list = field(default_factory=list)  # [(distance to boom plane, height)], sorted

    def __post_init__(self) -> None:
        self.mode = CollationMode(self.mode)
        if not self.boom_distance > 0:
            raise ValueError("boom_distance must be > 0")
        if not 0 <= self.percentile <= 100:
            raise ValueError("percentile must lie in [0, 100]")
        if not self.half_width > 0:
            raise ValueError("half_width must be > 0")

    def setpoint(self, mode: CollationMode | None = None) -> float:
        if not self.targets:
            return self.min_height
        heights = [h for _, h in self.targets]
        if CollationMode(mode or self.mode) is CollationMode.MINIMUM:
            return max(self.min_height, min(heights))
        return max(self.min_height, nearest_rank(heights, 50.0))

    def update(self, advance: float, target: float | None, solid_branch: float | None = None) -> float:
        """Advance the collation by odometry, add this scan's target and return the set-point.

        A missing target (no canopy) is collated as the minimum height. A solid-branch height
        is collated too and forces minimum mode for this update.
        """
        if advance < 0:
            raise ValueError("odometry must be monotone")
        self.targets = [(d - advance, h) for d, h in self.targets if d - advance >= -_ODOMETRY_EPS]
        self.targets.append((self.boom_distance, self.min_height if target is None else target))
        mode = None
        if solid_branch is not None:
            self.targets.append((self.boom_distance, solid_branch))
            mode = CollationMode.MINIMUM
        self.targets.sort(key=lambda t: t[0])
        return self.setpoint(mode)

    def process_scan(self, points: np.ndarray, advance: float, solid_branch: float | None = None) -> float:
        roi = boom_roi(points, self.half_width, self.z_floor)
        return self.update(advance, scan_target(roi, self.percentile, self.offset), solid_branch)


def combine_disparities(d1, d2, diff_threshold: float) -> np.ndarray:
    """Average two disparity maps where they agree; 0 (out of range) where they differ by more than the threshold."""
    a, b = np.asarray(d1, dtype=float), np.asarray(d2, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return np.where(np.abs(a - b) > diff_threshold, 0.0, 0.5 * (a + b))


@dataclass(frozen=True)
class ReplaySummary:
    frames: int
    frames_below: int
    points_below: int
    points_far_below: int  # more than ``margin`` below the set-point
    setpoints: np.ndarray


def replay_boom(world: OrchardWorld, state: BoomTargetState, y: float, x_start: float, step: float,
                n_scans: int, sensor_height: float = 1.0, margin: float = 0.1, seed: int = 0) -> ReplaySummary:
    """Drive a scanner along ``y`` and check the commanded set-point against a second scan at the boom plane.

    The robot advances ``step`` metres per scan in +x. Boom-plane points inside the region of
    interest are compared with the set-point in force when the boom reaches that plane.
    """
    heading = 0.0
    setpoints = np.zeros(n_scans)
    frames_below = points_below = far_below = 0
    for i in range(n_scans):
        x = x_start + i * step
        front = cast_vertical_scan(world, RobotState(x, y, heading), height=sensor_height, seed=seed + 2 * i)
        sp = state.process_scan(front.points, step if i else 0.0)
        setpoints[i] = sp
        boom_x = x - state.boom_distance
        if boom_x < x_start:
            continue
        plane = cast_vertical_scan(world, RobotState(boom_x, y, heading), height=sensor_height, seed=seed + 2 * i + 1)
        roi = boom_roi(plane.points, state.half_width, state.z_floor)
        gap = sp - roi[:, 1]
        below = int(np.sum(gap > 0))
        points_below += below
        frames_below += below > 0
        far_below += int(np.sum(gap > margin))
    return ReplaySummary(n_scans, frames_below, points_below, far_below, setpoints)
