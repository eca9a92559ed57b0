"""Planar three-link arm kinematics, workspace maps, waypoint planning and sensor-to-arm calibration."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

_TWO_PI = 2.0 * math.pi


def wrap(a: float) -> float:
    """Angle in (-pi, pi]."""
    a = math.fmod(a + math.pi, _TWO_PI)
    if a <= 0:
        a += _TWO_PI
    return a - math.pi


def _full_range() -> tuple[tuple[float, float], ...]:
    return ((-math.pi, math.pi),) * 3


@dataclass(frozen=True)
class ArmGeometry:
    r1: float = 0.155
    r2: float = 0.135
    r3: float = 0.2175
    base: tuple[float, float] = (0.033, 0.147)
    limits: tuple[tuple[float, float], ...] = field(default_factory=_full_range)

    def __post_init__(self) -> None:
        for name in ("r1", "r2", "r3"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        object.__setattr__(self, "base", (float(self.base[0]), float(self.base[1])))
        lim = tuple((float(lo), float(hi)) for lo, hi in self.limits)
        if len(lim) != 3 or any(lo > hi for lo, hi in lim):
            raise ValueError("limits must be three (low, high) pairs with low <= high")
        object.__setattr__(self, "limits", lim)

    @property
    def reach(self) -> float:
        return self.r1 + self.r2 + self.r3

    def within_limits(self, angles: Sequence[float], tol: float = 1e-12) -> bool:
        return all(lo - tol <= a <= hi + tol for a, (lo, hi) in zip(angles, self.limits))


def fk_planar3(angles: Sequence[float], geometry: ArmGeometry) -> tuple[float, float]:
    a1, a2, a3 = angles
    x1, y1 = geometry.base
    c1, c12, c123 = a1, a1 + a2, a1 + a2 + a3
    x = x1 + geometry.r1 * math.cos(c1) + geometry.r2 * math.cos(c12) + geometry.r3 * math.cos(c123)
    y = y1 + geometry.r1 * math.sin(c1) + geometry.r2 * math.sin(c12) + geometry.r3 * math.sin(c123)
    return x, y


def _elbow_roots(p1: tuple[float, float], p3: tuple[float, float], r1: float, r2: float) -> list[tuple[float, float]]:
    """Points at distance r1 from p1 and r2 from p3, solved as a quadratic in the second coordinate.

    Requires p3[0] != p1[0]; the caller swaps axes otherwise.
    """
    x1, y1 = p1
    x3, y3 = p3
    d = (y1 - y3) / (x3 - x1)
    e = (x3 * x3 + y3 * y3 - r2 * r2 - x1 * x1 - y1 * y1 + r1 * r1) / (2.0 * x3 - 2.0 * x1)
    # quadratic a y^2 + b y + c = 0 with its discriminant expanded so nothing large cancels
    f = e - x1
    a = 1.0 + d * d
    half_b = d * f - y1
    quarter_disc = a * r1 * r1 - (f + d * y1) ** 2
    if quarter_disc < 0:
        if quarter_disc < -1e-12 * a * r1 * r1:
            return []
        quarter_disc = 0.0
    s = math.sqrt(quarter_disc)
    ys = [-half_b / a] if s == 0 else [(-half_b + s) / a, (-half_b - s) / a]
    return [(d * y2 + e, y2) for y2 in ys]


def ik_planar3(target: Sequence[float], beta: float, geometry: ArmGeometry) -> list[tuple[float, float, float]]:
    """Joint solutions (up to two) placing the end at ``target`` with final-link angle ``beta``.

    Solutions are ordered by descending elbow height; those outside the joint limits are dropped.
    An empty list means the target is unreachable (or the wrist sits on the base, a degenerate family).
    """
    xe, ye = float(target[0]), float(target[1])
    x1, y1 = geometry.base
    x3 = xe - geometry.r3 * math.cos(beta)
    y3 = ye - geometry.r3 * math.sin(beta)
    if x3 == x1 and y3 == y1:
        return []
    if abs(x3 - x1) >= abs(y3 - y1):
        elbows = _elbow_roots((x1, y1), (x3, y3), geometry.r1, geometry.r2)
    else:  # near-vertical chord: solve with the axes exchanged
        elbows = [(x, y) for y, x in _elbow_roots((y1, x1), (y3, x3), geometry.r1, geometry.r2)]
    elbows.sort(key=lambda p: -p[1])
    out = []
    for x2, y2 in elbows:
        a1 = math.atan2(y2 - y1, x2 - x1)
        a2 = wrap(math.atan2(y3 - y2, x3 - x2) - a1)
        a3 = wrap(beta - a1 - a2)
        sol = (a1, a2, a3)
        if geometry.within_limits(sol) and not any(np.allclose(sol, o, atol=1e-12) for o in out):
            out.append(sol)
    return out


# ------------------------------------------------------------------ workspace


@dataclass(frozen=True)
class WorkspaceGrid:
    x_min: float = -0.09
    x_max: float = 0.26
    y_min: float = 0.40
    y_max: float = 0.75
    resolution: float = 0.005

    def __post_init__(self) -> None:
        if not self.resolution > 0:
            raise ValueError("resolution must be > 0")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError("grid bounds must satisfy min < max")

    @property
    def shape(self) -> tuple[int, int]:
        """(rows along y, columns along x), both ends inclusive."""
        ny = int(round((self.y_max - self.y_min) / self.resolution)) + 1
        nx = int(round((self.x_max - self.x_min) / self.resolution)) + 1
        return ny, nx

    def centre(self, row: int, col: int) -> tuple[float, float]:
        return self.x_min + col * self.resolution, self.y_min + row * self.resolution

    def cell(self, x: float, y: float) -> tuple[int, int]:
        return int(round((y - self.y_min) / self.resolution)), int(round((x - self.x_min) / self.resolution))


@dataclass(frozen=True, eq=False)
class WorkspaceMap:
    grid: WorkspaceGrid
    beta: float
    angles: np.ndarray  # (rows, cols, 3); NaN where unreachable
    sheets: np.ndarray  # (rows, cols, 2, 3) raw IK solutions before consolidation (NaN where absent)

    @property
    def reachable(self) -> np.ndarray:
        return ~np.isnan(self.angles[..., 0])

    def lowest_row(self, col: int) -> int | None:
        rows = np.nonzero(self.reachable[:, col])[0]
        return int(rows[0]) if len(rows) else None

    def to_rgb(self) -> np.ndarray:
        """Joint angles byte-scaled from [-pi, pi] to [1, 255]; unreachable cells 0."""
        img = np.zeros(self.angles.shape, dtype=np.uint8)
        ok = self.reachable
        img[ok] = np.clip(np.floor((self.angles[ok] + math.pi) / _TWO_PI * 254 + 1.5), 1, 255).astype(np.uint8)
        return img


def _ik_sheets(xe: np.ndarray, ye: np.ndarray, beta: float, geometry: ArmGeometry) -> np.ndarray:
    """Array form of :func:`ik_planar3`: (n, 2, 3) solutions, NaN where absent, same ordering rules."""
    x1, y1 = geometry.base
    r1, r2 = geometry.r1, geometry.r2
    x3 = xe - geometry.r3 * math.cos(beta)
    y3 = ye - geometry.r3 * math.sin(beta)
    swap = np.abs(x3 - x1) < np.abs(y3 - y1)
    # per element: solve in the frame where the chord's first coordinate differs most
    u1, v1 = np.where(swap, y1, x1), np.where(swap, x1, y1)
    u3, v3 = np.where(swap, y3, x3), np.where(swap, x3, y3)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = (v1 - v3) / (u3 - u1)
        e = (u3 * u3 + v3 * v3 - r2 * r2 - u1 * u1 - v1 * v1 + r1 * r1) / (2.0 * u3 - 2.0 * u1)
    a = 1.0 + d * d
    b = 2.0 * d * e - 2.0 * d * u1 - 2.0 * v1
    c = -2.0 * e * u1 + u1 * u1 + v1 * v1 - r1 * r1 + e * e
    disc = b * b - 4.0 * a * c
    scale = np.maximum(np.maximum(b * b, np.abs(4.0 * a * c)), 1e-300)
    ok = np.isfinite(disc) & (disc >= -1e-12 * scale) & ~((x3 == x1) & (y3 == y1))
    root = np.sqrt(np.where(ok, np.maximum(disc, 0.0), 0.0))
    out = np.full((len(xe), 2, 3), np.nan)
    elbows = []
    for sign in (1.0, -1.0):
        v2 = (-b + sign * root) / (2.0 * a)
        u2 = d * v2 + e
        elbows.append((np.where(swap, v2, u2), np.where(swap, u2, v2)))
    # descending elbow height
    first_high = elbows[0][1] >= elbows[1][1]
    order = [(np.where(first_high, elbows[0][k], elbows[1][k]), np.where(first_high, elbows[1][k], elbows[0][k]))
             for k in range(2)]
    sheets = [(order[0][0], order[1][0]), (order[0][1], order[1][1])]
    lo = np.array([l for l, _ in geometry.limits])
    hi = np.array([h for _, h in geometry.limits])
    for k, (x2, y2) in enumerate(sheets):
        a1 = np.arctan2(y2 - y1, x2 - x1)
        a2 = np.mod(np.arctan2(y3 - y2, x3 - x2) - a1 + math.pi, _TWO_PI) - math.pi
        a3 = np.mod(beta - a1 - a2 + math.pi, _TWO_PI) - math.pi
        # keep (-pi, pi]
        a2 = np.where(a2 == -math.pi, math.pi, a2)
        a3 = np.where(a3 == -math.pi, math.pi, a3)
        sol = np.stack([a1, a2, a3], axis=-1)
        keep = ok & np.all((sol >= lo - 1e-12) & (sol <= hi + 1e-12), axis=-1)
        if k == 1:
            keep &= root > 0
        out[keep, k] = sol[keep]
    # a dropped first sheet promotes the second
    promote = np.isnan(out[:, 0, 0]) & ~np.isnan(out[:, 1, 0])
    out[promote, 0] = out[promote, 1]
    out[promote, 1] = np.nan
    return out


def build_workspace(geometry: ArmGeometry, beta: float = math.pi / 2,
                    grid: WorkspaceGrid | None = None) -> WorkspaceMap:
    """Solve every cell, then pick one solution per cell (row-major from bottom-left) for smooth neighbours."""
    grid = grid or WorkspaceGrid()
    ny, nx = grid.shape
    rows, cols = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    xe = grid.x_min + cols.ravel() * grid.resolution
    ye = grid.y_min + rows.ravel() * grid.resolution
    sheets = _ik_sheets(xe, ye, beta, geometry).reshape(ny, nx, 2, 3)
    angles = np.full((ny, nx, 3), np.nan)
    two = ~np.isnan(sheets[..., 1, 0])
    one = ~np.isnan(sheets[..., 0, 0]) & ~two
    angles[one] = sheets[one, 0]
    neighbours = ((0, -1), (-1, -1), (-1, 0), (-1, 1))
    for r, c in np.argwhere(two):  # argwhere yields row-major order
        cands = sheets[r, c]
        done = [angles[r + dr, c + dc] for dr, dc in neighbours
                if 0 <= r + dr and 0 <= c + dc < nx and not np.isnan(angles[r + dr, c + dc, 0])]
        if not done:
            angles[r, c] = cands[0]
            continue
        nb = np.array(done)
        cost = np.abs(np.mod(cands[:, None, :] - nb[None, :, :] + math.pi, _TWO_PI) - math.pi).sum(axis=(1, 2))
        angles[r, c] = cands[int(np.argmin(cost))]
    return WorkspaceMap(grid, beta, angles, sheets)


# ------------------------------------------------------------------ waypoints


class NoPathError(ValueError):
    def __init__(self, waypoint: tuple[int, int], phase: str) -> None:
        super().__init__(f"waypoint {waypoint} in phase {phase!r} is unreachable")
        self.waypoint = waypoint
        self.phase = phase


@dataclass(frozen=True)
class Waypoint:
    row: int
    col: int
    phase: str  # "start", "advance", "ascend" or "extend"


def _check(m: WorkspaceMap, cell: tuple[int, int], phase: str) -> None:
    ny, nx = m.reachable.shape
    r, c = cell
    if not (0 <= r < ny and 0 <= c < nx) or not m.reachable[r, c]:
        raise NoPathError(cell, phase)


def plan_waypoints(start: tuple[int, int], target: tuple[int, int], m: WorkspaceMap,
                   raise_offset: int = 0) -> list[Waypoint]:
    """Low advance along the bottom of the reachable region, vertical rise, then horizontal extension.

    Cells are (row, col); ``raise_offset`` is in columns, measured back from the target.
    """
    if raise_offset < 0:
        raise ValueError("raise_offset must be >= 0")
    _check(m, start, "start")
    _check(m, target, "target")
    (r0, c0), (rt, ct) = start, target
    step = 1 if ct >= c0 else -1
    c_rise = ct - step * raise_offset
    if (c_rise - c0) * step < 0:
        c_rise = c0
    path = [Waypoint(r0, c0, "start")]
    row = r0
    for c in range(c0 + step, c_rise + step, step) if c_rise != c0 else ():
        low = m.lowest_row(c)
        if low is None:
            raise NoPathError((r0, c), "advance")
        row = low
        path.append(Waypoint(row, c, "advance"))
    dr = 1 if rt >= row else -1
    for r in range(row + dr, rt + dr, dr) if rt != row else ():
        _check(m, (r, c_rise), "ascend")
        path.append(Waypoint(r, c_rise, "ascend"))
    for c in range(c_rise + step, ct + step, step) if ct != c_rise else ():
        _check(m, (rt, c), "extend")
        path.append(Waypoint(rt, c, "extend"))
    return path


def retract(path: Sequence[Waypoint], m: WorkspaceMap) -> list[Waypoint]:
    """Reverse ``path`` from its end until a waypoint on the low boundary of its column."""
    out = []
    for wp in reversed(path):
        out.append(wp)
        if len(out) > 1 and m.lowest_row(wp.col) == wp.row:
            break
    return out


# ---------------------------------------------------------------- calibration


def fit_rigid_transform(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rotation R and translation T with ``b ~ R a + T``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 3:
        raise ValueError("point sets must both be (n, 3)")
    if len(a) < 3:
        raise ValueError("need at least 3 correspondences")
    ca, cb = a.mean(axis=0), b.mean(axis=0)
    pa, pb = a - ca, b - cb
    sv = np.linalg.svd(pa, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-9 * sv[0]:
        raise ValueError("points are collinear or coincident")
    u, _, vt = np.linalg.svd(pa.T @ pb)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return rot, cb - rot @ ca


def transform_error(k: np.ndarray, c: np.ndarray, rot: np.ndarray, trans: np.ndarray) -> float:
    """Mean distance between ``k`` and the transformed ``c``."""
    k = np.asarray(k, dtype=float)
    c = np.asarray(c, dtype=float)
    if k.shape != c.shape:
        raise ValueError("point sets must have equal shapes")
    if not len(k):
        raise ValueError("no points")
    return float(np.mean(np.linalg.norm(k - (c @ np.asarray(rot).T + np.asarray(trans)), axis=1)))


# ------------------------------------------------------------- fruit scoring


def fruit_angle(calyx_x: float, image_x: float, length: float) -> float:
    """Tilt from vertical of a fruit of ``length`` whose ends appear at the two horizontal positions."""
    if not length > 0:
        raise ValueError("length must be > 0")
    ratio = (calyx_x - image_x) / length
    if abs(ratio) > 1:
        raise ValueError("offset exceeds fruit length: inconsistent detection")
    return math.asin(ratio)


COLLISION_RISK = {"fruit": 3, "rigid": 9, "none": 1}


def collision_score(classes: Iterable[str]) -> int:
    total = 0
    for c in classes:
        if c not in COLLISION_RISK:
            raise ValueError(f"unknown collision class {c!r}")
        total += COLLISION_RISK[c]
    return total
