"""Parametric pergola-orchard worlds, lidar ray casting with ground truth, and a unicycle robot.

World frame: rows run along +x from ``x = 0`` to ``x = row_length``; treeline ``k`` lies
on ``y = k * row_width``. Heights of posts, trunks, weeds and the canopy are measured
from the local ground, which is the plane ``z = slope_x * x + slope_y * y``. The lidar
sits ``mount_height`` above the ground under the robot and stays level.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from enum import IntEnum
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .scan import BirdsEyeGrid, GridSpec, LidarFrame, LidarSpec, rasterize


class Label(IntEnum):
    NONE = 0
    GROUND = 1
    CANOPY = 2
    POST = 3
    TRUNK = 4
    HEDGE = 5
    WEED = 6
    BRANCH = 7
    PEDESTRIAN = 8
    BOUNDARY = 9


STRUCTURE = (Label.POST, Label.TRUNK, Label.HEDGE, Label.PEDESTRIAN, Label.BOUNDARY)
POSTS_AND_TRUNKS = (Label.POST, Label.TRUNK)

# nominal diffuse intensities; everything stays at or below the retro-reflector band
_DIFFUSE = {
    Label.GROUND: 20, Label.CANOPY: 40, Label.POST: 60, Label.TRUNK: 50, Label.HEDGE: 45,
    Label.WEED: 30, Label.BRANCH: 35, Label.PEDESTRIAN: 55, Label.BOUNDARY: 70,
}


@dataclass(frozen=True)
class Cylinder:
    x: float
    y: float
    radius: float
    z_min: float  # world z
    z_max: float
    label: Label


@dataclass(frozen=True)
class Box:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    z_min: float
    z_max: float
    label: Label


@dataclass(frozen=True)
class Strip:
    """Retro-reflective plate: a vertical rectangle centred on (x, y) facing ``normal`` (radians)."""
    x: float
    y: float
    normal: float
    width: float
    z_min: float
    z_max: float


@dataclass(frozen=True)
class PedestrianConfig:
    x: float
    y: float
    facing: float = 0.0  # world heading of the chest, radians
    height: float = 1.75
    strip_width: float = 0.05  # 0 disables the reflective strip

    def __post_init__(self) -> None:
        if not self.height > 0:
            raise ValueError("pedestrians.height must be > 0")
        if self.strip_width < 0:
            raise ValueError("pedestrians.strip_width must be >= 0")


@dataclass(frozen=True)
class WorldConfig:
    row_count: int = 2
    row_width: float = 5.0
    row_length: float = 33.0
    post_spacing: float = 5.5
    post_radius: float = 0.05
    trunk_radius: float = 0.08
    trunks: bool = True
    canopy_height: float = 2.0
    canopy_sag: float = 0.3
    headland: float = 6.0
    hedge_ends: tuple[str, ...] = ("far",)
    hedge_height: float = 3.0
    hedge_thickness: float = 1.0
    slope_x: float = 0.0
    slope_y: float = 0.0
    weed_count: int = 0
    weed_height: tuple[float, float] = (0.1, 0.35)
    branch_count: int = 0
    branch_length: tuple[float, float] = (0.2, 0.7)
    pedestrians: tuple[PedestrianConfig, ...] = ()
    boundary_boxes: tuple[tuple[float, float, float, float, float], ...] = ()  # x0, x1, y0, y1, height
    robot_half_width: float = 1.1
    robot_length: float = 3.8
    lidar_forward: float = 0.0  # lidar ahead of the robot's kinematic centre
    range_noise: float = 0.0
    vest_dropout: float = 0.5
    edge_mixing: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        peds = tuple(p if isinstance(p, PedestrianConfig) else PedestrianConfig(**p) for p in self.pedestrians)
        object.__setattr__(self, "pedestrians", peds)
        object.__setattr__(self, "hedge_ends", tuple(self.hedge_ends))
        object.__setattr__(self, "weed_height", tuple(self.weed_height))
        object.__setattr__(self, "branch_length", tuple(self.branch_length))
        object.__setattr__(self, "boundary_boxes", tuple(tuple(b) for b in self.boundary_boxes))
        positive = ("row_width", "row_length", "post_spacing", "post_radius", "trunk_radius",
                    "canopy_height", "headland", "hedge_height", "hedge_thickness", "robot_half_width",
                    "robot_length")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.row_count < 1:
            raise ValueError("row_count must be >= 1")
        if not self.row_width > 2 * self.robot_half_width:
            raise ValueError("row_width must exceed twice robot_half_width")
        if not 0 <= self.canopy_sag < self.canopy_height:
            raise ValueError("canopy_sag must lie in [0, canopy_height)")
        if any(e not in ("near", "far") for e in self.hedge_ends):
            raise ValueError("hedge_ends entries must be 'near' or 'far'")
        for name in ("weed_height", "branch_length"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must satisfy 0 < low <= high")
        if self.weed_count < 0 or self.branch_count < 0:
            raise ValueError("clutter counts must be >= 0")
        if self.range_noise < 0:
            raise ValueError("range_noise must be >= 0")
        if not 0 <= self.vest_dropout <= 1:
            raise ValueError("vest_dropout must lie in [0, 1]")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "WorldConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown world config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path: str | Path) -> "WorldConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @property
    def block_width(self) -> float:
        return self.row_count * self.row_width


@dataclass(frozen=True, eq=False)
class OrchardWorld:
    config: WorldConfig
    cylinders: tuple[Cylinder, ...]
    boxes: tuple[Box, ...]
    strips: tuple[Strip, ...]

    def ground_z(self, x, y):
        return self.config.slope_x * np.asarray(x) + self.config.slope_y * np.asarray(y)

    def sag_profile(self, x):
        """0 at posts, 1 midway between posts."""
        return 0.5 * (1.0 - np.cos(2.0 * np.pi * np.asarray(x) / self.config.post_spacing))

    def canopy_z(self, x, y):
        c = self.config
        return self.ground_z(x, y) + c.canopy_height - c.canopy_sag * self.sag_profile(x)

    def in_block(self, x, y):
        c = self.config
        return (np.asarray(x) >= 0) & (np.asarray(x) <= c.row_length) & (np.asarray(y) >= 0) & (np.asarray(y) <= c.block_width)

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        c = self.config
        return (-c.headland, c.row_length + c.headland, -c.row_width, c.block_width + c.row_width)

    def arrays(self, kind: str) -> np.ndarray:
        """Primitive parameters as a float array, cached per world."""
        cache = self.__dict__.setdefault("_cache", {})
        if kind not in cache:
            if kind == "cyl":
                cache[kind] = np.array([[c.x, c.y, c.radius, c.z_min, c.z_max, c.label] for c in self.cylinders],
                                       dtype=float).reshape(-1, 6)
            elif kind == "box":
                cache[kind] = np.array([[b.x_min, b.x_max, b.y_min, b.y_max, b.z_min, b.z_max, b.label]
                                        for b in self.boxes], dtype=float).reshape(-1, 7)
            else:
                cache[kind] = np.array([[s.x, s.y, s.normal, s.width, s.z_min, s.z_max] for s in self.strips],
                                       dtype=float).reshape(-1, 6)
        return cache[kind]

    def posts(self) -> np.ndarray:
        return np.array([[c.x, c.y] for c in self.cylinders if c.label == Label.POST]).reshape(-1, 2)

    def treeline_y(self) -> np.ndarray:
        return np.arange(self.config.row_count + 1) * self.config.row_width

    def row_index(self, y: float) -> int:
        return int(np.clip(math.floor(y / self.config.row_width), 0, self.config.row_count - 1))


def build_world(config: WorldConfig | dict | None = None) -> OrchardWorld:
    """Deterministically lay out structure and clutter from ``config`` (clutter uses ``config.seed``)."""
    if config is None:
        config = WorldConfig()
    elif isinstance(config, dict):
        config = WorldConfig.from_dict(config)
    c = config
    rng = np.random.default_rng(c.seed)
    ground = lambda x, y: c.slope_x * x + c.slope_y * y  # noqa: E731
    cyl: list[Cylinder] = []
    n_bays = int(math.floor(c.row_length / c.post_spacing + 1e-9))
    post_x = np.arange(n_bays + 1) * c.post_spacing
    for k in range(c.row_count + 1):
        y = k * c.row_width
        for x in post_x:
            g = ground(x, y)
            cyl.append(Cylinder(float(x), float(y), c.post_radius, g, g + c.canopy_height, Label.POST))
        if c.trunks:
            for x in post_x[:-1] + c.post_spacing / 2:
                g = ground(x, y)
                top = g + c.canopy_height - c.canopy_sag * 0.5 * (1 - math.cos(2 * math.pi * x / c.post_spacing))
                cyl.append(Cylinder(float(x), float(y), c.trunk_radius, g, top, Label.TRUNK))

    for _ in range(c.weed_count):
        x = rng.uniform(0, c.row_length)
        y = rng.uniform(0, c.block_width)
        h = rng.uniform(*c.weed_height)
        r = rng.uniform(0.04, 0.12)
        g = ground(x, y)
        cyl.append(Cylinder(float(x), float(y), float(r), g, g + h, Label.WEED))

    for _ in range(c.branch_count):
        x = rng.uniform(0, c.row_length)
        y = rng.uniform(0, c.block_width)
        length = rng.uniform(*c.branch_length)
        r = rng.uniform(0.02, 0.05)
        top = ground(x, y) + c.canopy_height - c.canopy_sag * 0.5 * (1 - math.cos(2 * math.pi * x / c.post_spacing))
        cyl.append(Cylinder(float(x), float(y), float(r), top - length, top, Label.BRANCH))

    strips: list[Strip] = []
    for p in c.pedestrians:
        g = ground(p.x, p.y)
        knee = 0.5 * p.height
        cyl.append(Cylinder(p.x, p.y, 0.15, g, g + knee, Label.PEDESTRIAN))
        cyl.append(Cylinder(p.x, p.y, 0.22, g + knee, g + p.height, Label.PEDESTRIAN))
        if p.strip_width > 0:
            off = 0.22 + 0.005
            strips.append(Strip(p.x + off * math.cos(p.facing), p.y + off * math.sin(p.facing), p.facing,
                                p.strip_width, g + 0.55 * p.height, g + 0.88 * p.height))

    boxes: list[Box] = []
    y0, y1 = -c.row_width, c.block_width + c.row_width
    for end in c.hedge_ends:
        if end == "far":
            x0 = c.row_length + c.headland
            xs = (x0, x0 + c.hedge_thickness)
        else:
            x0 = -c.headland
            xs = (x0 - c.hedge_thickness, x0)
        zmin = min(ground(x, y) for x in xs for y in (y0, y1)) - 1.0
        zmax = max(ground(x, y) for x in xs for y in (y0, y1)) + c.hedge_height
        boxes.append(Box(xs[0], xs[1], y0, y1, zmin, zmax, Label.HEDGE))
    for bx0, bx1, by0, by1, h in c.boundary_boxes:
        g = min(ground(x, y) for x in (bx0, bx1) for y in (by0, by1))
        boxes.append(Box(bx0, bx1, by0, by1, g - 1.0, g + h, Label.BOUNDARY))
    return OrchardWorld(c, tuple(cyl), tuple(boxes), tuple(strips))


@dataclass(frozen=True)
class RobotState:
    x: float = 0.0
    y: float = 0.0
    heading: float = 0.0
    odometer: float = 0.0
    v: float = 0.0
    omega: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "heading", wrap_angle(self.heading))


def wrap_angle(a: float) -> float:
    """Normalise to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2 * math.pi)
    if a <= 0:
        a += 2 * math.pi
    return a - math.pi


def step_robot(state: RobotState, v: float, omega: float, dt: float) -> RobotState:
    """Exact unicycle integration over ``dt``."""
    if not dt > 0:
        raise ValueError("dt must be > 0")
    th = state.heading
    if abs(omega) < 1e-12:
        x = state.x + v * dt * math.cos(th)
        y = state.y + v * dt * math.sin(th)
    else:
        x = state.x + v / omega * (math.sin(th + omega * dt) - math.sin(th))
        y = state.y - v / omega * (math.cos(th + omega * dt) - math.cos(th))
    return RobotState(x, y, th + omega * dt, state.odometer + abs(v) * dt, v, omega)


@dataclass(frozen=True, eq=False)
class GroundTruthLabels:
    classes: np.ndarray  # per cell Label, NONE where no return
    primitive: np.ndarray  # per cell primitive index within its kind, -1 where none
    o_l: float
    o_a: float
    row: int

    def mask(self, frame: LidarFrame, labels: Iterable[Label] = STRUCTURE, grid: GridSpec | None = None) -> BirdsEyeGrid:
        sel = np.isin(self.classes, np.array(list(labels), dtype=int)) & frame.valid
        g = rasterize(frame.xyz()[sel], grid)
        return BirdsEyeGrid(g.spec, (g.cells > 0).astype(float))

    def structure_mask(self, frame: LidarFrame, grid: GridSpec | None = None) -> BirdsEyeGrid:
        return self.mask(frame, STRUCTURE, grid)

    def posts_trunks_mask(self, frame: LidarFrame, grid: GridSpec | None = None) -> BirdsEyeGrid:
        return self.mask(frame, POSTS_AND_TRUNKS, grid)


# ---------------------------------------------------------------- ray casting

_EPS = 1e-9


def _cylinder_hits(o: np.ndarray, d: np.ndarray, cyl: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Entry distance of rays ``o + t d`` into capped vertical cylinders (row-aligned pairs).

    Returns (t, lateral) where ``t`` is NaN on a miss and ``lateral`` is the horizontal
    distance of the ray line from the axis (NaN for cap-only hits).
    """
    ox, oy, oz = o[:, 0] - cyl[:, 0], o[:, 1] - cyl[:, 1], o[:, 2]
    dx, dy, dz = d[:, 0], d[:, 1], d[:, 2]
    r, z0, z1 = cyl[:, 2], cyl[:, 3], cyl[:, 4]
    a = dx * dx + dy * dy
    b = 2 * (ox * dx + oy * dy)
    c = ox * ox + oy * oy - r * r
    disc = b * b - 4 * a * c
    t = np.full(len(o), np.nan)
    lateral = np.full(len(o), np.nan)
    ok = (disc >= 0) & (a > _EPS)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t_side = np.where(ok, (-b - sq) / np.where(a > _EPS, 2 * a, 1.0), np.nan)
    zs = oz + t_side * dz
    side = ok & (t_side > _EPS) & (zs >= z0) & (zs <= z1)
    t[side] = t_side[side]
    ha = np.sqrt(np.where(a > _EPS, a, 1.0))
    lateral[side] = (np.abs(ox * dy - oy * dx) / ha)[side]
    for zc in (z0, z1):
        with np.errstate(divide="ignore", invalid="ignore"):
            tc = (zc - oz) / dz
        px, py = ox + tc * dx, oy + tc * dy
        cap = np.isfinite(tc) & (tc > _EPS) & (px * px + py * py <= r * r) & ~(t <= tc)
        t[cap] = tc[cap]
        lateral[cap] = np.nan
    return t, lateral


def _box_hits(o: np.ndarray, d: np.ndarray, box: np.ndarray) -> np.ndarray:
    """Slab-test entry distance for every ray against one box (NaN on miss or when inside)."""
    t_near = np.full(len(d), -np.inf)
    t_far = np.full(len(d), np.inf)
    for axis in range(3):
        lo, hi = box[2 * axis], box[2 * axis + 1]
        da = d[:, axis]
        par = np.abs(da) < _EPS
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - o[axis]) / da
            t2 = (hi - o[axis]) / da
        tmin = np.where(par, np.where((o[axis] >= lo) & (o[axis] <= hi), -np.inf, np.inf), np.minimum(t1, t2))
        tmax = np.where(par, np.where((o[axis] >= lo) & (o[axis] <= hi), np.inf, -np.inf), np.maximum(t1, t2))
        t_near = np.maximum(t_near, tmin)
        t_far = np.minimum(t_far, tmax)
    hit = (t_near <= t_far) & (t_near > _EPS)
    return np.where(hit, t_near, np.nan)


def _strip_hits(o: np.ndarray, d: np.ndarray, s: np.ndarray) -> np.ndarray:
    nx, ny = math.cos(s[2]), math.sin(s[2])
    denom = d[:, 0] * nx + d[:, 1] * ny
    with np.errstate(divide="ignore", invalid="ignore"):
        t = ((s[0] - o[0]) * nx + (s[1] - o[1]) * ny) / denom
    px, py, pz = o[0] + t * d[:, 0], o[1] + t * d[:, 1], o[2] + t * d[:, 2]
    u = (px - s[0]) * -ny + (py - s[1]) * nx
    hit = (denom < -_EPS) & (t > _EPS) & (np.abs(u) <= s[3] / 2) & (pz >= s[4]) & (pz <= s[5])
    return np.where(hit, t, np.nan)


def _canopy_hits(world: OrchardWorld, o: np.ndarray, d: np.ndarray, n_samples: int = 32,
                 n_bisect: int = 20) -> np.ndarray:
    """First crossing of rays (from below) with the sagging canopy surface inside the block."""
    c = world.config
    t = np.full(len(d), np.nan)
    h0 = o[2] - float(world.ground_z(o[0], o[1]))
    c0 = h0 - c.canopy_height
    if c0 >= 0:
        return t
    k = d[:, 2] - c.slope_x * d[:, 0] - c.slope_y * d[:, 1]
    up = np.nonzero(k > _EPS)[0]
    if not len(up):
        return t
    t_hi = -c0 / k[up]
    t_lo = np.maximum(0.0, (-c0 - c.canopy_sag) / k[up])
    # drop rays whose whole search interval lies beside the block
    xa, xb = o[0] + d[up, 0] * t_lo, o[0] + d[up, 0] * t_hi
    ya, yb = o[1] + d[up, 1] * t_lo, o[1] + d[up, 1] * t_hi
    near = ((np.maximum(xa, xb) >= 0) & (np.minimum(xa, xb) <= c.row_length)
            & (np.maximum(ya, yb) >= 0) & (np.minimum(ya, yb) <= c.block_width))
    up, t_hi, t_lo = up[near], t_hi[near], t_lo[near]
    if not len(up):
        return t
    ku, dx = k[up], d[up, 0]
    if c.canopy_sag == 0:
        root = t_hi
    else:
        f = lambda tt: c0 + ku[:, None] * tt + c.canopy_sag * world.sag_profile(o[0] + dx[:, None] * tt)  # noqa: E731
        grid = t_lo[:, None] + (t_hi - t_lo)[:, None] * np.linspace(0, 1, n_samples)[None, :]
        fv = f(grid)
        crossed = fv >= 0
        crossed[:, -1] = True  # the surface never rises above the interval's top (rounding aside)
        first = np.argmax(crossed, axis=1)
        hi = grid[np.arange(len(up)), first]
        lo = grid[np.arange(len(up)), np.maximum(first - 1, 0)]
        lo = np.where(first == 0, hi, lo)
        for _ in range(n_bisect):
            mid = 0.5 * (lo + hi)
            above = f(mid[:, None])[:, 0] >= 0
            hi = np.where(above, mid, hi)
            lo = np.where(above, lo, mid)
        f_lo, f_hi = f(lo[:, None])[:, 0], f(hi[:, None])[:, 0]
        span = f_hi - f_lo
        root = np.where(span > 0, lo - f_lo * (hi - lo) / np.where(span > 0, span, 1.0), hi)
    px, py = o[0] + root * d[up, 0], o[1] + root * d[up, 1]
    inside = world.in_block(px, py)
    t[up[inside]] = root[inside]
    return t


def _ground_hits(world: OrchardWorld, o: np.ndarray, d: np.ndarray) -> np.ndarray:
    c = world.config
    h0 = o[2] - float(world.ground_z(o[0], o[1]))
    k = d[:, 2] - c.slope_x * d[:, 0] - c.slope_y * d[:, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -h0 / k
    return np.where((k < -_EPS) & (t > _EPS), t, np.nan)


@dataclass
class _Hits:
    ray: list
    t: list
    label: list
    prim: list
    strip: list

    def add(self, ray, t, label, prim, strip=False) -> None:
        ok = np.isfinite(t)
        n = int(ok.sum())
        if n:
            self.ray.append(np.asarray(ray)[ok])
            self.t.append(np.asarray(t)[ok])
            self.label.append(np.broadcast_to(np.asarray(label), ok.shape)[ok].astype(int))
            self.prim.append(np.broadcast_to(np.asarray(prim), ok.shape)[ok].astype(int))
            self.strip.append(np.full(n, strip))


def _cast_rays(world: OrchardWorld, origin: np.ndarray, dirs: np.ndarray, max_range: float,
               rng: np.random.Generator, cyl_pairs: tuple[np.ndarray, np.ndarray] | None = None,
               footprint: float = 0.0) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Nearest hit per ray: (t or 0, label, primitive index, strip flag)."""
    n = len(dirs)
    all_rays = np.arange(n)
    hits = _Hits([], [], [], [], [])
    hits.add(all_rays, _ground_hits(world, origin, dirs), Label.GROUND, -1)
    hits.add(all_rays, _canopy_hits(world, origin, dirs), Label.CANOPY, -1)
    cyl = world.arrays("cyl")
    if len(cyl):
        if cyl_pairs is None:
            ri, ci = _brute_cylinder_pairs(origin, dirs, cyl, max_range)
        else:
            ri, ci = cyl_pairs
        if len(ri):
            t, lateral = _cylinder_hits(np.broadcast_to(origin, (len(ri), 3)), dirs[ri], cyl[ci])
            if footprint > 0:
                # a beam grazing a thin object's edge returns from behind with probability
                # equal to the part of its footprint the object does not cover
                hw = footprint * t * np.hypot(dirs[ri, 0], dirs[ri, 1])
                r = cyl[ci, 2]
                cover = (np.minimum(lateral + hw, r) - np.maximum(lateral - hw, -r)) / np.where(hw > 0, 2 * hw, 1)
                draw = rng.random(len(ri))
                lose = np.isfinite(lateral) & (hw > 0) & (draw > np.clip(cover, 0, 1))
                t = np.where(lose, np.nan, t)
            hits.add(ri, t, cyl[ci, 5], ci)
    for bi, box in enumerate(world.arrays("box")):
        hits.add(all_rays, _box_hits(origin, dirs, box), box[6], bi)
    for si, s in enumerate(world.arrays("strip")):
        hits.add(all_rays, _strip_hits(origin, dirs, s), Label.PEDESTRIAN, si, strip=True)

    out_t = np.zeros(n)
    out_label = np.zeros(n, dtype=int)
    out_prim = np.full(n, -1)
    out_strip = np.zeros(n, dtype=bool)
    if hits.ray:
        ray = np.concatenate(hits.ray)
        t = np.concatenate(hits.t)
        keep = t <= max_range
        ray, t = ray[keep], t[keep]
        label = np.concatenate(hits.label)[keep]
        prim = np.concatenate(hits.prim)[keep]
        strip = np.concatenate(hits.strip)[keep]
        order = np.lexsort((t, ray))
        ray, t, label, prim, strip = ray[order], t[order], label[order], prim[order], strip[order]
        first = np.ones(len(ray), dtype=bool)
        first[1:] = ray[1:] != ray[:-1]
        r = ray[first]
        out_t[r], out_label[r], out_prim[r], out_strip[r] = t[first], label[first], prim[first], strip[first]
    return out_t, out_label, out_prim, out_strip


def _brute_cylinder_pairs(origin, dirs, cyl, max_range):
    """All (ray, cylinder) pairs whose horizontal line passes within the cylinder radius."""
    rel = cyl[:, :2] - origin[:2]
    dist = np.hypot(rel[:, 0], rel[:, 1])
    near = np.nonzero(dist - cyl[:, 2] <= max_range)[0]
    if not len(near):
        return np.zeros(0, int), np.zeros(0, int)
    dh = dirs[:, :2]
    norm = np.hypot(dh[:, 0], dh[:, 1])
    u = dh / np.where(norm > _EPS, norm, 1.0)[:, None]
    along = u @ rel[near].T
    perp = np.abs(u[:, 0:1] * rel[near, 1][None, :] - u[:, 1:2] * rel[near, 0][None, :])
    inside = dist[near] <= cyl[near, 2]
    cand = ((perp <= cyl[near, 2][None, :]) & (along > -cyl[near, 2][None, :])) | inside[None, :]
    cand |= (norm <= _EPS)[:, None]
    ri, cj = np.nonzero(cand)
    return ri, near[cj]


def _column_cylinder_pairs(origin, heading, spec: LidarSpec, cyl) -> tuple[np.ndarray, np.ndarray]:
    """(ray, cylinder) pairs restricted to the azimuth columns each cylinder can subtend."""
    rel = cyl[:, :2] - origin[:2]
    dist = np.hypot(rel[:, 0], rel[:, 1])
    step = spec.azimuth_step
    bearing = (np.degrees(np.arctan2(rel[:, 1], rel[:, 0]) - heading)) % 360.0
    half = np.degrees(np.arcsin(np.clip(cyl[:, 2] / np.maximum(dist, _EPS), 0, 1))) + 1e-6
    ok = (dist > cyl[:, 2]) & (dist - cyl[:, 2] <= spec.max_range)
    idx = np.nonzero(ok)[0]
    lo = np.ceil((bearing[idx] - half[idx]) / step).astype(int)
    hi = np.floor((bearing[idx] + half[idx]) / step).astype(int)
    counts = np.maximum(hi - lo + 1, 0)
    cyl_rep = np.repeat(idx, counts)
    col = np.repeat(lo, counts) + (np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts))
    col %= spec.n_azimuths
    # sensor inside a cylinder: every column is a candidate
    inside = np.nonzero(dist <= cyl[:, 2])[0]
    if len(inside):
        cyl_rep = np.concatenate([cyl_rep, np.repeat(inside, spec.n_azimuths)])
        col = np.concatenate([col, np.tile(np.arange(spec.n_azimuths), len(inside))])
    planes = np.arange(spec.n_planes)
    ray = (planes[None, :] * spec.n_azimuths + col[:, None]).ravel()
    return ray, np.repeat(cyl_rep, spec.n_planes)


def sensor_origin(world: OrchardWorld, robot: RobotState, height: float) -> np.ndarray:
    return np.array([robot.x, robot.y, float(world.ground_z(robot.x, robot.y)) + height])


def _intensities(labels: np.ndarray, strip: np.ndarray, valid: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    base = np.zeros(labels.shape)
    for lab, val in _DIFFUSE.items():
        base[labels == lab] = val
    jitter = rng.integers(-10, 11, size=labels.shape)
    inten = np.where(valid, np.clip(base + jitter, 1, 100), 0.0)
    retro = rng.integers(150, 256, size=labels.shape)
    return np.where(strip, retro, inten).astype(float)


def cast_scan(world: OrchardWorld, robot: RobotState, spec: LidarSpec | None = None,
              seed: int = 0) -> tuple[LidarFrame, GroundTruthLabels]:
    """Ray-cast one revolution from the robot pose; returns the frame and per-cell labels."""
    spec = spec or LidarSpec()
    rng = np.random.default_rng([world.config.seed, seed])
    robot = lidar_pose(world, robot)
    origin = sensor_origin(world, robot, spec.mount_height)
    alpha, theta = spec.angles_rad()
    az = theta + robot.heading
    ca = np.cos(alpha)[:, None]
    dirs = np.stack([ca * np.cos(az)[None, :], ca * np.sin(az)[None, :],
                     np.broadcast_to(np.sin(alpha)[:, None], (spec.n_planes, spec.n_azimuths))], axis=-1).reshape(-1, 3)
    cyl = world.arrays("cyl")
    pairs = _column_cylinder_pairs(origin, robot.heading, spec, cyl) if len(cyl) else None
    footprint = math.tan(math.radians(spec.azimuth_step) / 2) if world.config.edge_mixing else 0.0
    t, label, prim, strip = _cast_rays(world, origin, dirs, spec.max_range, rng, pairs, footprint)
    shape = (spec.n_planes, spec.n_azimuths)
    t, label, prim, strip = t.reshape(shape), label.reshape(shape), prim.reshape(shape), strip.reshape(shape)
    valid = t > 0
    inten = _intensities(label, strip, valid, rng)
    if world.config.range_noise > 0:
        noisy = t + rng.normal(0.0, world.config.range_noise, size=shape)
        t = np.where(valid, np.clip(noisy, 1e-3, spec.max_range), 0.0)
    dropped = strip & (rng.random(shape) < world.config.vest_dropout)
    t = np.where(dropped, 0.0, t)
    o_l, o_a, row = true_offsets(world, robot)
    frame = LidarFrame(spec, t, inten)
    return frame, GroundTruthLabels(np.where(valid, label, 0), np.where(valid, prim, -1), o_l, o_a, row)


def lidar_pose(world: OrchardWorld, robot: RobotState) -> RobotState:
    f = world.config.lidar_forward
    if f == 0:
        return robot
    return replace(robot, x=robot.x + f * math.cos(robot.heading), y=robot.y + f * math.sin(robot.heading))


def true_offsets(world: OrchardWorld, robot: RobotState) -> tuple[float, float, int]:
    """(linear, angular, row index) of the lidar relative to the centreline of its current row.

    ``robot`` is the lidar pose (see :func:`lidar_pose`).
    """
    row = world.row_index(robot.y)
    yc = (row + 0.5) * world.config.row_width
    o_a = math.atan(math.tan(-robot.heading)) if abs(math.cos(robot.heading)) > 1e-12 else math.pi / 2
    # any point of the centreline projected on the normal of its lidar-frame direction
    dx, dy = 0.0, yc - robot.y
    ch, sh = math.cos(robot.heading), math.sin(robot.heading)
    px, py = ch * dx + sh * dy, -sh * dx + ch * dy
    o_l = -math.sin(o_a) * px + math.cos(o_a) * py
    return o_l, o_a, row


def treeline_points_lidar(world: OrchardWorld, robot: RobotState, span: float = 10.0) -> list[tuple[tuple[float, float], tuple[float, float]]]:
    """Two lidar-frame points on each treeline bounding the robot's current row."""
    row = world.row_index(robot.y)
    out = []
    ch, sh = math.cos(robot.heading), math.sin(robot.heading)
    for k in (row, row + 1):
        y = k * world.config.row_width
        pts = []
        for x in (robot.x - span, robot.x + span):
            dx, dy = x - robot.x, y - robot.y
            pts.append((ch * dx + sh * dy, -sh * dx + ch * dy))
        out.append((pts[0], pts[1]))
    return out


@dataclass(frozen=True, eq=False)
class VerticalScan:
    y: np.ndarray
    z: np.ndarray
    labels: np.ndarray

    @property
    def points(self) -> np.ndarray:
        return np.column_stack([self.y, self.z])

    def __len__(self) -> int:
        return len(self.y)


def cast_vertical_scan(world: OrchardWorld, robot: RobotState, height: float = 1.0, fov_deg: float = 270.0,
                       resolution_deg: float = 0.25, max_range: float = 30.0, seed: int = 0) -> VerticalScan:
    """Planar scan in the vertical plane through the sensor, transverse to travel.

    Points are (y, z): y to the robot's left, z above the ground directly below the sensor.
    """
    n = int(round(fov_deg / resolution_deg)) + 1
    beam = np.radians(np.linspace(-fov_deg / 2, fov_deg / 2, n))  # 0 = straight up
    left = np.array([-math.sin(robot.heading), math.cos(robot.heading), 0.0])
    dirs = np.sin(beam)[:, None] * left[None, :] + np.cos(beam)[:, None] * np.array([0.0, 0.0, 1.0])[None, :]
    origin = sensor_origin(world, robot, height)
    rng = np.random.default_rng([world.config.seed, seed, 7])
    t, label, _, _ = _cast_rays(world, origin, dirs, max_range, rng)
    ok = t > 0
    if world.config.range_noise > 0:
        t = np.where(ok, t + rng.normal(0, world.config.range_noise, size=t.shape), 0.0)
    y = t * np.sin(beam)
    z = height + t * np.cos(beam)
    return VerticalScan(y[ok], z[ok], label[ok])


def footprint_clearance(world: OrchardWorld, robot: RobotState, labels: Iterable[Label] = (Label.POST,)) -> float:
    """Smallest gap between the robot's rectangular footprint and the surface of any matching cylinder.

    Negative values mean overlap; ``inf`` when no such cylinder exists.
    """
    cyl = world.arrays("cyl")
    sel = np.isin(cyl[:, 5], np.array([int(l) for l in labels])) if len(cyl) else np.zeros(0, bool)
    if not sel.any():
        return math.inf
    c = cyl[sel]
    dx, dy = c[:, 0] - robot.x, c[:, 1] - robot.y
    ch, sh = math.cos(robot.heading), math.sin(robot.heading)
    lx, ly = ch * dx + sh * dy, -sh * dx + ch * dy
    half_l, half_w = world.config.robot_length / 2, world.config.robot_half_width
    ox = np.maximum(np.abs(lx) - half_l, 0.0)
    oy = np.maximum(np.abs(ly) - half_w, 0.0)
    outside = np.hypot(ox, oy)
    inside = np.minimum(half_l - np.abs(lx), half_w - np.abs(ly))
    d = np.where((ox > 0) | (oy > 0), outside, -inside)
    return float(np.min(d - c[:, 2]))
