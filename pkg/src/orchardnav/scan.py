"""Lidar range-image data model, coordinate conversions and raster channel transforms.

A frame is a ``planes x azimuths`` range image. Plane 0 is the highest (most
upward) laser; azimuth column ``j`` fires at ``j * azimuth_step`` degrees,
counter-clockwise from the sensor's forward ``x`` axis. Range 0 means no return.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

RETRO_INTENSITY = 100  # intensities strictly above this are reserved for retro-reflectors
P_MAX = 255


def _default_plane_angles() -> tuple[float, ...]:
    return tuple(float(a) for a in range(15, -16, -2))


@dataclass(frozen=True)
class LidarSpec:
    n_planes: int = 16
    plane_angles: tuple[float, ...] = field(default_factory=_default_plane_angles)
    n_azimuths: int = 900
    mount_height: float = 0.8
    max_range: float = 100.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "plane_angles", tuple(float(a) for a in self.plane_angles))
        if self.n_planes < 1:
            raise ValueError("n_planes must be >= 1")
        if len(self.plane_angles) != self.n_planes:
            raise ValueError("plane_angles length must equal n_planes")
        if any(b >= a for a, b in zip(self.plane_angles, self.plane_angles[1:])):
            raise ValueError("plane_angles must be strictly decreasing")
        if self.n_azimuths < 1:
            raise ValueError("n_azimuths must be >= 1")
        if not self.mount_height > 0:
            raise ValueError("mount_height must be > 0")
        if not self.max_range > 0:
            raise ValueError("max_range must be > 0")

    @property
    def azimuth_step(self) -> float:
        return 360.0 / self.n_azimuths

    @property
    def plane_step(self) -> float:
        """Mean spacing between adjacent planes in degrees (1 plane -> 0)."""
        if self.n_planes < 2:
            return 0.0
        return (self.plane_angles[0] - self.plane_angles[-1]) / (self.n_planes - 1)

    def azimuths(self) -> np.ndarray:
        return np.arange(self.n_azimuths) * self.azimuth_step

    def angles_rad(self) -> tuple[np.ndarray, np.ndarray]:
        """(plane angles, azimuth angles) in radians."""
        return np.radians(np.asarray(self.plane_angles)), np.radians(self.azimuths())


@dataclass(frozen=True, eq=False)
class LidarFrame:
    spec: LidarSpec
    range: np.ndarray
    intensity: np.ndarray

    def __post_init__(self) -> None:
        shape = (self.spec.n_planes, self.spec.n_azimuths)
        rng = np.asarray(self.range, dtype=float)
        inten = np.asarray(self.intensity, dtype=float)
        if rng.shape != shape or inten.shape != shape:
            raise ValueError(f"frame matrices must have shape {shape}")
        if not np.all(np.isfinite(rng)) or np.any(rng < 0) or np.any(rng > self.spec.max_range):
            raise ValueError("range values must lie in {0} U (0, max_range]")
        if np.any(inten < 0) or np.any(inten > P_MAX) or not np.all(np.isfinite(inten)):
            raise ValueError("intensity values must lie in [0, 255]")
        rng.setflags(write=False)
        inten.setflags(write=False)
        object.__setattr__(self, "range", rng)
        object.__setattr__(self, "intensity", inten)

    @classmethod
    def empty(cls, spec: LidarSpec) -> "LidarFrame":
        shape = (spec.n_planes, spec.n_azimuths)
        return cls(spec, np.zeros(shape), np.zeros(shape))

    def with_range(self, rng: np.ndarray) -> "LidarFrame":
        return LidarFrame(self.spec, rng, self.intensity)

    @property
    def valid(self) -> np.ndarray:
        return self.range > 0

    def xyz(self) -> np.ndarray:
        """Cartesian coordinates of every cell, shape (planes, azimuths, 3); no-return cells are 0."""
        alpha, theta = self.spec.angles_rad()
        r = self.range
        ca = np.cos(alpha)[:, None]
        x = r * ca * np.cos(theta)[None, :]
        y = r * ca * np.sin(theta)[None, :]
        z = r * np.sin(alpha)[:, None]
        return np.stack([x, y, z], axis=-1)

    def points(self) -> np.ndarray:
        """(N, 3) array of returned points in row-major (plane, azimuth) order."""
        return self.xyz()[self.valid]

    def equals(self, other: "LidarFrame") -> bool:
        return (
            self.spec == other.spec
            and np.array_equal(self.range, other.range)
            and np.array_equal(self.intensity, other.intensity)
        )


class Point3(NamedTuple):
    x: float
    y: float
    z: float


def polar_to_cartesian(plane_angle: float, azimuth: float, rng: float) -> Point3 | None:
    """Project one return; ``None`` marks a no-return (range 0)."""
    if not all(math.isfinite(v) for v in (plane_angle, azimuth, rng)):
        raise ValueError("non-finite input")
    if rng < 0:
        raise ValueError("range must be >= 0")
    if rng == 0:
        return None
    a = math.radians(plane_angle)
    t = math.radians(azimuth)
    return Point3(rng * math.cos(a) * math.cos(t), rng * math.cos(a) * math.sin(t), rng * math.sin(a))


def cartesian_to_polar(x: float, y: float, z: float) -> tuple[float, float, float]:
    """Inverse projection: (plane angle deg, azimuth deg in [0, 360), range)."""
    r = math.sqrt(x * x + y * y + z * z)
    if r == 0:
        return 0.0, 0.0, 0.0
    a = math.degrees(math.asin(max(-1.0, min(1.0, z / r))))
    t = math.degrees(math.atan2(y, x)) % 360.0
    return a, t, r


@dataclass(frozen=True)
class GridSpec:
    side_px: int = 1000
    metres_per_px: float = 0.1

    def __post_init__(self) -> None:
        if self.side_px < 1 or self.side_px % 2:
            raise ValueError("side_px must be a positive even number")
        if not self.metres_per_px > 0:
            raise ValueError("metres_per_px must be > 0")

    @property
    def width_m(self) -> float:
        return self.side_px * self.metres_per_px

    @property
    def origin(self) -> int:
        return self.side_px // 2

    def cell_index(self, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(row, col, inside) for points; column follows x, row follows y."""
        xy = np.atleast_2d(np.asarray(xy, dtype=float))[:, :2]
        col = np.floor(xy[:, 0] / self.metres_per_px).astype(np.int64) + self.origin
        row = np.floor(xy[:, 1] / self.metres_per_px).astype(np.int64) + self.origin
        inside = (col >= 0) & (col < self.side_px) & (row >= 0) & (row < self.side_px)
        return row, col, inside

    def cell_centres(self) -> tuple[np.ndarray, np.ndarray]:
        """Metric (x, y) of every cell centre as two (side, side) arrays indexed [row, col]."""
        c = (np.arange(self.side_px) - self.origin + 0.5) * self.metres_per_px
        xs, ys = np.meshgrid(c, c)
        return xs, ys


@dataclass(frozen=True, eq=False)
class BirdsEyeGrid:
    spec: GridSpec
    cells: np.ndarray

    def __post_init__(self) -> None:
        cells = np.asarray(self.cells, dtype=float)
        if cells.shape != (self.spec.side_px, self.spec.side_px):
            raise ValueError("cells must be side_px x side_px")
        if np.any(cells < 0):
            raise ValueError("cells must be non-negative")
        object.__setattr__(self, "cells", cells)

    @classmethod
    def zeros(cls, spec: GridSpec | None = None) -> "BirdsEyeGrid":
        spec = spec or GridSpec()
        return cls(spec, np.zeros((spec.side_px, spec.side_px)))

    def mask(self) -> np.ndarray:
        return self.cells > 0


def rasterize(points: np.ndarray | Sequence[Sequence[float]], grid: GridSpec | None = None,
              increment: float = 1.0) -> BirdsEyeGrid:
    """Accumulate ``increment`` into the cell under each point; points off the grid are dropped."""
    grid = grid or GridSpec()
    cells = np.zeros((grid.side_px, grid.side_px))
    pts = np.asarray(points, dtype=float)
    if pts.size:
        pts = pts.reshape(len(pts), -1)
        row, col, inside = grid.cell_index(pts[:, :2])
        np.add.at(cells, (row[inside], col[inside]), increment)
    return BirdsEyeGrid(grid, cells)


def _round_half_up(values: np.ndarray) -> np.ndarray:
    return np.floor(np.asarray(values, dtype=float) + 0.5)


def scale_channel(values: np.ndarray, bias: float, p_max: float = P_MAX) -> np.ndarray:
    """Stretch the non-zero pixels linearly onto ``[bias, p_max]``; zeros stay zero."""
    v = np.asarray(values, dtype=float)
    out = np.zeros_like(v)
    nz = v != 0
    if not nz.any():
        return v.copy()
    lo, hi = v[nz].min(), v[nz].max()
    if hi == lo:
        out[nz] = p_max
        return out
    out[nz] = _round_half_up(bias + (p_max - bias) * (v[nz] - lo) / (hi - lo))
    return out


def enhance_contrast(values: np.ndarray, offset: float, p_max: float = P_MAX,
                     rounded: bool = True) -> np.ndarray:
    """Remap ``[offset, p_max]`` onto ``[0, p_max]`` and clamp."""
    if not 0 <= offset < p_max:
        raise ValueError("offset must satisfy 0 <= offset < p_max")
    v = np.asarray(values, dtype=float)
    out = np.clip(p_max * (v - offset) / (p_max - offset), 0.0, p_max)
    return _round_half_up(out) if rounded else out
