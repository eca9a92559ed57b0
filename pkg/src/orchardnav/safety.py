"""Pedestrian-safety detectors on lidar range images.

Retro-reflective vest detection with deceleration/stop zones, range-difference
segmentation, and two closed-form coverage helpers.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .scan import RETRO_INTENSITY, LidarFrame, Point3
from .volume import VolumeOfInterest, object_in_volume

__all__ = [
    "VestDetection", "VestParams", "detect_vests", "SafetyMonitor", "guaranteed_detection_range",
    "fill_reflector_ranges", "SegmentedObject", "segment_by_range", "missed_object_width", "object_in_volume",
    "VolumeOfInterest", "reflector_mask",
]

_EIGHT = np.ones((3, 3), dtype=bool)


def reflector_mask(frame: LidarFrame) -> np.ndarray:
    return frame.intensity > RETRO_INTENSITY


def _wrap_pad(a: np.ndarray, k: int) -> np.ndarray:
    """Pad ``k`` columns on each side by wrapping azimuth; planes are not wrapped."""
    return np.concatenate([a[:, -k:], a, a[:, :k]], axis=1) if k else a


def _components(mask: np.ndarray) -> list[np.ndarray]:
    """8-connected components with azimuth wrap; each as an (n, 2) array of (plane, azimuth)."""
    labels, n = ndimage.label(mask, structure=_EIGHT)
    if n == 0:
        return []
    # join components touching across the 0/360 seam
    parent = list(range(n + 1))

    def root(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    first, last = labels[:, 0], labels[:, -1]
    for p in range(mask.shape[0]):
        if not first[p]:
            continue
        for q in (p - 1, p, p + 1):
            if 0 <= q < mask.shape[0] and last[q]:
                a, b = root(first[p]), root(last[q])
                if a != b:
                    parent[max(a, b)] = min(a, b)
    roots = np.array([root(i) for i in range(n + 1)])
    merged = roots[labels]
    return [np.argwhere(merged == r) for r in np.unique(merged[mask])]


@dataclass(frozen=True)
class VestParams:
    dilation_iterations: int = 2
    low_percentile: float = 25.0
    high_percentile: float = 75.0
    representative_percentile: float = 50.0

    def __post_init__(self) -> None:
        if self.dilation_iterations < 0:
            raise ValueError("dilation_iterations must be >= 0")
        if not 0 <= self.low_percentile <= self.representative_percentile <= self.high_percentile <= 100:
            raise ValueError("percentiles must satisfy 0 <= low <= representative <= high <= 100")


@dataclass(frozen=True, eq=False)
class VestDetection:
    pixels: np.ndarray  # (n, 2) reflector pixels (plane, azimuth)
    position: Point3 | None  # None when no range is available anywhere near the reflector
    points: np.ndarray  # (m, 3) points used for the zone tests
    decelerate: bool
    stop: bool
    from_reflector: bool  # True when the reflector pixels themselves carried ranges


def detect_vests(frame: LidarFrame, decel_zone: VolumeOfInterest | None = None,
                 stop_zone: VolumeOfInterest | None = None, params: VestParams | None = None) -> list[VestDetection]:
    params = params or VestParams()
    mask = reflector_mask(frame)
    if not mask.any():
        return []
    xyz = frame.xyz()
    rng = frame.range
    k = params.dilation_iterations
    out = []
    for pix in _components(mask):
        own = rng[pix[:, 0], pix[:, 1]] > 0
        if own.any():
            sel = pix[own]
            pts = xyz[sel[:, 0], sel[:, 1]]
            position = Point3(*pts[np.argmin(rng[sel[:, 0], sel[:, 1]])])
            from_reflector = True
        else:
            comp = np.zeros_like(mask)
            comp[pix[:, 0], pix[:, 1]] = True
            grown = ndimage.binary_dilation(_wrap_pad(comp, k), _EIGHT, iterations=k)[:, k:k + mask.shape[1]] \
                if k else comp
            near = np.argwhere(grown & (rng > 0))
            pts = np.zeros((0, 3))
            position = None
            if len(near):
                r = rng[near[:, 0], near[:, 1]]
                lo, hi = np.percentile(r, [params.low_percentile, params.high_percentile])
                band = (r >= lo) & (r <= hi)
                near, r = near[band], r[band]
                pts = xyz[near[:, 0], near[:, 1]]
                target = np.percentile(r, params.representative_percentile)
                position = Point3(*pts[np.argmin(np.abs(r - target))])
            from_reflector = False
        decel = bool(decel_zone is not None and len(pts) and decel_zone.contains(pts).any())
        stop = bool(stop_zone is not None and len(pts) and stop_zone.contains(pts).any())
        out.append(VestDetection(pix, position, pts, decel, stop, from_reflector))
    return out


class SafetyMonitor:
    """Latches the stop signal until :meth:`reset` is called by an operator."""

    def __init__(self, decel_zone: VolumeOfInterest, stop_zone: VolumeOfInterest,
                 params: VestParams | None = None) -> None:
        self.decel_zone = decel_zone
        self.stop_zone = stop_zone
        self.params = params or VestParams()
        self.stopped = False

    def update(self, frame: LidarFrame) -> dict:
        dets = detect_vests(frame, self.decel_zone, self.stop_zone, self.params)
        if any(d.stop for d in dets):
            self.stopped = True
        return {"detections": len(dets), "decel": any(d.decelerate for d in dets), "stop": self.stopped}

    def reset(self) -> None:
        self.stopped = False


def guaranteed_detection_range(strip_width: float, azimuth_step_deg: float) -> float:
    """Furthest range at which a facing strip of this width spans at least one beam spacing."""
    if strip_width < 0:
        raise ValueError("strip_width must be >= 0")
    if not 0 < azimuth_step_deg < 180:
        raise ValueError("azimuth_step_deg must lie in (0, 180)")
    return strip_width / (2.0 * math.tan(math.radians(0.5 * azimuth_step_deg)))


def missed_object_width(speed: float, scan_period: float, beam_footprint: float) -> float:
    """Widest object a vertical scanner can miss when the object crosses at ``speed``."""
    if min(speed, scan_period, beam_footprint) < 0:
        raise ValueError("inputs must be >= 0")
    return max(0.0, speed * scan_period - beam_footprint)


def fill_reflector_ranges(frame: LidarFrame) -> LidarFrame:
    """Give range-less reflector pixels the median of their non-zero 3x3 neighbours (azimuth wraps)."""
    rng = frame.range
    holes = np.argwhere(reflector_mask(frame) & (rng == 0))
    if not len(holes):
        return frame
    n_p, n_a = rng.shape
    out = rng.copy()
    for p, a in holes:
        nb = rng[max(0, p - 1):p + 2][:, [(a - 1) % n_a, a, (a + 1) % n_a]]
        vals = nb[nb > 0]
        if vals.size:
            out[p, a] = float(np.median(vals))
    return frame.with_range(out)


@dataclass(frozen=True, eq=False)
class SegmentedObject:
    pixels: np.ndarray  # (n, 2) (plane, azimuth), in discovery order
    z_min: float
    z_max: float
    range: float  # median member range

    @property
    def size(self) -> int:
        return len(self.pixels)

    @property
    def height(self) -> float:
        return self.z_max - self.z_min


_VERTICAL = ((-1, -1), (-1, 0), (-1, 1), (1, -1), (1, 0), (1, 1))


def segment_by_range(frame: LidarFrame, max_range: float = 10.0, diff_threshold: float = 0.3,
                     min_height: float = 0.5) -> list[SegmentedObject]:
    """Flood-fill over the three pixels above and three below with similar range.

    Pixels beyond ``max_range`` are treated as empty. Objects shorter than ``min_height`` are dropped.
    """
    rng = np.where(frame.range > max_range, 0.0, frame.range)
    n_p, n_a = rng.shape
    z = frame.xyz()[..., 2]
    owner = np.full(rng.shape, -1)
    objects = []
    for p0 in range(n_p):
        for a0 in range(n_a):
            if rng[p0, a0] <= 0 or owner[p0, a0] >= 0:
                continue
            tag = len(objects)
            owner[p0, a0] = tag
            members = [(p0, a0)]
            queue = deque(members)
            while queue:
                p, a = queue.popleft()
                r = rng[p, a]
                for dp, da in _VERTICAL:
                    q, b = p + dp, (a + da) % n_a
                    if 0 <= q < n_p and owner[q, b] < 0 and rng[q, b] > 0 and abs(r - rng[q, b]) < diff_threshold:
                        owner[q, b] = tag
                        members.append((q, b))
                        queue.append((q, b))
            objects.append(np.array(members))
    out = []
    for pix in objects:
        zz = z[pix[:, 0], pix[:, 1]]
        if zz.max() - zz.min() >= min_height:
            out.append(SegmentedObject(pix, float(zz.min()), float(zz.max()),
                                       float(np.median(rng[pix[:, 0], pix[:, 1]]))))
    return out
