"""Row detection from 3D lidar, steering laws and centreline geometry."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .scan import LidarFrame


@dataclass(frozen=True)
class RowDetectParams:
    cluster_gap: float = 0.1
    max_contour: float = 0.5
    crowd_radius: float = 1.0
    crowd_count: int = 4
    container_xy_gap: float = 0.15
    min_height: float = 0.4
    max_height: float = 2.0
    max_neighbour_gap: float = 5.0
    angle_bin: float = 1.0  # degrees
    detection_radius: float = 20.0  # containers further away are ignored
    aligned_pairs_only: bool = True  # lateral offsets only from pairs near the modal angle
    aligned_tolerance: float = 2.0  # degrees either side of the modal angle

    def __post_init__(self) -> None:
        for name in ("cluster_gap", "max_contour", "crowd_radius", "container_xy_gap", "min_height",
                     "max_height", "max_neighbour_gap", "angle_bin", "detection_radius"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.aligned_tolerance < 0:
            raise ValueError("aligned_tolerance must be >= 0")
        if self.crowd_count < 1:
            raise ValueError("crowd_count must be >= 1")
        if not self.min_height < self.max_height:
            raise ValueError("min_height must be < max_height")


@dataclass(frozen=True)
class ControllerGains:
    """Positive gains steer toward the centreline (lidar frame: y left, counter-clockwise positive)."""
    k_l: float = 0.5
    k_a: float = 1.0
    k_f: float = 0.01
    k_e: float = 0.01
    w_a: float = 1.0
    k_gamma: float = 1.0

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in (self.k_l, self.k_a, self.k_f, self.k_e, self.w_a, self.k_gamma)):
            raise ValueError("gains must be finite")


@dataclass(frozen=True, eq=False)
class RowEstimate:
    status: str  # "ok", "one-sided" or "no-row"
    o_a: float = 0.0
    o_l: float = 0.0
    left: np.ndarray = field(default_factory=lambda: np.zeros(0))
    right: np.ndarray = field(default_factory=lambda: np.zeros(0))
    diagnostics: dict = field(default_factory=dict)

    @property
    def valid(self) -> bool:
        return self.status != "no-row"

    @property
    def two_sided(self) -> bool:
        return self.status == "ok"

    @property
    def n_l(self) -> int:
        return len(self.left)

    @property
    def n_r(self) -> int:
        return len(self.right)


# ------------------------------------------------------------------ clustering


@dataclass(frozen=True, eq=False)
class Cluster:
    members: np.ndarray  # indices into the plane's point array
    centroid: np.ndarray
    contour: float


def _cluster_arrays(pts: np.ndarray, gap: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(label per point, centroid per cluster, contour length per cluster) for azimuth-ordered points."""
    steps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    brk = steps >= gap
    labels = np.concatenate([[0], np.cumsum(brk)])
    starts = np.concatenate([[0], np.nonzero(brk)[0] + 1])
    counts = np.diff(np.concatenate([starts, [len(pts)]]))
    centroids = np.add.reduceat(pts, starts, axis=0) / counts[:, None]
    inner = np.where(brk, 0.0, steps)  # steps that stay inside a cluster
    contour = np.add.reduceat(np.concatenate([inner, [0.0]]), starts)
    return labels, centroids, contour


def cluster_plane(points: np.ndarray, gap: float) -> list[Cluster]:
    """Split azimuth-ordered points wherever consecutive points are ``gap`` or more apart."""
    pts = np.asarray(points, dtype=float)
    if len(pts) == 0:
        return []
    labels, centroids, contour = _cluster_arrays(pts, gap)
    return [Cluster(np.nonzero(labels == k)[0], centroids[k], float(contour[k])) for k in range(len(centroids))]


def _plane_clusters(frame: LidarFrame, params: RowDetectParams, diag: dict):
    """Steps 1-3: per-plane clusters surviving the contour and crowd filters.

    All planes are processed in one pass: clusters never span a plane change, and the
    crowd search runs on one tree with each plane shifted far along x.
    Returns (points, cluster id per point, centroid per cluster).
    """
    valid = frame.range > 0
    pts = frame.xyz()[valid]
    plane = np.nonzero(valid)[0]
    if not len(pts):
        diag.update(clusters=0, clusters_after_contour=0, clusters_after_crowd=0)
        return np.zeros((0, 3)), np.zeros(0, int), np.zeros((0, 3))
    steps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    brk = (steps >= params.cluster_gap) | (np.diff(plane) != 0)
    labels = np.concatenate([[0], np.cumsum(brk)])
    starts = np.concatenate([[0], np.nonzero(brk)[0] + 1])
    counts = np.diff(np.concatenate([starts, [len(pts)]]))
    cen = np.add.reduceat(pts, starts, axis=0) / counts[:, None]
    contour = np.add.reduceat(np.concatenate([np.where(brk, 0.0, steps), [0.0]]), starts)
    short = contour <= params.max_contour
    idx = np.nonzero(short)[0]
    keep = idx
    if len(idx):
        shift = 10.0 * (frame.spec.max_range + params.crowd_radius)
        key = cen[idx, :2] + np.column_stack([plane[starts[idx]] * shift, np.zeros(len(idx))])
        crowd = cKDTree(key).query_ball_point(key, params.crowd_radius, return_length=True) - 1
        keep = idx[crowd <= params.crowd_count]
    diag.update(clusters=len(cen), clusters_after_contour=int(short.sum()), clusters_after_crowd=len(keep))
    remap = np.full(len(cen), -1)
    remap[keep] = np.arange(len(keep))
    point_ids = remap[labels]
    sel = point_ids >= 0
    return pts[sel], point_ids[sel], cen[keep]


def _containers(points: np.ndarray, ids: np.ndarray, centroids: np.ndarray,
                gap: float) -> tuple[np.ndarray, np.ndarray]:
    """Step 4: group clusters across planes whose XY centroids lie within ``gap``; bridging merges groups.

    Returns the points sorted by container and the start index of each container.
    """
    n = len(centroids)
    if not n:
        return np.zeros((0, 3)), np.zeros(0, int)
    pairs = cKDTree(centroids[:, :2]).query_pairs(gap * (1 - 1e-12), output_type="ndarray")
    adj = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, group = connected_components(adj, directed=False)
    point_group = group[ids]
    order = np.argsort(point_group, kind="stable")
    starts = np.concatenate([[0], np.nonzero(np.diff(point_group[order]))[0] + 1])
    return points[order], starts


def container_list(points: np.ndarray, starts: np.ndarray) -> list[np.ndarray]:
    return np.split(points, starts[1:]) if len(starts) else []


def mode_angle(angles_deg: np.ndarray, bin_deg: float) -> float:
    """Centre of the most populated angle bin (orientation folded to (-90, 90]); ties prefer small |angle|."""
    n_bins = int(round(180.0 / bin_deg))
    idx = np.round(np.asarray(angles_deg) / bin_deg).astype(int) % n_bins
    counts = np.bincount(idx, minlength=n_bins)
    centres = np.arange(n_bins) * bin_deg
    centres = np.where(centres > 90.0, centres - 180.0, centres)
    best = np.nonzero(counts == counts.max())[0]
    return float(centres[best[np.argmin(np.abs(centres[best]))]])


def linear_offset(left: np.ndarray, right: np.ndarray) -> float:
    """Midpoint of the mean left and mean right lateral coordinates."""
    n_l, n_r = len(left), len(right)
    return float((n_r * np.sum(left) + n_l * np.sum(right)) / (2 * n_l * n_r))


def detect_row(frame: LidarFrame, params: RowDetectParams | None = None) -> RowEstimate:
    params = params or RowDetectParams()
    diag: dict = {}
    pts3, ids, centroids = _plane_clusters(frame, params, diag)
    sorted_pts, starts = _containers(pts3, ids, centroids, params.container_xy_gap)
    diag["containers"] = len(starts)
    if len(starts) < 2:
        diag["containers_after_height"] = len(starts)
        diag["pairs"] = 0
        return RowEstimate("no-row", diagnostics=diag)
    z = sorted_pts[:, 2]
    heights = np.maximum.reduceat(z, starts) - np.minimum.reduceat(z, starts)
    counts = np.diff(np.concatenate([starts, [len(z)]]))
    cen_all = np.add.reduceat(sorted_pts[:, :2], starts, axis=0) / counts[:, None]
    tall = (heights >= params.min_height) & (heights <= params.max_height)
    tall &= np.hypot(cen_all[:, 0], cen_all[:, 1]) <= params.detection_radius
    cen = cen_all[tall]
    diag["containers_after_height"] = len(cen)
    if len(cen) < 2:
        diag["pairs"] = 0
        return RowEstimate("no-row", diagnostics=diag)
    d = np.hypot(cen[:, None, 0] - cen[None, :, 0], cen[:, None, 1] - cen[None, :, 1])
    np.fill_diagonal(d, np.inf)
    nn = np.argmin(d, axis=1)
    pairs = {(min(i, j), max(i, j)) for i, j in enumerate(nn) if d[i, j] <= params.max_neighbour_gap}
    diag["pairs"] = len(pairs)
    if not pairs:
        return RowEstimate("no-row", diagnostics=diag)
    pairs_arr = np.array(sorted(pairs))
    vec = cen[pairs_arr[:, 1]] - cen[pairs_arr[:, 0]]
    ang = np.degrees(np.arctan2(vec[:, 1], vec[:, 0]))
    ang = np.where(ang > 90, ang - 180, np.where(ang <= -90, ang + 180, ang))
    o_a_deg = mode_angle(ang, params.angle_bin)
    o_a = math.radians(o_a_deg)
    diag["angle_deg"] = o_a_deg

    aligned = np.abs(((ang - o_a_deg + 90.0) % 180.0) - 90.0) <= params.aligned_tolerance if params.aligned_pairs_only \
        else np.ones(len(ang), dtype=bool)
    members = np.unique(pairs_arr[aligned].ravel())
    pts = cen[members]
    lateral = -pts[:, 0] * math.sin(o_a) + pts[:, 1] * math.cos(o_a)
    lateral = lateral[np.abs(lateral) <= params.max_neighbour_gap]
    left, right = lateral[lateral > 0], lateral[lateral < 0]
    diag.update(n_left=len(left), n_right=len(right))
    half = params.max_neighbour_gap / 2
    if len(left) and len(right):
        return RowEstimate("ok", o_a, linear_offset(left, right), left, right, diag)
    if len(left):
        return RowEstimate("one-sided", o_a, float(left.mean() - half), left, right, diag)
    if len(right):
        return RowEstimate("one-sided", o_a, float(right.mean() + half), left, right, diag)
    return RowEstimate("no-row", diagnostics=diag)


def steering_command(o_l: float, o_a: float, gains: ControllerGains) -> float:
    return gains.k_l * o_l + gains.k_a * o_a


class RowFollower:
    """Holds the last good command through short detection gaps, then stops."""

    def __init__(self, gains: ControllerGains | None = None, params: RowDetectParams | None = None,
                 hold_frames: int = 5, max_omega: float = 1.0) -> None:
        self.gains = gains or ControllerGains()
        self.params = params or RowDetectParams()
        self.hold_frames = hold_frames
        self.max_omega = max_omega
        self.missed = 0
        self.last: RowEstimate | None = None
        self.last_omega = 0.0

    def update(self, frame: LidarFrame, estimate: RowEstimate | None = None) -> float | None:
        """Angular velocity command, or ``None`` once the hold budget is spent (stop)."""
        est = estimate if estimate is not None else detect_row(frame, self.params)
        if est.valid:
            self.missed = 0
            self.last = est
            omega = steering_command(est.o_l, est.o_a, self.gains)
            self.last_omega = float(np.clip(omega, -self.max_omega, self.max_omega))
            return self.last_omega
        self.missed += 1
        return self.last_omega if self.missed <= self.hold_frames else None


# ------------------------------------------------------------ free-space search


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    runs = []
    start = None
    for i, m in enumerate(mask):
        if m and start is None:
            start = i
        if not m and start is not None:
            runs.append((start, i))
            start = None
    if start is not None:
        runs.append((start, len(mask)))
    return runs


def free_space_angle(points: np.ndarray, radius_cap: float, half_width: float,
                     angles_deg: Sequence[float], gain: float = 1.0) -> tuple[float, float]:
    """Heading (degrees) of the emptiest straight corridor and the turn-rate command ``gain * angle`` (rad/s)."""
    angles = np.asarray(angles_deg, dtype=float)
    if angles.size == 0:
        raise ValueError("angle set must be non-empty")
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    pts = pts[np.hypot(pts[:, 0], pts[:, 1]) <= radius_cap]
    th = np.radians(angles)
    lateral = -pts[None, :, 0] * np.sin(th)[:, None] + pts[None, :, 1] * np.cos(th)[:, None]
    counts = (np.abs(lateral) < half_width).sum(axis=1)
    runs = _runs(counts == counts.min())
    longest = max(e - s for s, e in runs)
    medians = [float(np.median(angles[s:e])) for s, e in runs if e - s == longest]
    gamma = min(medians, key=abs)
    return gamma, gain * math.radians(gamma)


# ------------------------------------------------------------- mask centreline


class InsufficientMask(ValueError):
    pass


def centreline_from_mask(mask: np.ndarray, min_rows: int = 10, n_median: int = 5) -> tuple[tuple[float, float], tuple[float, float]]:
    """(far, near) centreline points as (x, y) pixel coordinates; far = smallest image rows."""
    m = np.asarray(mask).astype(bool)
    h, w = m.shape
    rows, centres = [], []
    for y in range(h):
        runs = _runs(m[y])
        if not runs:
            continue
        widths = [e - s for s, e in runs]
        best = [r for r, wd in zip(runs, widths) if wd == max(widths)]
        s, e = min(best, key=lambda r: (abs((r[0] + r[1] - 1) - (w - 1)), r[0]))
        x0, x1 = s, e - 1
        if 0 < x0 and x1 < w - 1:
            rows.append(y)
            centres.append(0.5 * (x0 + x1))
    if len(rows) < min_rows:
        raise InsufficientMask(f"only {len(rows)} valid rows; need {min_rows}")
    ys = np.array(rows, dtype=float)
    xs = np.array(centres)
    far = (float(np.median(xs[:n_median])), float(np.median(ys[:n_median])))
    near = (float(np.median(xs[-n_median:])), float(np.median(ys[-n_median:])))
    return far, near


def two_stage_steering(x_f: float, x_e: float, x_c: float, threshold: float, k_f: float, k_e: float,
                       foreground_only: bool = False) -> float:
    """Recentre on the near point first; once close, align the far point with the near one."""
    if foreground_only or abs(x_c - x_f) > threshold:
        return k_f * (x_c - x_f)
    return k_e * (x_f - x_e)


# --------------------------------------------------------- offsets from truth


def _line(p1: Sequence[float], p2: Sequence[float]) -> tuple[float, float]:
    (x1, y1), (x2, y2) = p1, p2
    if x2 == x1:
        raise ValueError("line is vertical in the lidar frame; label it in a rotated frame")
    m = (y2 - y1) / (x2 - x1)
    return m, y1 - m * x1


def ground_truth_offsets(line_a: Sequence[Sequence[float]], line_b: Sequence[Sequence[float]]) -> tuple[float, float]:
    """(o_a, o_l) of the centreline midway between two treelines, each given by two (x, y) points."""
    m1, c1 = _line(*line_a)
    m2, c2 = _line(*line_b)
    m_c, c_c = 0.5 * (m1 + m2), 0.5 * (c1 + c2)
    o_a = math.atan(m_c)
    return o_a, c_c * math.cos(o_a)


def offsets_from_centre_points(c1: Sequence[float], c2: Sequence[float]) -> tuple[float, float]:
    """(o_a, o_l) from two points on the centreline."""
    (x1, y1), (x2, y2) = c1, c2
    m, _ = _line(c1, c2)
    o_a = math.atan(m)
    return o_a, (y1 - x1 * m) * math.cos(o_a)


def tracking_cost(trajectory: Sequence[Sequence[float]], w_a: float, absolute: bool = True) -> float:
    """Sum of linear plus weighted angular offsets; ``absolute`` sums magnitudes."""
    arr = np.asarray(trajectory, dtype=float).reshape(-1, 2)
    if absolute:
        arr = np.abs(arr)
    return float(np.sum(arr[:, 0] + w_a * arr[:, 1]))
