"""Structure-feature extraction from lidar frames and pixel-wise scoring of the resulting masks."""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .scan import BirdsEyeGrid, GridSpec, LidarFrame, LidarSpec, P_MAX, rasterize


class PlaneMetric(str, Enum):
    MEAN = "mean"
    MEDIAN = "median"
    MAXIMUM = "maximum"


def _metric(ranges: np.ndarray, metric: PlaneMetric) -> float:
    if metric is PlaneMetric.MEAN:
        return float(np.mean(ranges))
    if metric is PlaneMetric.MEDIAN:
        return float(np.median(ranges))
    return float(np.max(ranges))


def _plane_scores(rng: np.ndarray, metric: PlaneMetric) -> np.ndarray:
    """Metric per plane over its non-zero ranges; -inf for planes without returns."""
    scores = np.full(rng.shape[0], -np.inf)
    for p, row in enumerate(rng):
        valid = row[row > 0]
        if valid.size:
            scores[p] = _metric(valid, metric)
    return scores


def select_plane(frame: LidarFrame, metric: PlaneMetric | str = PlaneMetric.MEDIAN) -> tuple[int, np.ndarray]:
    """Index of the plane with the best range metric (ties -> lower index) and its (N, 3) points."""
    metric = PlaneMetric(metric)
    scores = _plane_scores(frame.range, metric)
    if not np.isfinite(scores).any():
        raise ValueError("frame has no returns")
    best = int(np.argmax(scores))  # argmax returns the first maximum
    xyz = frame.xyz()[best]
    return best, xyz[frame.range[best] > 0]


@dataclass(frozen=True, eq=False)
class SegmentedSelection:
    planes: np.ndarray  # chosen plane per segment, -1 where the segment has no returns
    ranges: np.ndarray  # composite 2D scan: one range per azimuth (0 = none)
    points: np.ndarray  # (N, 3) returned points of the composite scan


def select_plane_segmented(frame: LidarFrame, n_segments: int,
                           metric: PlaneMetric | str = PlaneMetric.MEDIAN) -> SegmentedSelection:
    metric = PlaneMetric(metric)
    n_az = frame.spec.n_azimuths
    if n_segments < 1 or n_az % n_segments:
        raise ValueError(f"n_segments must divide {n_az}")
    width = n_az // n_segments
    planes = np.full(n_segments, -1)
    ranges = np.zeros(n_az)
    chosen = np.full(n_az, -1)
    for s in range(n_segments):
        sl = slice(s * width, (s + 1) * width)
        scores = _plane_scores(frame.range[:, sl], metric)
        if np.isfinite(scores).any():
            p = int(np.argmax(scores))
            planes[s] = p
            ranges[sl] = frame.range[p, sl]
            chosen[sl] = p
    xyz = frame.xyz()
    cols = np.nonzero(ranges > 0)[0]
    points = xyz[chosen[cols], cols]
    return SegmentedSelection(planes, ranges, points)


# ------------------------------------------------------------- scaled density


@dataclass(frozen=True)
class ScaleModel:
    delta_v: float = 2.0  # degrees between planes
    delta_h: float = 0.4  # degrees between azimuth columns
    d_v: float = 2.0  # reference object height, metres
    d_h: float = 0.1  # reference object width, metres
    max_planes: int = 16
    p_max: float = P_MAX

    def __post_init__(self) -> None:
        for name in ("delta_v", "delta_h", "d_v", "d_h", "max_planes", "p_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")

    @classmethod
    def for_spec(cls, spec: LidarSpec, **kw) -> "ScaleModel":
        return cls(delta_v=spec.plane_step or 1.0, delta_h=spec.azimuth_step, max_planes=spec.n_planes, **kw)


def _atan_deg(x):
    return np.degrees(np.arctan(x))


def planes_on_object(r_o, model: ScaleModel):
    """Expected number of planes striking an object of height ``d_v`` at horizontal range ``r_o``."""
    r = np.asarray(r_o, dtype=float)
    return np.minimum(model.max_planes, 1.0 + (2.0 / model.delta_v) * _atan_deg(model.d_v / (2.0 * r)))


def columns_on_object(r_o, model: ScaleModel):
    r = np.asarray(r_o, dtype=float)
    return 1.0 + (2.0 / model.delta_h) * _atan_deg(model.d_h / (2.0 * r))


def density_scale_factor(r_o, model: ScaleModel | None = None):
    """Multiplier that equalises per-object point counts across range."""
    model = model or ScaleModel()
    r = np.asarray(r_o, dtype=float)
    if np.any(r <= 0):
        raise ValueError("r_o must be > 0")
    s = model.p_max / (planes_on_object(r, model) * columns_on_object(r, model))
    return float(s) if s.ndim == 0 else s


def scaled_density_image(frame: LidarFrame, model: ScaleModel | None = None,
                         grid: GridSpec | None = None) -> BirdsEyeGrid:
    grid = grid or GridSpec()
    model = model or ScaleModel.for_spec(frame.spec)
    counts = rasterize(frame.points(), grid)
    xs, ys = grid.cell_centres()
    scale = density_scale_factor(np.hypot(xs, ys), model)
    return BirdsEyeGrid(grid, counts.cells * scale)


def scaled_density_extract(frame: LidarFrame, model: ScaleModel | None = None, threshold: float = 0.0,
                           grid: GridSpec | None = None) -> BirdsEyeGrid:
    img = scaled_density_image(frame, model, grid)
    return BirdsEyeGrid(img.spec, (img.cells > threshold).astype(float))


# ----------------------------------------------------------- vertical objects


def vertical_angle(r1, a1, r2, a2):
    """Elevation (degrees, in [0, 90]) of the segment joining two returns on one azimuth."""
    r1, r2 = np.asarray(r1, float), np.asarray(r2, float)
    a1, a2 = np.radians(a1), np.radians(a2)
    num = r2 * np.sin(a2) - r1 * np.sin(a1)
    den = r1 * np.cos(a1) - r2 * np.cos(a2)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(den == 0, 90.0, np.abs(np.degrees(np.arctan(num / np.where(den == 0, 1.0, den)))))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True, eq=False)
class VerticalObject:
    pixels: np.ndarray  # (n, 2) (plane, azimuth)
    z_min: float
    z_max: float

    @property
    def height(self) -> float:
        return self.z_max - self.z_min


def _vertical_links(frame: LidarFrame, angle_threshold: float) -> list[np.ndarray]:
    """Boolean (planes-1, azimuths) link masks toward down-left, down and down-right neighbours."""
    rng = frame.range
    alpha = np.asarray(frame.spec.plane_angles)
    upper_r, lower_r = rng[:-1], rng[1:]
    a_up = np.broadcast_to(alpha[:-1, None], upper_r.shape)
    a_dn = np.broadcast_to(alpha[1:, None], upper_r.shape)
    links = []
    for shift in (-1, 0, 1):
        below = np.roll(lower_r, -shift, axis=1)  # below[p, a] = range at (p + 1, a + shift)
        ang = vertical_angle(upper_r, a_up, below, a_dn)
        links.append((upper_r > 0) & (below > 0) & (ang > angle_threshold))
    return links


def extract_vertical_objects(frame: LidarFrame, angle_threshold: float = 45.0, height_threshold: float = 0.45,
                             grid: GridSpec | None = None) -> tuple[list[VerticalObject], BirdsEyeGrid]:
    """Link returns to steep neighbours on the plane below and keep objects tall enough."""
    n_p, n_a = frame.range.shape
    links = _vertical_links(frame, angle_threshold) if n_p > 1 else []
    ids = np.full((n_p, n_a), -1)
    merged: list[int] = []  # class id -> representative id

    def root(c: int) -> int:
        while merged[c] != c:
            merged[c] = merged[merged[c]]
            c = merged[c]
        return c

    for p in range(n_p):
        for a in range(n_a):
            if frame.range[p, a] <= 0:
                continue
            group = [(p, a)]
            if p < n_p - 1:
                for k, shift in enumerate((-1, 0, 1)):
                    if links[k][p, a]:
                        group.append((p + 1, (a + shift) % n_a))
            existing = sorted({root(ids[q]) for q in group if ids[q] >= 0})
            if existing:
                cls = existing[0]
                for other in existing[1:]:
                    merged[other] = cls
            else:
                cls = len(merged)
                merged.append(cls)
            for q in group:
                ids[q] = cls
    valid = ids >= 0
    flat_ids = np.array([root(c) for c in ids[valid]])
    pix = np.argwhere(valid)
    z = frame.xyz()[..., 2][valid]
    objects = []
    if len(flat_ids):
        order = np.argsort(flat_ids, kind="stable")
        uniq, start = np.unique(flat_ids[order], return_index=True)
        for s, e in zip(start, list(start[1:]) + [len(order)]):
            m = order[s:e]
            zz = z[m]
            if zz.max() - zz.min() >= height_threshold:
                objects.append(VerticalObject(pix[m], float(zz.min()), float(zz.max())))
    xyz = frame.xyz()
    pts = np.concatenate([xyz[o.pixels[:, 0], o.pixels[:, 1]] for o in objects]) if objects else np.zeros((0, 3))
    g = rasterize(pts, grid)
    return objects, BirdsEyeGrid(g.spec, (g.cells > 0).astype(float))


# ------------------------------------------------------------------ scoring


@dataclass(frozen=True)
class ExtractionScores:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else float("nan")

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else float("nan")

    @property
    def specificity(self) -> float:
        return self.tn / (self.tn + self.fp) if self.tn + self.fp else float("nan")

    def __add__(self, other: "ExtractionScores") -> "ExtractionScores":
        return ExtractionScores(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)


def evaluate_extraction(pred, truth) -> ExtractionScores:
    p = np.asarray(pred.cells if isinstance(pred, BirdsEyeGrid) else pred) > 0
    t = np.asarray(truth.cells if isinstance(truth, BirdsEyeGrid) else truth) > 0
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    return ExtractionScores(int(np.sum(p & t)), int(np.sum(p & ~t)), int(np.sum(~p & ~t)), int(np.sum(~p & t)))
