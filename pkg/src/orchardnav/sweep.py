"""Parameter sweeps over feature-extraction pipelines and the synthetic frame suite they run on."""
from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .features import ExtractionScores, PlaneMetric, evaluate_extraction, select_plane_segmented
from .scan import LidarFrame, LidarSpec, rasterize
from .sim import GroundTruthLabels, RobotState, WorldConfig, build_world, cast_scan

CLUTTERED_ROWS = WorldConfig(row_count=3, row_length=55.0, weed_count=150, branch_count=150,
                             range_noise=0.03, edge_mixing=True)


@dataclass(frozen=True, eq=False)
class SuiteFrame:
    frame: LidarFrame
    labels: GroundTruthLabels
    pose: RobotState


def synthetic_suite(n_frames: int, seed: int = 1, template: WorldConfig = CLUTTERED_ROWS,
                    spec: LidarSpec | None = None, max_slope: float = 0.05, lateral: float = 0.8,
                    max_heading: float = 0.15) -> list[SuiteFrame]:
    """Frames from the middle row of freshly seeded worlds, each with its own random slope and pose.

    The robot stands in the middle of the row length, within ``lateral`` of the centreline.
    """
    if n_frames < 0:
        raise ValueError("n_frames must be >= 0")
    rng = np.random.default_rng(seed)
    row = template.row_count // 2
    x_lo, x_hi = 0.18 * template.row_length, 0.73 * template.row_length
    out = []
    for i in range(n_frames):
        cfg = replace(template, slope_x=rng.uniform(-max_slope, max_slope),
                      slope_y=rng.uniform(-max_slope, max_slope), seed=i)
        world = build_world(cfg)
        pose = RobotState(rng.uniform(x_lo, x_hi), (row + 0.5) * cfg.row_width + rng.uniform(-lateral, lateral),
                          rng.uniform(-max_heading, max_heading))
        frame, labels = cast_scan(world, pose, spec, seed=i)
        out.append(SuiteFrame(frame, labels, pose))
    return out


def expand_grid(grid: Mapping[str, Sequence]) -> list[dict]:
    """Cartesian product in key order; the last key varies fastest."""
    if not grid:
        raise ValueError("empty parameter grid")
    for k, vals in grid.items():
        if not len(vals):
            raise ValueError(f"parameter {k!r} has no values")
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


@dataclass(frozen=True)
class SweepRow:
    params: dict
    precision: float
    recall: float
    runtime: float
    error: str = ""


def run_sweep(grid: Mapping[str, Sequence], pipeline: Callable[[dict], ExtractionScores]) -> list[SweepRow]:
    """Evaluate every grid cell; a cell that raises is recorded with NaN scores and the sweep goes on."""
    rows = []
    for params in expand_grid(grid):
        t0 = time.perf_counter()
        try:
            s = pipeline(params)
            rows.append(SweepRow(params, s.precision, s.recall, time.perf_counter() - t0))
        except Exception as exc:  # noqa: BLE001 - failures become rows
            rows.append(SweepRow(params, math.nan, math.nan, time.perf_counter() - t0, f"{type(exc).__name__}: {exc}"))
    return rows


def plane_selection_pipeline(suite: Sequence[SuiteFrame], truth: str = "posts_trunks") -> Callable[[dict], ExtractionScores]:
    """Pooled scores of segmented plane selection against a ground-truth mask.

    Cell parameters: ``segments`` (int) and ``metric`` (a :class:`PlaneMetric` value).
    """
    if truth not in ("posts_trunks", "structure"):
        raise ValueError("truth must be 'posts_trunks' or 'structure'")
    masks = [getattr(s.labels, f"{truth}_mask")(s.frame) for s in suite]

    def run(params: dict) -> ExtractionScores:
        unknown = set(params) - {"segments", "metric"}
        if unknown:
            raise ValueError(f"unknown sweep parameters {sorted(unknown)}")
        n, metric = int(params["segments"]), PlaneMetric(params["metric"])
        total = ExtractionScores(0, 0, 0, 0)
        for s, mask in zip(suite, masks):
            pred = rasterize(select_plane_segmented(s.frame, n, metric).points, mask.spec)
            total = total + evaluate_extraction(pred, mask)
        return total

    return run
