"""File formats: frame CSV, ASCII PCD, PGM rasters and lossless grid CSV."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .scan import LidarFrame, LidarSpec

FRAME_HEADER = ["plane", "azimuth", "range_m", "intensity"]


class ParseError(ValueError):
    """Malformed input file; the message names the offending line."""


def write_frame_csv(frame: LidarFrame, path: str | Path) -> None:
    """One row per cell holding a return or a non-zero intensity (dropped retro-reflector ranges)."""
    keep = (frame.range > 0) | (frame.intensity > 0)
    planes, azis = np.nonzero(keep)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FRAME_HEADER)
        for p, a in zip(planes, azis):
            w.writerow([int(p), int(a), repr(float(frame.range[p, a])), repr(float(frame.intensity[p, a]))])


def read_frame_csv(path: str | Path, spec: LidarSpec | None = None) -> LidarFrame:
    spec = spec or LidarSpec()
    rng = np.zeros((spec.n_planes, spec.n_azimuths))
    inten = np.zeros_like(rng)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != FRAME_HEADER:
            raise ParseError(f"line 1: expected header {','.join(FRAME_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ParseError(f"line {lineno}: expected 4 fields, got {len(row)}")
            try:
                p, a = int(row[0]), int(row[1])
                r, i = float(row[2]), float(row[3])
            except ValueError as exc:
                raise ParseError(f"line {lineno}: {exc}") from None
            if not (0 <= p < spec.n_planes and 0 <= a < spec.n_azimuths):
                raise ParseError(f"line {lineno}: cell ({p}, {a}) outside {spec.n_planes}x{spec.n_azimuths} frame")
            if not (np.isfinite(r) and 0 <= r <= spec.max_range) or not (0 <= i <= 255):
                raise ParseError(f"line {lineno}: value out of range")
            rng[p, a] = r
            inten[p, a] = i
    return LidarFrame(spec, rng, inten)


def write_pcd(frame: LidarFrame, path: str | Path) -> int:
    """ASCII PCD v0.7 with x y z intensity per returned cell; returns the point count."""
    valid = frame.valid
    pts = frame.xyz()[valid]
    inten = frame.intensity[valid]
    n = len(pts)
    header = [
        "# .PCD v0.7 - Point Cloud Data file format",
        "VERSION 0.7",
        "FIELDS x y z intensity",
        "SIZE 4 4 4 4",
        "TYPE F F F F",
        "COUNT 1 1 1 1",
        f"WIDTH {n}",
        "HEIGHT 1",
        "VIEWPOINT 0 0 0 1 0 0 0",
        f"POINTS {n}",
        "DATA ascii",
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(header) + "\n")
        for (x, y, z), i in zip(pts, inten):
            fh.write(f"{x:.6f} {y:.6f} {z:.6f} {i:.6g}\n")
    return n


def read_pcd(path: str | Path) -> np.ndarray:
    """Read an ASCII PCD into an (N, n_fields) array."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    n_fields = None
    for idx, line in enumerate(lines):
        if line.startswith("FIELDS"):
            n_fields = len(line.split()) - 1
        if line.startswith("DATA"):
            if line.split()[1] != "ascii":
                raise ParseError(f"line {idx + 1}: only ascii PCD is supported")
            body = [l for l in lines[idx + 1:] if l.strip()]
            try:
                data = np.array([[float(v) for v in l.split()] for l in body])
            except ValueError as exc:
                raise ParseError(f"line {idx + 2}: {exc}") from None
            if n_fields is None:
                raise ParseError("missing FIELDS line")
            return data.reshape(-1, n_fields)
    raise ParseError("missing DATA line")


def write_pgm(cells: np.ndarray, path: str | Path) -> None:
    """Plain PGM (P2), maxval 255; values are rounded and clamped."""
    img = np.clip(np.floor(np.asarray(cells, dtype=float) + 0.5), 0, 255).astype(int)
    h, w = img.shape
    with open(path, "w") as fh:
        fh.write(f"P2\n{w} {h}\n255\n")
        for row in img:
            fh.write(" ".join(map(str, row)) + "\n")


def read_pgm(path: str | Path) -> np.ndarray:
    with open(path) as fh:
        tokens: list[tuple[str, int]] = []
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0]
            tokens.extend((t, lineno) for t in line.split())
    if not tokens or tokens[0][0] != "P2":
        raise ParseError("line 1: expected P2 magic")
    try:
        w, h, maxval = (int(t) for t, _ in tokens[1:4])
    except ValueError:
        raise ParseError(f"line {tokens[min(3, len(tokens) - 1)][1]}: bad PGM header") from None
    body = tokens[4:]
    if len(body) != w * h:
        raise ParseError(f"line {body[-1][1] if body else tokens[-1][1]}: expected {w * h} samples, got {len(body)}")
    try:
        vals = np.array([int(t) for t, _ in body], dtype=float)
    except ValueError:
        bad = next(ln for t, ln in body if not t.lstrip("-").isdigit())
        raise ParseError(f"line {bad}: non-integer sample") from None
    if np.any(vals < 0) or np.any(vals > maxval):
        raise ParseError("sample outside [0, maxval]")
    return vals.reshape(h, w)


def write_grid_csv(cells: np.ndarray, path: str | Path) -> None:
    """Lossless dump: one CSV line per grid row."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in np.asarray(cells, dtype=float):
            w.writerow([repr(float(v)) for v in row])


def read_grid_csv(path: str | Path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise ParseError(f"line {lineno}: {exc}") from None
            if rows and len(rows[-1]) != len(rows[0]):
                raise ParseError(f"line {lineno}: ragged row")
    return np.array(rows)


def write_ppm(rgb: np.ndarray, path: str | Path) -> None:
    """Plain PPM (P3), maxval 255, from an (h, w, 3) array."""
    img = np.clip(np.floor(np.asarray(rgb, dtype=float) + 0.5), 0, 255).astype(int)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("expected an (h, w, 3) array")
    h, w, _ = img.shape
    with open(path, "w") as fh:
        fh.write(f"P3\n{w} {h}\n255\n")
        for row in img:
            fh.write(" ".join(map(str, row.ravel())) + "\n")


def read_ppm(path: str | Path) -> np.ndarray:
    with open(path) as fh:
        tokens = [t for line in fh for t in line.split("#", 1)[0].split()]
    if not tokens or tokens[0] != "P3":
        raise ParseError("line 1: expected P3 magic")
    try:
        w, h, _ = (int(t) for t in tokens[1:4])
        vals = np.array([int(t) for t in tokens[4:]], dtype=float)
    except ValueError:
        raise ParseError("non-integer PPM token") from None
    if vals.size != w * h * 3:
        raise ParseError(f"expected {w * h * 3} samples, got {vals.size}")
    return vals.reshape(h, w, 3)
