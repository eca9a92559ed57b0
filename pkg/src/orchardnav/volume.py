"""Axis-aligned volumes of interest in the lidar frame."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class VolumeOfInterest:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    z_min: float
    z_max: float
    count_threshold: int = 1

    def __post_init__(self) -> None:
        for axis in "xyz":
            if not getattr(self, f"{axis}_min") < getattr(self, f"{axis}_max"):
                raise ValueError(f"{axis}_min must be < {axis}_max")
        if self.count_threshold < 1:
            raise ValueError("count_threshold must be >= 1")

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Closed-box membership per point."""
        p = np.asarray(points, dtype=float).reshape(-1, 3)
        return ((p[:, 0] >= self.x_min) & (p[:, 0] <= self.x_max) & (p[:, 1] >= self.y_min)
                & (p[:, 1] <= self.y_max) & (p[:, 2] >= self.z_min) & (p[:, 2] <= self.z_max))

    def count(self, points: np.ndarray) -> int:
        return int(self.contains(points).sum())

    def mirrored(self) -> "VolumeOfInterest":
        """Reflection across the lidar x axis (left <-> right)."""
        return VolumeOfInterest(self.x_min, self.x_max, -self.y_max, -self.y_min, self.z_min, self.z_max,
                                self.count_threshold)

    @classmethod
    def from_dict(cls, d: dict) -> "VolumeOfInterest":
        return cls(**d)


def object_in_volume(points: np.ndarray, volume: VolumeOfInterest) -> bool:
    return volume.count(points) >= volume.count_threshold
