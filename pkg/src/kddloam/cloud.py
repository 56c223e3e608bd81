"""Point cloud container with per-point timestamps and parallel attribute channels."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .geometry import Pose


class Point(NamedTuple):
    position: np.ndarray
    timestamp: float
    intensity: float | None = None


def _frozen(a: np.ndarray | None) -> np.ndarray | None:
    if a is not None:
        a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered points plus optional channels keyed by point index.

    ``timestamps`` are normalized within-scan times in [0, 1].  ``index`` maps
    each point back to a row of the FeatureSet computed for the original scan,
    so subsampling stages can keep looking up descriptors.
    """

    positions: np.ndarray
    timestamps: np.ndarray | None = None
    intensity: np.ndarray | None = None
    saliency: np.ndarray | None = None
    index: np.ndarray | None = None

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float).reshape(-1, 3)
        n = len(pos)
        ts = np.ones(n) if self.timestamps is None else np.array(self.timestamps, dtype=float).reshape(n)
        if n and (ts.min() < 0.0 or ts.max() > 1.0):
            raise ValueError("timestamps must lie in [0, 1]")
        inten = None if self.intensity is None else np.array(self.intensity, dtype=float).reshape(n)
        sal = None
        if self.saliency is not None:
            sal = np.array(self.saliency, dtype=float).reshape(-1)
            if len(sal) != n:
                raise ValueError("saliency needs exactly one entry per point")
            if n and sal.min() <= 0.0:
                raise ValueError("saliency entries must be > 0")
        idx = np.arange(n) if self.index is None else np.array(self.index, dtype=np.int64).reshape(n)
        for name, val in (
            ("positions", pos),
            ("timestamps", ts),
            ("intensity", inten),
            ("saliency", sal),
            ("index", idx),
        ):
            object.__setattr__(self, name, _frozen(val))

    def __len__(self) -> int:
        return len(self.positions)

    def point(self, i: int) -> Point:
        inten = None if self.intensity is None else float(self.intensity[i])
        return Point(self.positions[i], float(self.timestamps[i]), inten)

    def select(self, which) -> "PointCloud":
        """Sub-cloud from a boolean mask or an index array; channels follow."""
        which = np.asarray(which)
        pick = lambda a: None if a is None else a[which]  # noqa: E731
        return PointCloud(
            self.positions[which],
            self.timestamps[which],
            pick(self.intensity),
            pick(self.saliency),
            self.index[which],
        )

    def with_positions(self, positions) -> "PointCloud":
        return replace(self, positions=positions)

    def with_saliency(self, saliency) -> "PointCloud":
        return replace(self, saliency=saliency)


def transform_cloud(cloud: PointCloud, pose: Pose) -> PointCloud:
    return cloud.with_positions(pose.apply(cloud.positions))


def crop_by_range(cloud: PointCloud, min_r: float, max_r: float) -> PointCloud:
    if not 0.0 <= min_r < max_r:
        raise ValueError("need 0 <= min_r < max_r")
    r = np.linalg.norm(cloud.positions, axis=1)
    return cloud.select((r >= min_r) & (r <= max_r))
