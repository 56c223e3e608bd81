"""Sparse voxel hash map holding either capped raw point lists or one surfel per voxel.

Voxels are keyed by ``floor(p / v)`` per axis.  A voxel accepts raw points
until it holds ``n_max`` of them; at that moment a total-least-squares plane
is fitted and, if it is flat enough, the points are replaced by a surfel
(anchor point nearest the voxel center, unit normal, radius ``v``).

Queries come in two flavors.  ``nearest_point`` / ``nearest_surfel`` walk the
voxel rings around a single query.  ``nearest_points`` / ``nearest_surfels``
answer a whole batch from a KD-tree snapshot of the map that is rebuilt lazily
after any mutation; the registration loop uses the batch form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import NoSuchVoxel, NotFull

DEFAULT_VOXEL_SIZE = 1.0
DEFAULT_N_MAX = 20
DEFAULT_EPS_PLANE = 0.05
DEFAULT_MIN_PLANARITY = 0.3

POINT_BYTES = 3 * 4
SURFEL_BYTES = 7 * 4
# integer key (3 x int32) plus a 4-byte tag/count word per occupied voxel
VOXEL_OVERHEAD_BYTES = 16


@dataclass(frozen=True, eq=False)
class Surfel:
    anchor: np.ndarray
    normal: np.ndarray
    radius: float


@dataclass(eq=False)
class Voxel:
    points: list = field(default_factory=list)  # list of 3-element float arrays
    surfel: Surfel | None = None

    @property
    def is_surfel(self) -> bool:
        return self.surfel is not None


class InsertReport(NamedTuple):
    added: int
    rejected_full: int
    rejected_surfel: int
    rejected_duplicate: int = 0
    surfels_fitted: int = 0


class FitResult(NamedTuple):
    fitted: bool
    residual: float
    planarity: float
    surfel: Surfel | None = None


def voxel_keys(points: np.ndarray, voxel_size: float) -> np.ndarray:
    return np.floor(np.asarray(points, dtype=float) / voxel_size).astype(np.int64)


class VoxelHashMap:
    def __init__(
        self,
        voxel_size: float = DEFAULT_VOXEL_SIZE,
        n_max: int = DEFAULT_N_MAX,
        eps_plane: float = DEFAULT_EPS_PLANE,
        min_planarity: float = DEFAULT_MIN_PLANARITY,
        min_point_spacing: float | None = None,
        fit_surfels: bool = True,
    ):
        if voxel_size <= 0 or n_max < 1:
            raise ValueError("voxel_size must be > 0 and n_max >= 1")
        self.voxel_size = float(voxel_size)
        self.n_max = int(n_max)
        self.eps_plane = float(eps_plane)
        self.min_planarity = float(min_planarity)
        self.min_point_spacing = self.voxel_size / 10.0 if min_point_spacing is None else float(min_point_spacing)
        self.fit_surfels = fit_surfels
        self._voxels: dict[tuple[int, int, int], Voxel] = {}
        self._version = 0
        self._snapshot_version = -1
        self._snapshot = None

    # -- container protocol -------------------------------------------------

    def __len__(self) -> int:
        return len(self._voxels)

    def __contains__(self, key) -> bool:
        return tuple(key) in self._voxels

    def __getitem__(self, key) -> Voxel:
        try:
            return self._voxels[tuple(int(k) for k in key)]
        except KeyError:
            raise NoSuchVoxel(key) from None

    def items(self) -> Iterator[tuple[tuple[int, int, int], Voxel]]:
        return iter(self._voxels.items())

    def key_of(self, p) -> tuple[int, int, int]:
        v = self.voxel_size
        return (math.floor(p[0] / v), math.floor(p[1] / v), math.floor(p[2] / v))

    def voxel_center(self, key) -> np.ndarray:
        return (np.asarray(key, dtype=float) + 0.5) * self.voxel_size

    def point_array(self) -> np.ndarray:
        pts = [p for vox in self._voxels.values() for p in vox.points]
        return np.array(pts, dtype=float).reshape(-1, 3)

    def surfels(self) -> list[Surfel]:
        return [vox.surfel for vox in self._voxels.values() if vox.surfel is not None]

    @property
    def num_points(self) -> int:
        return sum(len(vox.points) for vox in self._voxels.values())

    @property
    def num_surfels(self) -> int:
        return sum(vox.surfel is not None for vox in self._voxels.values())

    def _touch(self) -> None:
        self._version += 1

    # -- mutation -------------------------------------------------------------

    def insert_points(self, points, sensor_origin=(0.0, 0.0, 0.0)) -> InsertReport:
        """Append points to their voxels; full voxels are fitted eagerly.

        ``sensor_origin`` (world frame) orients the normals of any surfel fitted
        during this call.
        """
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        added = full = on_surfel = dup = fitted = 0
        keys = voxel_keys(pts, self.voxel_size)
        spacing2 = self.min_point_spacing**2
        origin = np.asarray(sensor_origin, dtype=float)
        for p, k in zip(pts, map(tuple, keys.tolist())):
            vox = self._voxels.get(k)
            if vox is None:
                vox = self._voxels[k] = Voxel()
            if vox.surfel is not None:
                on_surfel += 1
                continue
            if len(vox.points) >= self.n_max:
                full += 1
                continue
            if vox.points and spacing2 > 0:
                diff = np.asarray(vox.points) - p
                if np.einsum("ij,ij->i", diff, diff).min() < spacing2:
                    dup += 1
                    continue
            vox.points.append(p.copy())
            added += 1
            if self.fit_surfels and len(vox.points) == self.n_max:
                if self.try_fit_surfel(k, sensor_origin=origin).fitted:
                    fitted += 1
        if added or fitted:
            self._touch()
        return InsertReport(added, full, on_surfel, dup, fitted)

    def fit_plane(self, key) -> FitResult:
        """Plane statistics for a voxel's points without modifying the map."""
        vox = self[key]
        P = np.asarray(vox.points)
        centroid = P.mean(axis=0)
        w, v = np.linalg.eigh((P - centroid).T @ (P - centroid) / len(P))
        l3, l2, l1 = np.clip(w, 0.0, None)
        normal = v[:, 0]
        residual = float(np.sqrt(np.mean(((P - centroid) @ normal) ** 2)))
        planarity = float((l2 - l3) / l1) if l1 > 0 else 0.0
        return FitResult(False, residual, planarity, Surfel(centroid, normal, self.voxel_size))

    def try_fit_surfel(self, key, sensor_origin=(0.0, 0.0, 0.0)) -> FitResult:
        key = tuple(int(k) for k in key)
        vox = self[key]
        if vox.surfel is not None or len(vox.points) != self.n_max:
            raise NotFull(f"voxel {key} holds {len(vox.points)} of {self.n_max} points")
        stats = self.fit_plane(key)
        if stats.residual > self.eps_plane or stats.planarity < self.min_planarity:
            return stats
        P = np.asarray(vox.points)
        center = self.voxel_center(key)
        anchor = P[int(np.argmin(np.linalg.norm(P - center, axis=1)))].copy()
        normal = stats.surfel.normal / np.linalg.norm(stats.surfel.normal)
        if normal @ (np.asarray(sensor_origin, dtype=float) - anchor) < 0:
            normal = -normal
        anchor.flags.writeable = False
        normal.flags.writeable = False
        surfel = Surfel(anchor, normal, self.voxel_size)
        vox.points = []
        vox.surfel = surfel
        self._touch()
        return FitResult(True, stats.residual, stats.planarity, surfel)

    def prune_beyond(self, center, max_range: float) -> int:
        if max_range <= 0:
            raise ValueError("max_range must be positive")
        c = np.asarray(center, dtype=float)
        v = self.voxel_size
        doomed = [
            k
            for k in self._voxels
            if math.dist(((k[0] + 0.5) * v, (k[1] + 0.5) * v, (k[2] + 0.5) * v), c) > max_range
        ]
        for k in doomed:
            del self._voxels[k]
        if doomed:
            self._touch()
        return len(doomed)

    # -- single queries over voxel rings -------------------------------------

    def _ring_voxels(self, query: np.ndarray, max_dist: float) -> Iterator[Voxel]:
        rings = math.ceil(max_dist / self.voxel_size)
        if (2 * rings + 1) ** 3 > len(self._voxels):
            yield from self._voxels.values()
            return
        kx, ky, kz = self.key_of(query)
        rng = range(-rings, rings + 1)
        for dx in rng:
            for dy in rng:
                for dz in rng:
                    vox = self._voxels.get((kx + dx, ky + dy, kz + dz))
                    if vox is not None:
                        yield vox

    def nearest_point(self, query, max_dist: float):
        """Exact nearest raw point within ``max_dist``, as ``(point, distance)`` or None."""
        if max_dist <= 0:
            raise ValueError("max_dist must be positive")
        q = np.asarray(query, dtype=float)
        best, best_d = None, math.inf
        for vox in self._ring_voxels(q, max_dist):
            if not vox.points:
                continue
            P = np.asarray(vox.points)
            d = np.linalg.norm(P - q, axis=1)
            i = int(np.argmin(d))
            if d[i] < best_d:
                best, best_d = P[i], float(d[i])
        if best is None or best_d > max_dist:
            return None
        return best, best_d

    def nearest_surfel(self, query, max_dist: float):
        """Surfel whose anchor is nearest to ``query``, as ``(surfel, distance)`` or None."""
        if max_dist <= 0:
            raise ValueError("max_dist must be positive")
        q = np.asarray(query, dtype=float)
        best, best_d = None, math.inf
        for vox in self._ring_voxels(q, max_dist):
            if vox.surfel is None:
                continue
            d = float(np.linalg.norm(vox.surfel.anchor - q))
            if d < best_d:
                best, best_d = vox.surfel, d
        if best is None or best_d > max_dist:
            return None
        return best, best_d

    # -- batch queries over a KD-tree snapshot --------------------------------

    def _snap(self):
        if self._snapshot_version != self._version:
            pts = self.point_array()
            surfels = self.surfels()
            anchors = np.array([s.anchor for s in surfels], dtype=float).reshape(-1, 3)
            normals = np.array([s.normal for s in surfels], dtype=float).reshape(-1, 3)
            self._snapshot = (
                pts,
                cKDTree(pts) if len(pts) else None,
                anchors,
                normals,
                cKDTree(anchors) if len(anchors) else None,
            )
            self._snapshot_version = self._version
        return self._snapshot

    def nearest_points(self, queries, max_dist: float):
        """Batch nearest raw point: ``(points (N,3), distances (N,))``; rows with
        nothing within ``max_dist`` get distance ``inf`` and NaN points."""
        pts, tree, *_ = self._snap()
        return self._batch(tree, pts, queries, max_dist)

    def nearest_surfels(self, queries, max_dist: float):
        """Batch nearest surfel by anchor distance: ``(anchors, normals, distances)``."""
        _, _, anchors, normals, tree = self._snap()
        q = np.asarray(queries, dtype=float).reshape(-1, 3)
        if tree is None:
            nan = np.full((len(q), 3), np.nan)
            return nan, nan.copy(), np.full(len(q), np.inf)
        d, i = tree.query(q, distance_upper_bound=max_dist)
        hit = np.isfinite(d)
        a = np.full((len(q), 3), np.nan)
        n = np.full((len(q), 3), np.nan)
        a[hit], n[hit] = anchors[i[hit]], normals[i[hit]]
        return a, n, d

    @staticmethod
    def _batch(tree, pts, queries, max_dist):
        q = np.asarray(queries, dtype=float).reshape(-1, 3)
        out = np.full((len(q), 3), np.nan)
        if tree is None:
            return out, np.full(len(q), np.inf)
        d, i = tree.query(q, distance_upper_bound=max_dist)
        hit = np.isfinite(d)
        out[hit] = pts[i[hit]]
        return out, d

    # -- accounting / export ----------------------------------------------------

    def payload_bytes(self) -> int:
        return sum(
            SURFEL_BYTES if vox.surfel is not None else POINT_BYTES * len(vox.points)
            for vox in self._voxels.values()
        )

    def memory_usage(self) -> int:
        """Accounted map size in bytes: 12 per raw point, 28 per surfel,
        plus VOXEL_OVERHEAD_BYTES per occupied voxel."""
        return self.payload_bytes() + VOXEL_OVERHEAD_BYTES * len(self._voxels)

    def export_lines(self) -> Iterator[str]:
        """``P x y z`` per raw point and ``S x y z nx ny nz r`` per surfel,
        in sorted key order."""
        for key in sorted(self._voxels):
            vox = self._voxels[key]
            if vox.surfel is not None:
                s = vox.surfel
                vals = [*s.anchor, *s.normal, s.radius]
                yield "S " + " ".join(repr(float(x)) for x in vals)
            else:
                for p in vox.points:
                    yield "P " + " ".join(repr(float(x)) for x in p)


def insert_points(m: VoxelHashMap, points, sensor_origin=(0.0, 0.0, 0.0)) -> InsertReport:
    return m.insert_points(points, sensor_origin)


def try_fit_surfel(m: VoxelHashMap, key, sensor_origin=(0.0, 0.0, 0.0)) -> FitResult:
    return m.try_fit_surfel(key, sensor_origin)


def nearest_point(m: VoxelHashMap, query, max_dist: float):
    return m.nearest_point(query, max_dist)


def nearest_surfel(m: VoxelHashMap, query, max_dist: float):
    return m.nearest_surfel(query, max_dist)


def prune_beyond(m: VoxelHashMap, center, max_range: float) -> int:
    return m.prune_beyond(center, max_range)


def memory_usage(m: VoxelHashMap) -> int:
    return m.memory_usage()
