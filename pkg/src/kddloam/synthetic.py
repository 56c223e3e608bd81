"""Synthetic scenes and LiDAR-like scans with known ground truth.

Scenes are unions of rectangular patches and vertical cylinders sampled
uniformly by area.  ``simulate_scan`` reproduces the motion skew of a
spinning sensor under constant velocity so that deskewing can be checked
end to end.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cloud import PointCloud
from .geometry import Pose, so3_exp, so3_exp_batch, so3_log


@dataclass(frozen=True)
class Patch:
    """Rectangle ``origin + a*u + b*v`` for a, b in [0, 1]."""

    origin: tuple
    u: tuple
    v: tuple

    @property
    def area(self) -> float:
        return float(np.linalg.norm(np.cross(self.u, self.v)))

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.u, self.v)
        return n / np.linalg.norm(n)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        ab = rng.random((n, 2))
        return np.asarray(self.origin) + ab[:, :1] * np.asarray(self.u) + ab[:, 1:] * np.asarray(self.v)


@dataclass(frozen=True)
class Cylinder:
    """Vertical cylinder (pole) around ``(x, y)`` between ``z0`` and ``z1``."""

    x: float
    y: float
    radius: float
    z0: float
    z1: float

    @property
    def area(self) -> float:
        return 2.0 * np.pi * self.radius * (self.z1 - self.z0)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        ang = rng.uniform(0.0, 2.0 * np.pi, n)
        z = rng.uniform(self.z0, self.z1, n)
        return np.stack([self.x + self.radius * np.cos(ang), self.y + self.radius * np.sin(ang), z], axis=1)


def box_patches(lo, hi) -> list[Patch]:
    """The four vertical faces and the top of an axis-aligned box."""
    (x0, y0, z0), (x1, y1, z1) = lo, hi
    dx, dy, dz = x1 - x0, y1 - y0, z1 - z0
    return [
        Patch((x0, y0, z0), (dx, 0, 0), (0, 0, dz)),
        Patch((x0, y1, z0), (dx, 0, 0), (0, 0, dz)),
        Patch((x0, y0, z0), (0, dy, 0), (0, 0, dz)),
        Patch((x1, y0, z0), (0, dy, 0), (0, 0, dz)),
        Patch((x0, y0, z1), (dx, 0, 0), (0, dy, 0)),
    ]


@dataclass
class Scene:
    surfaces: list = field(default_factory=list)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        areas = np.array([s.area for s in self.surfaces])
        counts = rng.multinomial(n, areas / areas.sum())
        parts = [s.sample(rng, int(c)) for s, c in zip(self.surfaces, counts) if c]
        return np.concatenate(parts) if parts else np.zeros((0, 3))

    def sample_labeled(self, rng: np.random.Generator, n: int):
        areas = np.array([s.area for s in self.surfaces])
        counts = rng.multinomial(n, areas / areas.sum())
        pts, labels = [], []
        for k, (s, c) in enumerate(zip(self.surfaces, counts)):
            if c:
                pts.append(s.sample(rng, int(c)))
                labels.append(np.full(int(c), k))
        return np.concatenate(pts), np.concatenate(labels)


def room_scene(size: float = 20.0, height: float = 5.0) -> Scene:
    """Floor and two orthogonal walls meeting in a corner, plus two poles."""
    h = size / 2.0
    return Scene(
        [
            Patch((-h, -h, 0.0), (size, 0, 0), (0, size, 0)),
            Patch((h, -h, 0.0), (0, size, 0), (0, 0, height)),
            Patch((-h, h, 0.0), (size, 0, 0), (0, 0, height)),
            Cylinder(3.0, 4.0, 0.15, 0.0, 4.0),
            Cylinder(-4.0, 6.0, 0.15, 0.0, 4.0),
        ]
    )


def corridor_scene(length: float = 80.0, half_width: float = 4.0, seed: int = 7) -> Scene:
    """Corridor along +x with floor, ceiling, walls, and irregular clutter:
    poles and boxes along both walls so motion along the axis is observable."""
    rng = np.random.default_rng(seed)
    x0, x1 = -15.0, length
    surfaces: list = [
        Patch((x0, -half_width, -1.5), (x1 - x0, 0, 0), (0, 2 * half_width, 0)),
        Patch((x0, -half_width, 2.5), (x1 - x0, 0, 0), (0, 2 * half_width, 0)),
        Patch((x0, -half_width, -1.5), (x1 - x0, 0, 0), (0, 0, 4.0)),
        Patch((x0, half_width, -1.5), (x1 - x0, 0, 0), (0, 0, 4.0)),
    ]
    # end walls and pilasters give surfaces facing along the corridor axis
    surfaces.append(Patch((x0, -half_width, -1.5), (0, 2 * half_width, 0), (0, 0, 4.0)))
    surfaces.append(Patch((x1, -half_width, -1.5), (0, 2 * half_width, 0), (0, 0, 4.0)))
    for xp in np.arange(x0 + 3.0, x1 - 1.0, 4.0):
        surfaces.extend(box_patches((xp, -half_width, -1.5), (xp + 0.6, -half_width + 0.4, 2.5)))
        surfaces.extend(box_patches((xp + 2.0, half_width - 0.4, -1.5), (xp + 2.6, half_width, 2.5)))
    x = x0 + 2.0
    while x < x1 - 2.0:
        side = rng.choice([-1.0, 1.0])
        if rng.random() < 0.5:
            y = side * (half_width - rng.uniform(0.5, 1.2))
            surfaces.append(Cylinder(x, y, rng.uniform(0.1, 0.25), -1.5, rng.uniform(1.0, 2.5)))
        else:
            w, d, hgt = rng.uniform(0.5, 1.5), rng.uniform(0.4, 1.0), rng.uniform(0.5, 2.0)
            y = side * half_width - (d if side > 0 else 0.0)
            surfaces.extend(box_patches((x, y, -1.5), (x + w, y + d, -1.5 + hgt)))
        x += rng.uniform(1.0, 2.5)
    return Scene(surfaces)


def scan_end_azimuth_timestamps(points: np.ndarray) -> np.ndarray:
    """Counter-clockwise sweep ending at azimuth pi: s = (atan2(y, x) + pi) / 2pi."""
    return (np.arctan2(points[:, 1], points[:, 0]) + np.pi) / (2.0 * np.pi)


def simulate_scan(
    scene: Scene,
    pose_end: Pose,
    motion: Pose,
    rng: np.random.Generator,
    n_points: int = 4000,
    max_range: float = 40.0,
    noise: float = 0.0,
) -> PointCloud:
    """Scan observed by a sensor whose pose at scan end is ``pose_end`` and
    that moved by ``motion`` (sensor frame) over the sweep.

    A point with within-scan time ``s`` is seen from
    ``pose_end * interpolate(motion, s - 1)``, which is exactly what
    constant-velocity deskewing inverts.
    """
    world = rng.permutation(scene.sample(rng, n_points * 4))
    local_end = pose_end.inverse().apply(world)
    r = np.linalg.norm(local_end, axis=1)
    local_end = local_end[(r > 1.0) & (r < max_range)][:n_points]
    s = scan_end_azimuth_timestamps(local_end)
    order = np.argsort(s, kind="stable")
    local_end, s = local_end[order], s[order]
    # p = interp(s-1) * p_s  =>  p_s = R_s^T (p - t_s)
    f = s - 1.0
    R = so3_exp_batch(f[:, None] * so3_log(motion.rotation))
    pts = np.einsum("nji,nj->ni", R, local_end - f[:, None] * motion.translation)
    if noise > 0:
        pts = pts + rng.normal(scale=noise, size=pts.shape)
    return PointCloud(pts, timestamps=s)


def corridor_trajectory(n_scans: int = 50, step: float = 1.0, yaw_amp: float = 0.02, ramp: int = 5) -> list[Pose]:
    """Forward motion ramping up to ``step`` per scan over ``ramp`` scans, with
    a gentle yaw oscillation and height bob."""
    poses = [Pose.identity()]
    for k in range(1, n_scans):
        speed = step * min(1.0, k / ramp)
        yaw = yaw_amp * np.sin(0.3 * k)
        rel = Pose(so3_exp([0.0, 0.0, yaw]), [speed, 0.02 * np.sin(0.25 * k), 0.01 * np.cos(0.4 * k)])
        poses.append(poses[-1].compose(rel))
    return poses


def corridor_sequence(
    n_scans: int = 50,
    step: float = 1.0,
    n_points: int = 4000,
    seed: int = 0,
    noise: float = 0.0,
    max_range: float = 40.0,
):
    """(scans, ground-truth poses) for a drive down ``corridor_scene``; the
    sensor starts at rest."""
    scene = corridor_scene(length=n_scans * step + 40.0)
    gt = corridor_trajectory(n_scans, step)
    rng = np.random.default_rng(seed)
    scans = []
    for k, pose in enumerate(gt):
        motion = gt[k - 1].inverse().compose(pose) if k else Pose.identity()
        scans.append(simulate_scan(scene, pose, motion, rng, n_points, max_range, noise))
    return scans, gt


def planar_heavy_points(
    rng: np.random.Generator,
    n: int = 40_000,
    plane_fraction: float = 0.7,
    size: float = 20.0,
    height: float = 5.0,
    n_clusters: int = 12,
    cluster_scale: float = 0.6,
) -> np.ndarray:
    """Floor and two walls carrying ``plane_fraction`` of the points, the rest
    in Gaussian clusters (vegetation-like clutter) floating above the floor.

    Surfaces sit slightly inside voxel boundaries so each plane fills whole
    voxels on a unit grid.
    """
    h = size / 2.0
    off = 0.03
    planes = Scene(
        [
            Patch((-h, -h, off), (size, 0, 0), (0, size, 0)),
            Patch((-h, h - off, 0.0), (size, 0, 0), (0, 0, height)),
            Patch((h - off, -h, 0.0), (0, size, 0), (0, 0, height)),
        ]
    )
    n_plane = int(round(plane_fraction * n))
    centers = rng.uniform([-0.7 * h, -0.7 * h, 1.5], [0.7 * h, 0.7 * h, 3.5], (n_clusters, 3))
    clutter = centers[rng.integers(0, n_clusters, n - n_plane)] + rng.normal(scale=cluster_scale, size=(n - n_plane, 3))
    return rng.permutation(np.vstack([planes.sample(rng, n_plane), clutter]))
