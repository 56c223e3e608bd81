"""Robust scan-to-map ICP.

Data association picks, per scan point, the better of the nearest raw map
point (point-to-point) and the nearest surfel (point-to-plane), gated by an
adaptive three-sigma distance threshold.  The pose is then refined with
Geman-McClure weighted Gauss-Newton under the left perturbation
``T <- [exp(dphi^) | drho] T``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cloud import PointCloud
from .errors import NoCorrespondences, NonUnitNormal, SingularSystem
from .geometry import Pose, Twist, apply_increment, deviation_bound, hat, se3_exp
from .voxelmap import VoxelHashMap

POINT_TO_POINT = "point-to-point"
POINT_TO_PLANE = "point-to-plane"

DEFAULT_DELTA_MIN = 0.1
DEFAULT_TAU_DEFAULT = 2.0
DEFAULT_TAU_FLOOR = 0.3
DEFAULT_EPS_CONV = 1e-4
DEFAULT_MAX_ITERS = 100
MAX_HALVINGS = 5
DAMPING_CONDITION = 1e12
SINGULAR_RATIO = 1e-14
DAMPING_MU = 1e-6
# surfels whose anchor is farther than this many thresholds are ignored
ANCHOR_GATE = 3.0


@dataclass(frozen=True)
class ThresholdState:
    deviations: tuple = ()
    sigma_t: float = DEFAULT_TAU_DEFAULT / 3.0
    tau_t: float = DEFAULT_TAU_DEFAULT
    delta_min: float = DEFAULT_DELTA_MIN
    tau_floor: float = DEFAULT_TAU_FLOOR

    @classmethod
    def initial(
        cls,
        tau_default: float = DEFAULT_TAU_DEFAULT,
        delta_min: float = DEFAULT_DELTA_MIN,
        tau_floor: float = DEFAULT_TAU_FLOOR,
    ) -> "ThresholdState":
        tau = max(tau_default, tau_floor)
        return cls((), tau / 3.0, tau, delta_min, tau_floor)


def update_threshold(state: ThresholdState, delta_pose: Pose, r: float) -> ThresholdState:
    """Record one pose correction and recompute ``tau_t = max(3 sigma_t, floor)``.

    ``sigma_t`` is the zero-mean RMS of the retained deviation bounds;
    corrections below ``delta_min`` are ignored.
    """
    delta = deviation_bound(delta_pose, r)
    if delta < state.delta_min:
        return state
    devs = state.deviations + (delta,)
    sigma = float(np.sqrt(np.mean(np.square(devs))))
    return ThresholdState(devs, sigma, max(3.0 * sigma, state.tau_floor), state.delta_min, state.tau_floor)


@dataclass(frozen=True, eq=False)
class Correspondence:
    scan_point: np.ndarray
    target: np.ndarray
    normal: np.ndarray | None
    residual_kind: str
    distance: float


@dataclass(frozen=True, eq=False)
class Correspondences:
    """Struct-of-arrays correspondence batch, ordered by scan index.

    ``world`` holds the scan points mapped by the pose used for association;
    ``normals`` is NaN for point-to-point rows.
    """

    scan_index: np.ndarray
    scan_points: np.ndarray
    world: np.ndarray
    targets: np.ndarray
    normals: np.ndarray
    is_plane: np.ndarray
    distance: np.ndarray

    def __len__(self) -> int:
        return len(self.scan_index)

    def __iter__(self):
        for k in range(len(self)):
            plane = bool(self.is_plane[k])
            yield Correspondence(
                self.scan_points[k],
                self.targets[k],
                self.normals[k] if plane else None,
                POINT_TO_PLANE if plane else POINT_TO_POINT,
                float(self.distance[k]),
            )

    def moved(self, increment) -> "Correspondences":
        """Same association with world points left-multiplied by ``se3_exp(increment)``."""
        return Correspondences(
            self.scan_index,
            self.scan_points,
            se3_exp(increment).apply(self.world),
            self.targets,
            self.normals,
            self.is_plane,
            self.distance,
        )

    def residual_vectors(self) -> np.ndarray:
        e = self.world - self.targets
        if np.any(self.is_plane):
            n = self.normals[self.is_plane]
            e[self.is_plane] = n * np.einsum("ij,ij->i", n, e[self.is_plane])[:, None]
        return e

    def residual_norms(self) -> np.ndarray:
        return np.linalg.norm(self.residual_vectors(), axis=1)

    @classmethod
    def from_list(cls, items: list[Correspondence], pose: Pose | None = None) -> "Correspondences":
        pose = Pose.identity() if pose is None else pose
        scan = np.array([c.scan_point for c in items], dtype=float).reshape(-1, 3)
        normals = np.array(
            [c.normal if c.normal is not None else (np.nan,) * 3 for c in items], dtype=float
        ).reshape(-1, 3)
        return cls(
            np.arange(len(items)),
            scan,
            pose.apply(scan),
            np.array([c.target for c in items], dtype=float).reshape(-1, 3),
            normals,
            np.array([c.residual_kind == POINT_TO_PLANE for c in items], dtype=bool),
            np.array([c.distance for c in items], dtype=float),
        )


def associate(scan, map_: VoxelHashMap, tau_t: float, pose: Pose | None = None) -> Correspondences:
    """Hybrid point/surfel association.

    ``scan`` is in the sensor frame and mapped by ``pose`` (identity if
    omitted, i.e. the scan is already in the world frame).  The surfel
    candidate uses the plane distance ``|n . (p - q)|`` and requires its anchor
    within ``3 tau_t``; the candidate with the smaller residual wins and is
    kept only when that residual is at most ``tau_t``.
    """
    if tau_t <= 0:
        raise ValueError("tau_t must be positive")
    pts = scan.positions if isinstance(scan, PointCloud) else np.asarray(scan, dtype=float).reshape(-1, 3)
    pose = Pose.identity() if pose is None else pose
    world = pose.apply(pts)
    q_pt, d_pt = map_.nearest_points(world, tau_t)
    anchors, normals, d_anchor = map_.nearest_surfels(world, ANCHOR_GATE * tau_t)
    has_surfel = np.isfinite(d_anchor)
    d_plane = np.full(len(world), np.inf)
    d_plane[has_surfel] = np.abs(np.einsum("ij,ij->i", normals[has_surfel], world[has_surfel] - anchors[has_surfel]))
    use_plane = d_plane < d_pt
    dist = np.where(use_plane, d_plane, d_pt)
    keep = dist <= tau_t
    idx = np.flatnonzero(keep)
    targets = np.where(use_plane[:, None], anchors, q_pt)[idx]
    nrm = np.where(use_plane[:, None], normals, np.nan)[idx]
    return Correspondences(idx, pts[idx], world[idx], targets, nrm, use_plane[idx], dist[idx])


def gm_weight(e, sigma_t: float):
    """IRLS weight ``1 / (sigma_t/3 + e^2)^2`` for a residual of norm ``e``."""
    if sigma_t <= 0:
        raise ValueError("sigma_t must be positive")
    e = np.asarray(e, dtype=float)
    w = 1.0 / (sigma_t / 3.0 + e**2) ** 2
    return float(w) if w.ndim == 0 else w


def gm_rho(e, sigma_t: float):
    """Geman-McClure cost ``(e^2 / 2) / (sigma_t/3 + e^2)``."""
    e = np.asarray(e, dtype=float)
    r = 0.5 * e**2 / (sigma_t / 3.0 + e**2)
    return float(r) if r.ndim == 0 else r


def jacobian_p2p(p, pose: Pose) -> np.ndarray:
    """d(Rp + t - q)/d(xi) = [I | -(Rp + t)^]."""
    w = pose.apply(np.asarray(p, dtype=float))
    return np.hstack([np.eye(3), -hat(w)])


def jacobian_p2l(p, n, pose: Pose) -> np.ndarray:
    """d(n n^T (Rp + t - q))/d(xi) = [n n^T | -n n^T (Rp + t)^]."""
    n = np.asarray(n, dtype=float)
    if abs(np.linalg.norm(n) - 1.0) > 1e-6:
        raise NonUnitNormal(f"|n| = {np.linalg.norm(n)}")
    N = np.outer(n, n)
    return N @ jacobian_p2p(p, pose)


def _stacked_jacobians(c: Correspondences) -> np.ndarray:
    m = len(c)
    J = np.zeros((m, 3, 6))
    J[:, 0, 0] = J[:, 1, 1] = J[:, 2, 2] = 1.0
    x, y, z = c.world.T
    # -hat(w)
    J[:, 0, 4], J[:, 0, 5] = z, -y
    J[:, 1, 3], J[:, 1, 5] = -z, x
    J[:, 2, 3], J[:, 2, 4] = y, -x
    if np.any(c.is_plane):
        n = c.normals[c.is_plane]
        N = n[:, :, None] * n[:, None, :]
        J[c.is_plane] = N @ J[c.is_plane]
    return J


def normal_equations(c: Correspondences, sigma_t: float):
    """Weighted ``H = sum w J^T J`` and ``g = sum w J^T e``."""
    J = _stacked_jacobians(c)
    e = c.residual_vectors()
    w = gm_weight(np.linalg.norm(e, axis=1), sigma_t)
    H = np.einsum("m,mki,mkj->ij", w, J, J)
    g = np.einsum("m,mki,mk->i", w, J, e)
    return H, g


def gauss_newton_step(c: Correspondences, sigma_t: float) -> Twist:
    """Solve ``H dxi = -g``; damp only when cond(H) > 1e12."""
    if len(c) == 0:
        raise NoCorrespondences("Gauss-Newton step without correspondences")
    H, g = normal_equations(c, sigma_t)
    eig = np.linalg.eigvalsh(H)
    top = eig[-1]
    if top <= 0 or eig[0] <= SINGULAR_RATIO * top:
        raise SingularSystem(f"normal matrix is rank deficient (eigenvalues {eig})")
    if top / eig[0] > DAMPING_CONDITION:
        H = H + DAMPING_MU * np.linalg.norm(np.diag(H)) * np.eye(6)
    return Twist.from_vector(np.linalg.solve(H, -g))


def robust_objective(c: Correspondences, sigma_t: float) -> float:
    return float(np.sum(gm_rho(c.residual_norms(), sigma_t)))


@dataclass(frozen=True)
class IcpParams:
    eps_conv: float = DEFAULT_EPS_CONV
    max_iters: int = DEFAULT_MAX_ITERS
    max_halvings: int = MAX_HALVINGS


@dataclass(frozen=True)
class IterationStats:
    correspondences: int
    point_to_plane: int
    rms: float
    objective: float
    step_norm: float
    halvings: int


@dataclass
class IcpReport:
    iterations: list[IterationStats] = field(default_factory=list)
    converged: bool = False

    @property
    def num_iterations(self) -> int:
        return len(self.iterations)


def _pose_gap(a: Pose, b: Pose) -> float:
    d = a.inverse().compose(b)
    return float(np.hypot(np.linalg.norm(d.translation), d.angle))


def register_scan_to_map(
    scan,
    map_: VoxelHashMap,
    initial_guess: Pose,
    state: ThresholdState,
    params: IcpParams = IcpParams(),
) -> tuple[Pose, IcpReport]:
    """Alternate association and robust Gauss-Newton until the update norm
    drops below ``eps_conv``.  Steps that raise the robust objective over the
    current association are halved (at most ``max_halvings`` times)."""
    pts = scan.positions if isinstance(scan, PointCloud) else np.asarray(scan, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("empty scan")
    pose = initial_guess
    sigma = state.sigma_t
    report = IcpReport()
    history: list[tuple[Pose, float]] = []
    for it in range(params.max_iters):
        corr = associate(pts, map_, state.tau_t, pose)
        if len(corr) == 0:
            if it == 0:
                raise NoCorrespondences("no map correspondences within the threshold")
            break
        before = robust_objective(corr, sigma)
        xi = gauss_newton_step(corr, sigma)
        halvings = 0
        while robust_objective(corr.moved(xi), sigma) > before and halvings < params.max_halvings:
            xi = xi.scaled(0.5)
            halvings += 1
        rejected = robust_objective(corr.moved(xi), sigma) > before
        if rejected:
            xi = Twist.zero()
        pose = apply_increment(pose, xi)
        e = corr.residual_norms()
        report.iterations.append(
            IterationStats(
                len(corr),
                int(corr.is_plane.sum()),
                float(np.sqrt(np.mean(e**2))),
                before,
                xi.norm(),
                halvings,
            )
        )
        if rejected:
            break
        if xi.norm() < params.eps_conv:
            report.converged = True
            break
        # a point flipping between two targets makes the pose alternate; stop at the better end
        history.append((pose, before))
        if len(history) >= 3 and _pose_gap(history[-1][0], history[-3][0]) < params.eps_conv:
            pose = min(history[-2:], key=lambda h: h[1])[0]
            report.converged = True
            break
    return pose, report
