"""Rigid transforms, the small slice of Lie-group machinery the pipeline needs,
and the point-deviation bound that drives the adaptive ICP threshold.

Pose updates use the left perturbation ``T <- [exp(phi^) | rho] * T``, i.e.
``R <- exp(phi^) R`` and ``t <- exp(phi^) t + rho``.  This is the model under
which the registration Jacobians ``[I | -(Rp + t)^]`` are exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_SMALL_ANGLE = 1e-8


def hat(v) -> np.ndarray:
    """Skew-symmetric matrix such that ``hat(v) @ w == cross(v, w)``."""
    x, y, z = np.asarray(v, dtype=float).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float).reshape(3)
    theta = float(np.linalg.norm(phi))
    K = hat(phi)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * K @ K
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * K + b * K @ K


def so3_exp_batch(rotvecs) -> np.ndarray:
    """Rodrigues formula for an (N, 3) array of rotation vectors -> (N, 3, 3)."""
    phi = np.asarray(rotvecs, dtype=float).reshape(-1, 3)
    theta = np.linalg.norm(phi, axis=1)
    K = np.zeros((len(phi), 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -phi[:, 2], phi[:, 1]
    K[:, 1, 0], K[:, 1, 2] = phi[:, 2], -phi[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -phi[:, 1], phi[:, 0]
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0, np.sin(safe) / safe)
    b = np.where(small, 0.5, (1.0 - np.cos(safe)) / safe**2)
    return np.eye(3) + a[:, None, None] * K + b[:, None, None] * (K @ K)


def so3_log(R) -> np.ndarray:
    """Rotation vector (axis * angle) of a rotation matrix."""
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = float(np.arccos(cos_theta))
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-6:
        return 0.5 * w
    if np.pi - theta < 1e-6:
        # axis from the symmetric part; sign is arbitrary at exactly pi
        B = 0.5 * (R + np.eye(3))
        axis = np.sqrt(np.clip(np.diag(B), 0.0, None))
        k = int(np.argmax(axis))
        axis[(k + 1) % 3] = np.copysign(axis[(k + 1) % 3], B[k, (k + 1) % 3])
        axis[(k + 2) % 3] = np.copysign(axis[(k + 2) % 3], B[k, (k + 2) % 3])
        return theta * axis / np.linalg.norm(axis)
    return theta / (2.0 * np.sin(theta)) * w


def orthonormalize(R) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=float))
    if np.linalg.det(U @ Vt) < 0:
        U[:, -1] = -U[:, -1]
    return U @ Vt


def rotation_angle(R) -> float:
    """Geodesic angle of a rotation matrix in radians.

    Equals ``arccos(clamp((tr R - 1) / 2))`` but is evaluated as an ``atan2``
    of the sine and cosine parts, which keeps full precision near zero where
    the trace form rounds small angles away.
    """
    R = np.asarray(R, dtype=float)
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    s = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.arctan2(s, c))


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``p -> R p + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_translation(cls, t) -> "Pose":
        return cls(np.eye(3), t)

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(so3_exp(rotvec), translation)

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """``self * other``: apply ``other`` first, then ``self``.

        The product rotation is projected back onto SO(3) so that round-off
        cannot compound through long chains of compose/inverse.
        """
        return Pose(
            orthonormalize(self.rotation @ other.rotation),
            self.rotation @ other.translation + self.translation,
        )

    __matmul__ = compose

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.translation

    @property
    def angle(self) -> float:
        return rotation_angle(self.rotation)

    def quaternion(self) -> np.ndarray:
        """Unit quaternion ``(w, x, y, z)`` with ``w >= 0``, for file I/O."""
        R = self.rotation
        tr = np.trace(R)
        if tr > 0.0:
            s = 2.0 * np.sqrt(tr + 1.0)
            q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        else:
            i = int(np.argmax(np.diag(R)))
            j, k = (i + 1) % 3, (i + 2) % 3
            s = 2.0 * np.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
            q = np.empty(4)
            q[0] = (R[k, j] - R[j, k]) / s
            q[1 + i] = 0.25 * s
            q[1 + j] = (R[j, i] + R[i, j]) / s
            q[1 + k] = (R[k, i] + R[i, k]) / s
        q = np.asarray(q, dtype=float)
        q /= np.linalg.norm(q)
        return q if q[0] >= 0 else -q

    @classmethod
    def from_quaternion(cls, q, translation=(0.0, 0.0, 0.0)) -> "Pose":
        w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
        R = np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
                [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
                [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
            ]
        )
        return cls(R, translation)

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol, rtol=0.0)
            and np.allclose(self.translation, other.translation, atol=atol, rtol=0.0)
        )

    def __repr__(self) -> str:
        rv = so3_log(self.rotation)
        return f"Pose(rotvec={np.round(rv, 6).tolist()}, t={np.round(self.translation, 6).tolist()})"


@dataclass(frozen=True, eq=False)
class Twist:
    """6-vector perturbation: ``rho`` translational (m), ``phi`` rotational (rad)."""

    rho: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rho", np.array(self.rho, dtype=float).reshape(3))
        object.__setattr__(self, "phi", np.array(self.phi, dtype=float).reshape(3))

    @classmethod
    def from_vector(cls, xi) -> "Twist":
        xi = np.asarray(xi, dtype=float).reshape(6)
        return cls(xi[:3], xi[3:])

    @classmethod
    def zero(cls) -> "Twist":
        return cls(np.zeros(3), np.zeros(3))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rho, self.phi])

    def norm(self) -> float:
        return float(np.linalg.norm(self.as_vector()))

    def scaled(self, s: float) -> "Twist":
        return Twist(s * self.rho, s * self.phi)


def se3_exp(xi) -> Pose:
    """Perturbation transform ``[exp(phi^) | rho]``.

    The translational part is taken as-is rather than through the coupled
    SE(3) left Jacobian, matching the additive translation in the ICP model.
    """
    if not isinstance(xi, Twist):
        xi = Twist.from_vector(xi)
    return Pose(so3_exp(xi.phi), xi.rho)


def apply_increment(pose: Pose, xi) -> Pose:
    """Left-multiply ``pose`` by the perturbation ``se3_exp(xi)``."""
    return se3_exp(xi).compose(pose)


def deviation_bound(delta: Pose, r: float) -> float:
    """Upper bound on ``|dR p + dt - p|`` over all points with ``|p| <= r``."""
    if r <= 0:
        raise ValueError("r must be positive")
    theta = rotation_angle(delta.rotation)
    return float(np.linalg.norm(delta.translation) + 2.0 * r * np.sin(0.5 * theta))


def interpolate(pose: Pose, s: float) -> Pose:
    """Scale a motion by ``s``: rotation angle scaled about its axis,
    translation scaled linearly."""
    return Pose(so3_exp(s * so3_log(pose.rotation)), s * pose.translation)


def random_rotation(rng: np.random.Generator, max_angle: float | None = None) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    if max_angle is None:
        angle = rng.uniform(0.0, np.pi)
    else:
        angle = rng.uniform(0.0, max_angle)
    return so3_exp(angle * axis)


def random_pose(
    rng: np.random.Generator, max_angle: float | None = None, max_translation: float = 1.0
) -> Pose:
    return Pose(random_rotation(rng, max_angle), rng.uniform(-max_translation, max_translation, 3))
