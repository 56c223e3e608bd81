import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.linalg import expm

from kddloam.geometry import (
    Pose,
    Twist,
    apply_increment,
    deviation_bound,
    hat,
    interpolate,
    orthonormalize,
    random_pose,
    rotation_angle,
    se3_exp,
    so3_exp,
    so3_exp_batch,
    so3_log,
)

from strategies import poses, rotvecs, small_vec3, vec3


def series_expm(A, terms=20):
    out, term = np.eye(3), np.eye(3)
    for k in range(1, terms):
        term = term @ A / k
        out = out + term
    return out


class TestHat:
    def test_cross_identity(self):
        np.testing.assert_array_equal(hat([1, 0, 0]) @ [0, 1, 0], [0, 0, 1])

    def test_expanded_components(self):
        np.testing.assert_array_equal(hat([1, 2, 3]), [[0, -3, 2], [3, 0, -1], [-2, 1, 0]])

    @given(vec3, vec3)
    def test_matches_cross_and_is_skew(self, v, w):
        M = hat(v)
        np.testing.assert_allclose(M @ w, np.cross(v, w), atol=1e-9)
        np.testing.assert_array_equal(M.T, -M)
        np.testing.assert_allclose(M @ v, 0.0, atol=1e-9)


class TestExp:
    def test_zero_is_identity(self):
        p = se3_exp(np.zeros(6))
        assert p.allclose(Pose.identity(), atol=0.0)

    def test_pure_translation(self):
        p = se3_exp([1, 2, 3, 0, 0, 0])
        np.testing.assert_array_equal(p.rotation, np.eye(3))
        np.testing.assert_array_equal(p.translation, [1, 2, 3])

    def test_rotation_matches_series(self):
        p = se3_exp(Twist([0, 0, 0], [0, 0, 0.3]))
        np.testing.assert_allclose(p.rotation, series_expm(hat([0, 0, 0.3])), atol=1e-10, rtol=0)

    @given(rotvecs())
    def test_rodrigues_matches_scipy_expm(self, phi):
        np.testing.assert_allclose(so3_exp(phi), expm(hat(phi)), atol=1e-10)

    def test_small_angle_branch_is_continuous(self):
        eta = np.array([0.6, 0.0, 0.8])
        for eps in (1e-5, 1e-8, 1e-9, 1e-12):
            R = so3_exp(eps * eta)
            np.testing.assert_allclose(R, expm(hat(eps * eta)), atol=1e-15)
        assert np.linalg.norm(se3_exp(np.r_[1e-12 * eta, 1e-12 * eta]).as_matrix() - np.eye(4)) < 1e-11

    def test_batch_matches_single(self, rng):
        phis = rng.normal(size=(50, 3))
        phis[0] = 0.0
        phis[1] = 1e-10
        np.testing.assert_allclose(so3_exp_batch(phis), np.array([so3_exp(p) for p in phis]), atol=1e-14)

    @given(rotvecs())
    def test_log_inverts_exp(self, phi):
        np.testing.assert_allclose(so3_exp(so3_log(so3_exp(phi))), so3_exp(phi), atol=1e-8)

    def test_log_near_pi(self):
        phi = np.array([0.0, np.pi, 0.0])
        np.testing.assert_allclose(so3_exp(so3_log(so3_exp(phi))), so3_exp(phi), atol=1e-9)

    def test_apply_increment_is_left_perturbation(self, rng):
        pose = random_pose(rng, 1.0, 5.0)
        xi = rng.normal(scale=0.1, size=6)
        out = apply_increment(pose, xi)
        dR = so3_exp(xi[3:])
        np.testing.assert_allclose(out.rotation, dR @ pose.rotation, atol=1e-12)
        np.testing.assert_allclose(out.translation, dR @ pose.translation + xi[:3], atol=1e-12)


class TestPose:
    @given(poses())
    def test_rotation_is_proper(self, p):
        R = p.rotation
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)
        assert abs(np.linalg.det(R) - 1.0) < 1e-9

    @given(poses())
    def test_compose_inverse_is_identity(self, p):
        assert p.compose(p.inverse()).allclose(Pose.identity(), atol=1e-9)
        assert p.inverse().compose(p).allclose(Pose.identity(), atol=1e-9)

    @given(poses(), vec3, vec3)
    def test_preserves_distances(self, p, a, b):
        pa, pb = p.apply(np.array([a, b]))
        assert abs(np.linalg.norm(pa - pb) - np.linalg.norm(a - b)) < 1e-9

    @given(vec3, vec3)
    def test_pure_translation_displacement(self, t, p):
        moved = Pose.from_translation(t).apply(p)
        assert abs(np.linalg.norm(moved - p) - np.linalg.norm(t)) < 1e-9

    @given(poses(), poses(), vec3)
    def test_compose_applies_right_first(self, a, b, p):
        np.testing.assert_allclose(a.compose(b).apply(p), a.apply(b.apply(p)), atol=1e-8)

    @given(poses())
    def test_quaternion_round_trip(self, p):
        q = p.quaternion()
        assert abs(np.linalg.norm(q) - 1.0) < 1e-12 and q[0] >= 0
        np.testing.assert_allclose(Pose.from_quaternion(q).rotation, p.rotation, atol=1e-9)

    def test_matrix_round_trip(self, rng):
        p = random_pose(rng)
        assert Pose.from_matrix(p.as_matrix()).allclose(p, atol=0.0)

    def test_long_chains_stay_orthonormal(self, rng):
        step = random_pose(rng, 0.05, 1.0)
        prev = pose = Pose.identity()
        for _ in range(500):
            prev, pose = pose, pose.compose(step)
            step = prev.inverse().compose(pose)
        np.testing.assert_allclose(pose.rotation.T @ pose.rotation, np.eye(3), atol=1e-12)

    def test_orthonormalize_projects(self, rng):
        R = so3_exp(rng.normal(size=3)) + 1e-3 * rng.normal(size=(3, 3))
        Q = orthonormalize(R)
        np.testing.assert_allclose(Q.T @ Q, np.eye(3), atol=1e-12)
        assert np.linalg.det(Q) > 0

    def test_inputs_are_frozen(self):
        p = Pose.identity()
        with pytest.raises(ValueError):
            p.translation[0] = 1.0


class TestDeviationBound:
    def test_identity(self):
        assert deviation_bound(Pose.identity(), 100.0) == 0.0

    def test_pure_translation(self):
        assert deviation_bound(Pose.from_translation([3, 4, 0]), 100.0) == pytest.approx(5.0, abs=1e-12)

    def test_closed_form(self):
        d = Pose.from_rotvec([0, 0, 0.2], [1, 0, 0])
        assert deviation_bound(d, 50.0) == pytest.approx(1.0 + 100.0 * np.sin(0.1), rel=1e-12)

    def test_rejects_nonpositive_radius(self):
        with pytest.raises(ValueError):
            deviation_bound(Pose.identity(), 0.0)

    def test_clamps_trace_drift(self):
        R = np.eye(3) * (1 + 1e-12)
        assert deviation_bound(Pose(R, np.zeros(3)), 10.0) == 0.0

    @given(rotvecs(max_angle=0.2), small_vec3, st.integers(0, 2**31))
    def test_upper_bounds_sampled_displacement(self, phi, t, seed):
        rng = np.random.default_rng(seed)
        r = 50.0
        d = Pose(so3_exp(phi), t)
        u = rng.normal(size=(10_000, 3))
        p = u / np.linalg.norm(u, axis=1, keepdims=True) * r * rng.random((10_000, 1)) ** (1 / 3)
        p[0] = r * np.array([1.0, 0.0, 0.0])
        disp = np.linalg.norm(d.apply(p) - p, axis=1).max()
        assert disp <= deviation_bound(d, r) + 1e-9


def test_interpolate_endpoints(rng):
    m = random_pose(rng, 1.0, 3.0)
    assert interpolate(m, 0.0).allclose(Pose.identity(), atol=1e-12)
    assert interpolate(m, 1.0).allclose(m, atol=1e-9)
    half = interpolate(m, 0.5)
    assert half.compose(Pose(half.rotation, np.zeros(3))).rotation == pytest.approx(m.rotation, abs=1e-9)
    assert rotation_angle(half.rotation) == pytest.approx(0.5 * m.angle, abs=1e-12)
