"""Acceptance criteria: one PASS/FAIL line per criterion, with wall time.

Each test prints its verdict line before asserting, so a failing criterion
still reports its measured values.
"""

import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.spatial.distance import cdist

from kddloam.cloud import PointCloud
from kddloam.config import PipelineConfig
from kddloam.evaluation import kitti_rpe, path_distances
from kddloam.features import FeatureSet
from kddloam.geometry import Pose, apply_increment, deviation_bound, random_pose, so3_exp
from kddloam.icp import IcpParams, ThresholdState, jacobian_p2l, jacobian_p2p, register_scan_to_map
from kddloam.io import ScanSource, format_pose, read_poses
from kddloam.matchability import detection_loss_grad_sigma, exp_likelihood
from kddloam.matching import MatchCandidate, match_descriptors, ransac_register
from kddloam.odometry import run_sequence, subsample_stage1, subsample_stage2
from kddloam.synthetic import corridor_sequence, planar_heavy_points, room_scene
from kddloam.voxelmap import VoxelHashMap

from scenarios import pose_error, room_map, room_problem


@pytest.fixture
def verdict(capsys):
    def emit(name: str, ok: bool, elapsed: float, limit: float, detail: str) -> None:
        passed = ok and elapsed < limit
        line = f"{'PASS' if passed else 'FAIL'}  {name:<28} {elapsed:7.2f}s (limit {limit:g}s)  {detail}"
        with capsys.disabled():
            print("\n" + line)
        assert ok, line
        assert elapsed < limit, line

    return emit


def fd_jacobian(f, h=1e-6):
    return np.stack([(f(h * e) - f(-h * e)) / (2 * h) for e in np.eye(6)], axis=1)


def test_jacobian_suite(verdict):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        pose = random_pose(rng, np.pi, 10.0)
        p = rng.uniform(-20, 20, 3)
        q = rng.uniform(-20, 20, 3)
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        e_p2p = lambda xi: apply_increment(pose, xi).apply(p) - q  # noqa: E731
        e_p2l = lambda xi: np.outer(n, n) @ e_p2p(xi)  # noqa: E731
        worst = max(
            worst,
            np.abs(jacobian_p2p(p, pose) - fd_jacobian(e_p2p)).max(),
            np.abs(jacobian_p2l(p, n, pose) - fd_jacobian(e_p2l)).max(),
        )
    elapsed = time.perf_counter() - t0
    verdict("jacobians", worst <= 1e-6, elapsed, 1.0, f"max abs diff {worst:.2e} (tol 1e-6)")


def test_robust_icp_recovery(verdict):
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    room = room_map(rng)
    params = IcpParams(1e-4, 30)
    clean, noisy, iters = [], [], []
    for outliers, sink in ((0.0, clean), (0.2, noisy)):
        for _ in range(20):
            scan, T, init = room_problem(rng, outliers)
            pose, rep = register_scan_to_map(scan, room, init, ThresholdState.initial(), params)
            sink.append(pose_error(pose, T))
            iters.append(rep.num_iterations)
    elapsed = time.perf_counter() - t0
    c = np.max(clean, axis=0)
    o = np.max(noisy, axis=0)
    ok = c[0] < 0.05 and c[1] < 0.01 and o[0] < 0.2 and o[1] < 0.03 and max(iters) <= 30
    verdict(
        "icp room recovery",
        ok,
        elapsed,
        10.0,
        f"worst clean {c[0]:.4f} deg / {c[1]:.4f} m, worst 20% outliers {o[0]:.4f} deg / {o[1]:.4f} m, "
        f"max iterations {max(iters)}",
    )


def test_deviation_bound_property(verdict):
    rng = np.random.default_rng(11)
    r = 50.0
    t0 = time.perf_counter()
    violations = 0
    for _ in range(100):
        dT = random_pose(rng, 0.5, 2.0)
        d = rng.normal(size=(10_000, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        # half on the sphere of radius r, half inside the ball
        radii = np.where(np.arange(10_000) % 2 == 0, r, r * rng.random(10_000) ** (1 / 3))
        pts = d * radii[:, None]
        disp = np.linalg.norm(dT.apply(pts) - pts, axis=1).max()
        violations += disp > deviation_bound(dT, r) * (1 + 1e-12)
    elapsed = time.perf_counter() - t0
    verdict("deviation bound", violations == 0, elapsed, 2.0, f"{violations} violations in 100 x 10^4 points")


def test_loss_optimality(verdict):
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    m = np.exp(rng.uniform(np.log(1e-2), np.log(10.0), 1000))
    # a 200-point log grid spanning two decades either side of m, randomly offset
    lo = np.log(m) - 2 * np.log(10) + rng.uniform(0, 0.05, 1000)
    step = 4 * np.log(10) / 199
    grid = np.exp(lo[:, None] + step * np.arange(200))
    nll = -np.log(exp_likelihood(m[:, None], grid))
    best = grid[np.arange(1000), np.argmin(nll, axis=1)]
    grid_ok = np.all(np.abs(np.log(best) - np.log(m)) <= step + 1e-12)
    h = 1e-6
    fd = (-np.log(exp_likelihood(m, m + h)) + np.log(exp_likelihood(m, m - h))) / (2 * h)
    fd_worst = float(np.abs(fd).max())
    analytic_worst = float(np.abs(detection_loss_grad_sigma(m, m)).max())
    elapsed = time.perf_counter() - t0
    verdict(
        "loss optimality",
        grid_ok and fd_worst <= 1e-6 and analytic_worst <= 1e-12,
        elapsed,
        2.0,
        f"grid argmin within one step: {grid_ok}, max |FD derivative| at sigma=m {fd_worst:.2e}",
    )


def _mutual_oracle(A, B):
    D = cdist(A, B)
    fwd = np.argmin(D, axis=1)
    back = np.argmin(D, axis=0)
    return [(i, int(j)) for i, j in enumerate(fwd) if back[j] == i]


def _bucket_oracle(P, v):
    out = {}
    for i, p in enumerate(P):
        out.setdefault(tuple(math.floor(c / v) for c in p), []).append(i)
    return out


def _stage1_oracle(P, a):
    best = {}
    for i, p in enumerate(P):
        k = tuple(math.floor(c / a) for c in p)
        d = math.dist(p, [(c + 0.5) * a for c in k])
        if k not in best or (d, i) < best[k]:
            best[k] = (d, i)
    return sorted(i for _, i in best.values())


def _stage2_oracle(P, sigma, b, keep, k_sal):
    n_keep = max(1, math.ceil(keep * len(P) - 1e-9))
    cut = sorted(sigma)[n_keep - 1]
    groups = {}
    for i, p in enumerate(P):
        if sigma[i] <= cut:
            k = tuple(math.floor(c / b) for c in p)
            groups.setdefault(k, []).append((sigma[i], math.dist(p, [(c + 0.5) * b for c in k]), i))
    return sorted(i for g in groups.values() for *_, i in sorted(g)[:k_sal])


def test_bruteforce_equivalence(verdict):
    rng = np.random.default_rng(99)
    t0 = time.perf_counter()
    failures = []
    sizes = []
    for inst in range(20):
        n = int(rng.integers(500, 5001))
        sizes.append(n)
        # mutual nearest neighbors in descriptor space
        A = rng.normal(size=(n, 16))
        B = rng.normal(size=(int(rng.integers(500, 5001)), 16))
        A /= np.linalg.norm(A, axis=1, keepdims=True)
        B /= np.linalg.norm(B, axis=1, keepdims=True)
        got = [(c.src_index, c.dst_index) for c in match_descriptors(FeatureSet(A, np.ones(len(A))), FeatureSet(B, np.ones(len(B))))]
        if got != _mutual_oracle(A, B):
            failures.append(f"{inst}:matching")
        # voxel bucketing (raw points, no cap, no surfels)
        P = rng.uniform(-15, 15, (n, 3)) * [1, 1, 0.3]
        m = VoxelHashMap(1.0, 10**9, min_point_spacing=0.0, fit_surfels=False)
        m.insert_points(P)
        buckets = {k: [tuple(p) for p in vox.points] for k, vox in m.items()}
        if buckets != {k: [tuple(P[i]) for i in v] for k, v in _bucket_oracle(P, 1.0).items()}:
            failures.append(f"{inst}:bucketing")
        # nearest point / nearest surfel against linear scans
        sm = VoxelHashMap(1.0, 20, min_point_spacing=0.0)
        sm.insert_points(room_scene().sample(rng, 30_000))
        sm.insert_points(P)
        pts = sm.point_array()
        anchors = np.array([s.anchor for s in sm.surfels()]).reshape(-1, 3)
        Q = rng.uniform(-12, 12, (200, 3)) * [1, 1, 0.4] + [0, 0, 1]
        dp, ds = cdist(Q, pts), cdist(Q, anchors)
        for q, rowp, rows in zip(Q, dp, ds):
            hit = sm.nearest_point(q, 1.0)
            exp_p = None if rowp.min() > 1.0 else pts[np.argmin(rowp)]
            if (hit is None) != (exp_p is None) or (hit is not None and not np.array_equal(hit[0], exp_p)):
                failures.append(f"{inst}:nearest_point")
                break
            hs = sm.nearest_surfel(q, 2.0)
            exp_s = None if rows.min() > 2.0 else anchors[np.argmin(rows)]
            if (hs is None) != (exp_s is None) or (hs is not None and not np.array_equal(hs[0].anchor, exp_s)):
                failures.append(f"{inst}:nearest_surfel")
                break
        # two-stage subsampling
        if subsample_stage1(PointCloud(P), 0.5).index.tolist() != _stage1_oracle(P, 0.5):
            failures.append(f"{inst}:stage1")
        sigma = rng.choice([0.05, 0.2, 0.5, 1.0], n)
        got2 = subsample_stage2(PointCloud(P, saliency=sigma), 1.5, 0.7, 3).index.tolist()
        if got2 != _stage2_oracle(P, sigma, 1.5, 0.7, 3):
            failures.append(f"{inst}:stage2")
    elapsed = time.perf_counter() - t0
    verdict(
        "brute-force equivalence",
        not failures,
        elapsed,
        30.0,
        f"20 instances, N in [{min(sizes)}, {max(sizes)}], mismatches: {failures or 'none'}",
    )


def test_ransac_contamination(verdict):
    t0 = time.perf_counter()
    scene = room_scene(size=50.0, height=8.0)
    worst = (0.0, 0.0)
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        n = 1000
        src = scene.sample(rng, n)
        T = random_pose(rng, np.pi, 20.0)
        dst = T.apply(src) + rng.normal(scale=0.02, size=src.shape)
        # 60% wrong matches: each paired with some other scene point
        wrong = rng.permutation(n)[: int(0.6 * n)]
        dst[wrong] = T.apply(scene.sample(rng, len(wrong)))
        cands = [MatchCandidate(i, i, 0.0) for i in range(n)]
        res = ransac_register(cands, src, dst, seed=seed)
        err = pose_error(res.pose, T)
        worst = (max(worst[0], err[0]), max(worst[1], err[1]))
    elapsed = time.perf_counter() - t0
    verdict(
        "ransac contamination",
        worst[0] < 0.5 and worst[1] < 0.1,
        elapsed,
        20.0,
        f"worst of 20 seeds {worst[0]:.4f} deg / {worst[1]:.4f} m (60% outliers, 50 m scene)",
    )


def test_surfel_memory(verdict):
    t0 = time.perf_counter()
    pts = planar_heavy_points(np.random.default_rng(0), 40_000, plane_fraction=0.7)
    with_surfels = VoxelHashMap(1.0, 20)
    with_surfels.insert_points(pts)
    raw_only = VoxelHashMap(1.0, 20, fit_surfels=False)
    raw_only.insert_points(pts)
    reduction = 1.0 - with_surfels.memory_usage() / raw_only.memory_usage()
    elapsed = time.perf_counter() - t0
    verdict(
        "surfel memory",
        reduction >= 0.15,
        elapsed,
        10.0,
        f"{with_surfels.memory_usage()} vs {raw_only.memory_usage()} bytes: {100 * reduction:.1f}% less (need >= 15%)",
    )


def test_corridor_odometry(verdict):
    t0 = time.perf_counter()
    scans, gt = corridor_sequence(50, seed=0)
    config = PipelineConfig()
    first = run_sequence(config, scans)
    second = run_sequence(config, scans)
    elapsed = time.perf_counter() - t0
    path = path_distances(gt)[-1]
    drift = np.linalg.norm(first.trajectory[-1].translation - gt[-1].translation) / path
    bytes_a = "".join(format_pose(p) + "\n" for p in first.trajectory).encode()
    bytes_b = "".join(format_pose(p) + "\n" for p in second.trajectory).encode()
    identical = bytes_a == bytes_b
    verdict(
        "corridor odometry",
        drift < 0.01 and identical,
        elapsed,
        120.0,
        f"final drift {100 * drift:.3f}% of {path:.1f} m, rerun byte-identical: {identical}",
    )


def test_evaluator_golden(verdict):
    t0 = time.perf_counter()
    gt = [Pose(np.eye(3), [float(i), 0.0, 0.0]) for i in range(1001)]
    est = [Pose(np.eye(3), [1.01 * i, 0.0, 0.0]) for i in range(1001)]
    rep = kitti_rpe(gt, est)
    elapsed = time.perf_counter() - t0
    verdict(
        "evaluator golden",
        abs(rep.t_err - 1.0) <= 0.01 and rep.r_err == 0.0,
        elapsed,
        1.0,
        f"t_err {rep.t_err:.6f}% r_err {rep.r_err}",
    )


def _kitti_07():
    root = os.environ.get("KITTI_ROOT")
    if not root:
        return None
    seq = Path(root) / "sequences" / "07" / "velodyne"
    poses = Path(root) / "poses" / "07.txt"
    return (seq, poses) if seq.is_dir() and poses.is_file() else None


def test_kitti_smoke(capsys):
    found = _kitti_07()
    if found is None:
        with capsys.disabled():
            print("\nSKIP  kitti 07 smoke (optional: set KITTI_ROOT to a KITTI odometry tree)")
        pytest.skip("KITTI sequence 07 not available")
    seq, pose_file = found
    t0 = time.perf_counter()
    source = ScanSource.from_directory(seq)
    result = run_sequence(PipelineConfig(), source.scans())
    gt = read_poses(pose_file)
    rep = kitti_rpe(gt, result.trajectory) if len(gt) == len(result.trajectory) else None
    elapsed = time.perf_counter() - t0
    ok = rep is not None and rep.t_err < 5.0
    detail = f"t_err {rep.t_err:.3f}%" if rep else f"{len(result.trajectory)} poses vs {len(gt)} ground truth"
    line = f"{'PASS' if ok else 'FAIL'}  {'kitti 07 smoke':<28} {elapsed:7.2f}s  {detail}"
    with capsys.disabled():
        print("\n" + line)
    assert ok, line
