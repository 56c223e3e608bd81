"""Descriptor matching and RANSAC rigid registration (scan-to-scan front end)."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .cloud import PointCloud
from .errors import DegenerateConfiguration, NoConsensus, NoValidDescriptors, TooFewCandidates
from .features import FeatureSet
from .geometry import Pose

DEFAULT_INLIER_THRESHOLD = 0.6
DEFAULT_CONFIDENCE = 0.999
DEFAULT_MAX_ITERATIONS = 50_000
MIN_TRIANGLE_AREA = 1e-6
_BLOCK = 1024
_HYPOTHESIS_BATCH = 256

# global cap on worker threads; the CLI sets this from --threads
max_workers = 1


class MatchCandidate(NamedTuple):
    src_index: int
    dst_index: int
    desc_distance: float


@dataclass(frozen=True, eq=False)
class RansacResult:
    pose: Pose
    inlier_indices: np.ndarray
    iterations_run: int


def _nearest(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Index of the nearest row of ``b`` for every row of ``a`` (lowest index on ties)."""
    b_sq = np.einsum("ij,ij->i", b, b)

    def block(lo):
        blk = a[lo : lo + _BLOCK]
        d2 = b_sq[None, :] - 2.0 * blk @ b.T
        return np.argmin(d2, axis=1)

    starts = range(0, len(a), _BLOCK)
    if max_workers > 1 and len(a) > _BLOCK:
        with ThreadPoolExecutor(max_workers) as pool:
            parts = list(pool.map(block, starts))
    else:
        parts = [block(lo) for lo in starts]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)


def match_descriptors(fs_src: FeatureSet, fs_dst: FeatureSet, mode: str = "mutual") -> list[MatchCandidate]:
    """Exhaustive nearest-neighbor matching in descriptor space.

    ``mode`` is ``"mutual"`` (reciprocal nearest neighbors only) or
    ``"one-way"`` (every valid source descriptor to its nearest target).
    Unmatched-flagged (zero) descriptors are ignored on both sides.
    """
    if mode not in ("mutual", "one-way"):
        raise ValueError(f"unknown matching mode {mode!r}")
    src_ids = np.flatnonzero(fs_src.valid)
    dst_ids = np.flatnonzero(fs_dst.valid)
    if len(src_ids) == 0 or len(dst_ids) == 0:
        raise NoValidDescriptors("no valid descriptors on one side")
    A = fs_src.descriptors[src_ids]
    B = fs_dst.descriptors[dst_ids]
    fwd = _nearest(A, B)
    keep = np.arange(len(A))
    if mode == "mutual":
        back = _nearest(B, A)
        keep = keep[back[fwd] == keep]
    dist = np.linalg.norm(A[keep] - B[fwd[keep]], axis=1)
    return [
        MatchCandidate(int(s), int(d), float(e))
        for s, d, e in zip(src_ids[keep], dst_ids[fwd[keep]], dist)
    ]


def _kabsch_batch(src: np.ndarray, dst: np.ndarray):
    """Least-squares rotations/translations for a batch of (B, K, 3) pairs."""
    cs = src.mean(axis=1, keepdims=True)
    cd = dst.mean(axis=1, keepdims=True)
    H = np.einsum("bki,bkj->bij", src - cs, dst - cd)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(np.einsum("bij,bjk->bik", U, Vt)))
    d[d == 0] = 1.0
    D = np.ones((len(src), 3))
    D[:, 2] = d
    R = np.einsum("bji,bj,bkj->bik", Vt, D, U)
    t = cd[:, 0, :] - np.einsum("bij,bj->bi", R, cs[:, 0, :])
    return R, t


def kabsch_svd(src_points, dst_points) -> Pose:
    """Rigid pose minimizing sum |R p_i + t - q_i|^2 with det(R) = +1."""
    src = np.asarray(src_points, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst_points, dtype=float).reshape(-1, 3)
    if len(src) != len(dst):
        raise ValueError("source and target must be paired")
    if len(src) < 3:
        raise DegenerateConfiguration(f"need >= 3 pairs, got {len(src)}")
    centered = src - src.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    if s[1] <= 1e-9 * max(s[0], 1.0):
        raise DegenerateConfiguration("source points are collinear")
    R, t = _kabsch_batch(src[None], dst[None])
    return Pose(R[0], t[0])


def _triangle_area(p: np.ndarray) -> np.ndarray:
    return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)


def _edge_lengths(p: np.ndarray) -> np.ndarray:
    return np.linalg.norm(p[:, [1, 2, 2]] - p[:, [0, 0, 1]], axis=2)


def _required_iterations(inlier_ratio: np.ndarray, confidence: float) -> np.ndarray:
    w3 = np.clip(inlier_ratio, 0.0, 1.0) ** 3
    with np.errstate(divide="ignore"):
        out = math.log(1.0 - confidence) / np.log1p(-np.minimum(w3, 1.0 - 1e-16))
    return np.where(w3 >= 1.0, 1.0, np.where(w3 <= 0.0, np.inf, out))


def _candidate_arrays(candidates) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(candidates, np.ndarray):
        arr = np.asarray(candidates)
        return arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64)
    src = np.fromiter((c[0] for c in candidates), dtype=np.int64, count=len(candidates))
    dst = np.fromiter((c[1] for c in candidates), dtype=np.int64, count=len(candidates))
    return src, dst


def _distinct_triples(rng: np.random.Generator, n: int, size: int) -> np.ndarray:
    # draw from shrinking ranges and shift past already-drawn values
    i = rng.integers(0, n, size)
    j = rng.integers(0, n - 1, size)
    j += j >= i
    k = rng.integers(0, n - 2, size)
    lo, hi = np.minimum(i, j), np.maximum(i, j)
    k += k >= lo
    k += k >= hi
    return np.stack([i, j, k], axis=1)


def ransac_register(
    candidates: Sequence[MatchCandidate] | np.ndarray,
    src_cloud,
    dst_cloud,
    max_iterations: int = DEFAULT_MAX_ITERATIONS,
    inlier_threshold: float = DEFAULT_INLIER_THRESHOLD,
    confidence: float = DEFAULT_CONFIDENCE,
    seed: int = 0,
) -> RansacResult:
    """Estimate the pose mapping source points onto their matched targets.

    Hypotheses come from 3-candidate samples drawn by a seeded generator; the
    best by inlier count (lowest hypothesis index on ties) is refined with
    Kabsch over its inliers and re-scored once.  Sampling stops as soon as the
    standard ``log(1-confidence) / log(1-w^3)`` bound is met.
    """
    if not 0.0 < confidence < 1.0:
        raise ValueError("confidence must lie in (0, 1)")
    n = len(candidates)
    if n < 3:
        raise TooFewCandidates(f"RANSAC needs >= 3 candidates, got {n}")
    si, di = _candidate_arrays(candidates)
    src_all = src_cloud.positions if isinstance(src_cloud, PointCloud) else np.asarray(src_cloud, dtype=float)
    dst_all = dst_cloud.positions if isinstance(dst_cloud, PointCloud) else np.asarray(dst_cloud, dtype=float)
    src, dst = src_all[si], dst_all[di]
    thr2 = inlier_threshold**2

    rng = np.random.default_rng(seed)
    best_count, best_R, best_t = -1, None, None
    needed = float(max_iterations)
    it = 0
    while it < min(needed, max_iterations):
        batch = int(min(_HYPOTHESIS_BATCH, max_iterations - it))
        # three distinct candidates per hypothesis
        picks = _distinct_triples(rng, n, batch)
        sp, dp = src[picks], dst[picks]
        ok = (_triangle_area(sp) > MIN_TRIANGLE_AREA) & (_triangle_area(dp) > MIN_TRIANGLE_AREA)
        # a rigid motion placing all three within the threshold changes no
        # edge length by more than twice the threshold
        ok &= np.all(np.abs(_edge_lengths(sp) - _edge_lengths(dp)) <= 2.0 * inlier_threshold, axis=1)
        R, t = _kabsch_batch(sp, dp)
        counts = np.full(batch, -1, dtype=np.int64)
        live = np.flatnonzero(ok)
        if len(live):
            # one GEMM for all live hypotheses: (n, 3) @ (3, 3L)
            moved = (src @ R[live].transpose(2, 0, 1).reshape(3, -1)).reshape(n, len(live), 3) + t[live]
            counts[live] = (np.sum((moved - dst[:, None, :]) ** 2, axis=2) <= thr2).sum(axis=0)
        # replay the sequential best/early-exit logic over the batch
        prefix = np.maximum.accumulate(np.r_[best_count, counts])[1:]
        improved = counts > np.r_[best_count, prefix[:-1]]
        needed_after = np.where(prefix > max(best_count, 0), _required_iterations(prefix / n, confidence), needed)
        stop = np.flatnonzero(it + np.arange(1, batch + 1) >= needed_after)
        last = int(stop[0]) if len(stop) else batch - 1
        upto = np.flatnonzero(improved[: last + 1])
        if len(upto):
            b = int(upto[-1])
            best_count, best_R, best_t = int(counts[b]), R[b], t[b]
            needed = float(_required_iterations(np.array(best_count / n), confidence))
        it += last + 1
        if len(stop):
            break

    if best_count < 3:
        raise NoConsensus(f"best hypothesis has {max(best_count, 0)} inliers")

    def inliers_of(R, t):
        res = np.sum((src @ R.T + t - dst) ** 2, axis=1)
        return np.flatnonzero(res <= thr2), res

    raw_inl, _ = inliers_of(best_R, best_t)
    try:
        refined = kabsch_svd(src[raw_inl], dst[raw_inl])
    except DegenerateConfiguration:
        return RansacResult(Pose(best_R, best_t), raw_inl, it)
    final_inl, res_ref = inliers_of(refined.rotation, refined.translation)
    _, res_raw = inliers_of(best_R, best_t)
    # refinement must not make the final inlier set fit worse than the raw sample model
    if len(final_inl) < 3 or res_ref[final_inl].mean() > res_raw[final_inl].mean():
        return RansacResult(Pose(best_R, best_t), raw_inl, it)
    return RansacResult(refined, final_inl, it)
