"""Odometry pipeline: deskew, two-stage subsampling, RANSAC scan-to-scan guess,
robust scan-to-map refinement, and map update."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import features as feat
from .cloud import PointCloud, crop_by_range
from .config import PipelineConfig
from .errors import (
    MissingSaliency,
    NoConsensus,
    NoCorrespondences,
    NoValidDescriptors,
    SingularSystem,
    TooFewCandidates,
)
from .features import FeatureSet
from .geometry import Pose, deviation_bound, so3_exp_batch, so3_log
from .icp import IcpParams, ThresholdState, register_scan_to_map, update_threshold
from .matching import match_descriptors, ransac_register
from .voxelmap import VoxelHashMap

log = logging.getLogger(__name__)


def deskew(scan: PointCloud, relative_motion: Pose) -> PointCloud:
    """Constant-velocity motion compensation into the scan-end frame.

    A point stamped ``s`` is moved by the motion scaled to ``s - 1`` (rotation
    angle scaled about its axis, translation scaled linearly); points with
    ``s = 1`` are left bit-identical.
    """
    if len(scan) == 0:
        return scan
    f = scan.timestamps - 1.0
    R = so3_exp_batch(f[:, None] * so3_log(relative_motion.rotation))
    moved = np.einsum("nij,nj->ni", R, scan.positions) + f[:, None] * relative_motion.translation
    end = scan.timestamps == 1.0
    moved[end] = scan.positions[end]
    return scan.with_positions(moved)


def _group(keys: np.ndarray) -> np.ndarray:
    return np.unique(keys, axis=0, return_inverse=True)[1].reshape(-1)


def subsample_stage1(cloud: PointCloud, alpha_v: float) -> PointCloud:
    """One original point per occupied voxel of size ``alpha_v``: the one
    nearest the voxel center (lowest index on ties), in input order."""
    if alpha_v <= 0:
        raise ValueError("voxel size must be positive")
    if len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.positions / alpha_v).astype(np.int64)
    d = np.linalg.norm(cloud.positions - (keys + 0.5) * alpha_v, axis=1)
    group = _group(keys)
    order = np.lexsort((np.arange(len(cloud)), d, group))
    first = np.r_[True, group[order][1:] != group[order][:-1]]
    return cloud.select(np.sort(order[first]))


def saliency_cut(saliency: np.ndarray, keep_fraction: float) -> float:
    """Largest saliency value that survives the global rank filter."""
    n_keep = max(1, int(np.ceil(keep_fraction * len(saliency) - 1e-9)))
    return float(np.sort(saliency)[n_keep - 1])


def subsample_stage2(
    cloud: PointCloud,
    beta_v: float,
    keep_fraction: float = 0.7,
    k_salient: int | float = 3,
) -> PointCloud:
    """Saliency-aware voxel subsampling.

    Points ranked in the least-salient ``1 - keep_fraction`` tail (highest
    sigma) are dropped; points tied with the last kept rank are kept.  The
    survivors are bucketed at ``beta_v`` and each voxel keeps up to
    ``k_salient`` points by ascending sigma, then distance to the voxel center.
    """
    if cloud.saliency is None:
        raise MissingSaliency("stage-2 subsampling needs per-point saliency")
    if beta_v <= 0 or not 0.0 < keep_fraction <= 1.0 or k_salient < 1:
        raise ValueError("need beta_v > 0, 0 < keep_fraction <= 1, k_salient >= 1")
    if len(cloud) == 0:
        return cloud
    sigma = cloud.saliency
    survivors = np.flatnonzero(sigma <= saliency_cut(sigma, keep_fraction))
    pts = cloud.positions[survivors]
    keys = np.floor(pts / beta_v).astype(np.int64)
    d = np.linalg.norm(pts - (keys + 0.5) * beta_v, axis=1)
    group = _group(keys)
    order = np.lexsort((survivors, d, sigma[survivors], group))
    g = group[order]
    start = np.r_[0, np.flatnonzero(g[1:] != g[:-1]) + 1]
    rank = np.arange(len(g)) - np.repeat(start, np.diff(np.r_[start, len(g)]))
    chosen = survivors[order[rank < k_salient]]
    return cloud.select(np.sort(chosen))


@dataclass
class OdometryState:
    map: VoxelHashMap
    threshold_state: ThresholdState
    trajectory: list = field(default_factory=list)
    last_relative: Pose = field(default_factory=Pose.identity)
    keypoints: PointCloud | None = None
    keypoint_features: FeatureSet | None = None

    @classmethod
    def initial(cls, config: PipelineConfig) -> "OdometryState":
        return cls(
            VoxelHashMap(
                config.voxel_size,
                config.n_max,
                config.eps_plane,
                config.min_planarity,
                config.min_point_spacing,
                config.fit_surfels,
            ),
            ThresholdState.initial(config.tau_default, config.delta_min, config.tau_floor),
        )


@dataclass(frozen=True)
class ScanReport:
    ransac_ok: bool
    ransac_inliers: int
    candidates: int
    icp_iterations: int
    icp_ok: bool
    keypoints: int
    map_points: int
    deviation: float
    icp_rms: float = 0.0
    seconds: float = 0.0
    memory_bytes: int = 0


def _local_rows(sub: PointCloud, parent: PointCloud) -> np.ndarray:
    # both index channels are ascending subsets of the raw scan
    return np.searchsorted(parent.index, sub.index)


def process_scan(
    state: OdometryState,
    raw_scan: PointCloud,
    features: FeatureSet | None,
    config: PipelineConfig,
) -> tuple[OdometryState, Pose, ScanReport]:
    """Advance the odometry by one scan.

    ``features`` is aligned with ``raw_scan`` (one row per raw point); when it
    is None the built-in descriptor is computed on the stage-1 points.
    """
    if len(raw_scan) == 0:
        raise ValueError("empty scan")
    v = config.voxel_size
    cropped = crop_by_range(raw_scan, config.min_range, config.max_range)
    scan = deskew(cropped, state.last_relative)
    stage1 = subsample_stage1(scan, config.alpha * v)
    if features is not None:
        if len(features) != len(raw_scan):
            raise ValueError(f"{len(features)} feature rows for a {len(raw_scan)}-point scan")
        fs1 = features.take(stage1.index)
    else:
        fs1 = feat.compute_builtin_features(scan, config.feature_radius, query=_local_rows(stage1, scan))
    stage1 = stage1.with_saliency(fs1.saliency)
    keypoints = subsample_stage2(stage1, config.beta * v, config.saliency_keep_fraction, config.k_salient)
    kp_features = fs1.take(_local_rows(keypoints, stage1))

    if not state.trajectory:
        pose = Pose.identity()
        state.map.insert_points(stage1.positions, sensor_origin=pose.translation)
        state.trajectory.append(pose)
        state.keypoints, state.keypoint_features = keypoints, kp_features
        return state, pose, ScanReport(False, 0, 0, 0, False, len(keypoints), state.map.num_points, 0.0)

    prev_pose = state.trajectory[-1]
    relative = state.last_relative
    ransac_ok, n_inliers, n_cand = False, 0, 0
    try:
        cands = match_descriptors(kp_features, state.keypoint_features, config.match_mode)
        n_cand = len(cands)
        res = ransac_register(
            cands,
            keypoints,
            state.keypoints,
            config.ransac_max_iterations,
            config.ransac_inlier_threshold,
            config.ransac_confidence,
            config.seed,
        )
        n_inliers = len(res.inlier_indices)
        if n_inliers >= config.ransac_min_inliers:
            relative, ransac_ok = res.pose, True
    except (NoValidDescriptors, TooFewCandidates, NoConsensus) as exc:
        log.debug("scan-to-scan registration failed: %s", exc)

    guess = prev_pose.compose(relative)
    icp_ok, iters, rms = False, 0, 0.0
    try:
        pose, rep = register_scan_to_map(
            keypoints, state.map, guess, state.threshold_state, IcpParams(config.icp_eps_conv, config.icp_max_iters)
        )
        icp_ok, iters, rms = True, rep.num_iterations, rep.iterations[-1].rms
    except (NoCorrespondences, SingularSystem) as exc:
        log.debug("scan-to-map registration failed: %s", exc)
        pose = guess

    correction = guess.inverse().compose(pose)
    state.threshold_state = update_threshold(state.threshold_state, correction, config.max_range)
    state.map.insert_points(pose.apply(stage1.positions), sensor_origin=pose.translation)
    state.map.prune_beyond(pose.translation, config.max_range)
    state.trajectory.append(pose)
    state.last_relative = prev_pose.inverse().compose(pose)
    state.keypoints, state.keypoint_features = keypoints, kp_features
    report = ScanReport(
        ransac_ok,
        n_inliers,
        n_cand,
        iters,
        icp_ok,
        len(keypoints),
        state.map.num_points,
        deviation_bound(correction, config.max_range),
        rms,
    )
    return state, pose, report


@dataclass
class SequenceResult:
    trajectory: list
    scans: list
    state: OdometryState | None = None

    @property
    def mean_seconds(self) -> float:
        return float(np.mean([s.seconds for s in self.scans])) if self.scans else 0.0

    @property
    def mean_memory_bytes(self) -> float:
        return float(np.mean([s.memory_bytes for s in self.scans])) if self.scans else 0.0

    def summary(self) -> dict:
        return {
            "scans": len(self.scans),
            "mean_seconds_per_scan": self.mean_seconds,
            "mean_map_memory_bytes": self.mean_memory_bytes,
            "mean_map_memory_kb": self.mean_memory_bytes / 1024.0,
            "ransac_success": int(sum(s.ransac_ok for s in self.scans)),
            "per_scan": [
                {
                    "seconds": s.seconds,
                    "memory_bytes": s.memory_bytes,
                    "icp_iterations": s.icp_iterations,
                    "icp_rms": s.icp_rms,
                    "ransac_inliers": s.ransac_inliers,
                    "candidates": s.candidates,
                    "keypoints": s.keypoints,
                }
                for s in self.scans
            ],
        }


class ScanError(RuntimeError):
    """Failure while processing a specific scan of a sequence."""

    def __init__(self, index: int, cause: BaseException, stage: str = "process"):
        super().__init__(f"scan {index}: {cause}")
        self.index = index
        self.cause = cause
        self.stage = stage  # "load" or "process"


def run_sequence(
    config: PipelineConfig,
    scans: Iterable,
    features: Iterable | None = None,
) -> SequenceResult:
    """Fold ``process_scan`` over a sequence.

    ``scans`` yields PointClouds (or zero-argument callables returning one, so
    loading errors carry the scan index); ``features`` optionally yields
    matching FeatureSets or None entries.
    """
    state = OdometryState.initial(config)
    reports = []
    feat_iter = iter(features) if features is not None else None
    for k, item in enumerate(scans):
        try:
            scan = item() if callable(item) else item
            fs = next(feat_iter) if feat_iter is not None else None
            if callable(fs):
                fs = fs()
        except Exception as exc:  # io errors get the scan index attached
            raise ScanError(k, exc, "load") from exc
        t0 = time.perf_counter()
        try:
            state, _, rep = process_scan(state, scan, fs, config)
        except Exception as exc:
            raise ScanError(k, exc, "process") from exc
        elapsed = time.perf_counter() - t0
        reports.append(
            ScanReport(**{**rep.__dict__, "seconds": elapsed, "memory_bytes": state.map.memory_usage()})
        )
    if not state.trajectory:
        raise ValueError("sequence contains no scans")
    return SequenceResult(state.trajectory, reports, state)
