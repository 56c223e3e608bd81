"""``kddloam`` command-line entry point.

Exit codes: 0 on success, 1 on input/output, configuration or usage errors,
2 when the registration pipeline itself fails.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import matching
from .cloud import transform_cloud
from .config import PipelineConfig, _coerce, load_config
from .errors import (
    ConfigError,
    EmptyCorrespondences,
    EmptyResult,
    KddLoamError,
    LengthMismatch,
    NoConsensus,
    NoValidDescriptors,
    TooFewCandidates,
)
from .evaluation import (
    DEFAULT_RRE_MAX_DEG,
    DEFAULT_RTE_MAX_CM,
    MatchPair,
    fmr_sweep,
    kitti_rpe_sequences,
    pair_metrics,
    registration_recall,
)
from .features import compute_builtin_features, load_external_features
from .geometry import Pose
from .io import ScanSource, format_pose, read_poses, read_scan_bin, write_map, write_poses
from .matchability import (
    DEFAULT_LAMBDA_P,
    DEFAULT_M_N,
    DEFAULT_M_P,
    TrainingPair,
    build_correspondences,
    contrastive_loss,
    detection_loss,
    pair_matchability,
)
from .odometry import ScanError, SequenceResult, run_sequence, subsample_stage1

DEFAULT_R_P = 0.3
DEFAULT_R_N = 1.0


class UsageError(Exception):
    pass


class PipelineFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


# ---------------------------------------------------------------- config flags


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat 'key = value' configuration file (flags below override it)")
    g = p.add_argument_group("pipeline overrides", "each flag overrides the configuration key of the same name")
    for f in fields(PipelineConfig):
        if f.name == "seed":
            continue
        flag = "--" + f.name.replace("_", "-")
        g.add_argument(flag, dest=f"cfg_{f.name}", metavar=str(f.type).upper(), help=f"default {f.default}")


def _config_from_args(args) -> PipelineConfig:
    overrides = {}
    for f in fields(PipelineConfig):
        raw = getattr(args, f"cfg_{f.name}", None)
        if raw is not None:
            overrides[f.name] = _coerce(f.name, f.type, raw)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.config is not None:
        return load_config(args.config, overrides)
    return PipelineConfig(**overrides)


# ---------------------------------------------------------------- odometry


def _run(args) -> tuple[PipelineConfig, SequenceResult]:
    config = _config_from_args(args)
    provider = config.feature_provider
    if provider == "external" and args.features_dir is None:
        raise ConfigError("feature_provider = external needs --features-dir")
    feature_dir = args.features_dir if provider in ("auto", "external") else None
    source = ScanSource.from_directory(args.scan_dir, feature_dir)
    try:
        result = run_sequence(config, source.scans(), source.features())
    except ScanError as exc:
        if exc.stage == "load":
            raise KddLoamError(str(exc)) from exc
        raise PipelineFailure(str(exc)) from exc
    return config, result


def cmd_run_odometry(args) -> None:
    config, result = _run(args)
    write_poses(args.out_trajectory, result.trajectory)
    report = {"config": {f.name: getattr(config, f.name) for f in fields(config)}, **result.summary()}
    try:
        args.out_report.write_text(json.dumps(report, indent=2) + "\n")
    except OSError as exc:
        raise KddLoamError(f"cannot write {args.out_report}: {exc}") from exc
    print(f"scans={len(result.trajectory)} mean_seconds={result.mean_seconds:.4f} "
          f"mean_map_kb={result.mean_memory_bytes / 1024.0:.1f}")


def cmd_map_export(args) -> None:
    _, result = _run(args)
    state = result.state
    n = write_map(args.out_map, state.map)
    if args.out_trajectory is not None:
        write_poses(args.out_trajectory, result.trajectory)
    print(f"records={n} points={state.map.num_points} surfels={state.map.num_surfels}")


# ---------------------------------------------------------------- register-pair


def _load_cloud_features(scan_path, feature_path, radius: float, downsample: float):
    cloud = read_scan_bin(scan_path)
    rows = np.arange(len(cloud))
    if downsample > 0:
        rows = subsample_stage1(cloud, downsample).index
    if feature_path is not None:
        fs = load_external_features(feature_path, len(cloud)).take(rows)
    else:
        fs = compute_builtin_features(cloud, radius, query=rows)
    return cloud.select(rows), fs


def cmd_register_pair(args) -> None:
    if (args.features_a is None) != (args.features_b is None):
        raise UsageError("give feature sidecars for both scans or for neither")
    src, fs_src = _load_cloud_features(args.scan_a, args.features_a, args.feature_radius, args.downsample)
    dst, fs_dst = _load_cloud_features(args.scan_b, args.features_b, args.feature_radius, args.downsample)
    try:
        cands = matching.match_descriptors(fs_src, fs_dst, args.match_mode)
        res = matching.ransac_register(
            cands, src, dst, args.max_iterations, args.inlier_threshold, args.confidence, args.seed or 0
        )
    except (NoValidDescriptors, TooFewCandidates, NoConsensus) as exc:
        raise PipelineFailure(f"{type(exc).__name__}: {exc}") from exc
    n_inl = len(res.inlier_indices)
    if n_inl < args.min_inliers:
        raise PipelineFailure(f"NoConsensus: best model has {n_inl} inliers, need {args.min_inliers}")
    print(format_pose(res.pose))
    print(f"inliers={n_inl} candidates={len(cands)}")


# ---------------------------------------------------------------- evaluation


def _pose_runs(gt: Path, est: Path) -> dict:
    if gt.is_dir() != est.is_dir():
        raise UsageError("ground truth and estimate must both be files or both be directories")
    if not gt.is_dir():
        return {gt.stem: (read_poses(gt), read_poses(est))}
    runs = {}
    for g in sorted(gt.glob("*.txt")):
        e = est / g.name
        if e.exists():
            runs[g.stem] = (read_poses(g), read_poses(e))
    if not runs:
        raise KddLoamError(f"no matching pose files in {gt} and {est}")
    return runs


def cmd_eval_rpe(args) -> None:
    runs = _pose_runs(args.gt, args.est)
    reports, pooled = kitti_rpe_sequences(runs, args.exclude, args.lengths)
    print(f"t_err={pooled.t_err!r} r_err={pooled.r_err!r}")
    for L, seg in sorted(pooled.per_length.items()):
        print(f"length={int(L)} segments={seg.count} t_err={seg.t_err!r} r_err={seg.r_err!r}")
    if args.csv:
        for name, rep in reports.items():
            print("\n".join(rep.lines(name)))


def cmd_eval_pair(args) -> None:
    gt, est = read_poses(args.gt), read_poses(args.est)
    if len(gt) != len(est):
        raise LengthMismatch(f"{len(gt)} ground-truth poses vs {len(est)} estimates")
    metrics = [pair_metrics(g, e, args.rte_max, args.rre_max) for g, e in zip(gt, est)]
    for k, m in enumerate(metrics):
        print(f"pair={k} rte_cm={m.rte!r} rre_deg={m.rre!r} success={int(m.success)}")
    print(f"rr={registration_recall(metrics)!r}")


def _read_pair_list(path: Path, radius: float, mode: str) -> list[MatchPair]:
    """Each line: ``scan_a scan_b features_a features_b`` then 12 pose floats
    (``-`` in a feature slot selects the built-in descriptor)."""
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise KddLoamError(f"cannot read {path}: {exc}") from exc
    pairs = []
    for lineno, line in enumerate(lines, 1):
        tok = line.split("#", 1)[0].split()
        if not tok:
            continue
        if len(tok) != 16:
            raise KddLoamError(f"{path}:{lineno}: expected 4 paths and 12 pose values, got {len(tok)} fields")
        try:
            gt = Pose.from_matrix(np.array([float(x) for x in tok[4:]]).reshape(3, 4))
        except ValueError:
            raise KddLoamError(f"{path}:{lineno}: bad pose values") from None
        a, b, fa, fb = (None if t == "-" else path.parent / t for t in tok[:4])
        src, fs_src = _load_cloud_features(a, fa, radius, 0.0)
        dst, fs_dst = _load_cloud_features(b, fb, radius, 0.0)
        try:
            cands = matching.match_descriptors(fs_src, fs_dst, mode)
        except NoValidDescriptors:
            cands = []
        si = np.array([c.src_index for c in cands], dtype=np.int64)
        di = np.array([c.dst_index for c in cands], dtype=np.int64)
        pairs.append(MatchPair(src.positions[si], dst.positions[di], gt))
    return pairs


def cmd_fmr_sweep(args) -> None:
    pairs = _read_pair_list(args.pair_list, args.feature_radius, args.match_mode)
    grid = fmr_sweep(pairs, args.tau1, args.tau2)
    for a, t1 in enumerate(args.tau1):
        for b, t2 in enumerate(args.tau2):
            print(f"tau1={t1!r} tau2={t2!r} fmr={float(grid[a, b])!r}")


def cmd_losses_check(args) -> None:
    cloud_a, cloud_b = read_scan_bin(args.cloud_a), read_scan_bin(args.cloud_b)
    fa = load_external_features(args.features_a, len(cloud_a))
    fb = load_external_features(args.features_b, len(cloud_b))
    poses = read_poses(args.gt_pose)
    if not poses:
        raise KddLoamError(f"{args.gt_pose} holds no pose")
    aligned = transform_cloud(cloud_a, poses[0])
    try:
        cs = build_correspondences(TrainingPair(aligned, cloud_b, fa, fb, args.r_p, args.r_n))
    except EmptyResult as exc:
        raise EmptyCorrespondences(f"no correspondences: {exc}") from exc
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    m = pair_matchability(cs, fa, fb, args.m_p, args.m_n)
    sigma = np.stack([fa.saliency[cs.pairs[:, 0]], fb.saliency[cs.pairs[:, 1]]], axis=1)
    contrastive = contrastive_loss(cs, fa, fb, args.lambda_p, args.m_p, args.m_n)
    print(f"contrastive={contrastive!r}")
    print(f"detection={detection_loss(m, sigma)!r}")
    print(f"mean_matchability={float(m.mean())!r}")


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kddloam", description="Keypoint-driven LiDAR odometry and its evaluation tools.")
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="seed for randomized steps (default 0)")
    common.add_argument("--threads", type=int, default=1, help="cap on worker threads (default 1)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    for name, func, helptext in (
        ("run-odometry", cmd_run_odometry, "estimate the trajectory of a scan directory"),
        ("map-export", cmd_map_export, "run the odometry and export the final voxel map"),
    ):
        p = sub.add_parser(name, parents=[common], help=helptext, description=helptext)
        p.add_argument("scan_dir", type=Path, help="directory of .bin scans, processed in name order")
        p.add_argument("--features-dir", type=Path, help="directory of <scan stem>.kddf feature sidecars")
        if name == "run-odometry":
            p.add_argument("--out-trajectory", type=Path, required=True, help="KITTI pose file to write")
            p.add_argument("--out-report", type=Path, required=True, help="JSON run report to write")
        else:
            p.add_argument("--out-map", type=Path, required=True, help="map text file to write")
            p.add_argument("--out-trajectory", type=Path, help="optional KITTI pose file to write")
        _add_config_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("register-pair", parents=[common], help="RANSAC registration of two scans",
                       description="Estimate the pose mapping scan A onto scan B.")
    p.add_argument("scan_a", type=Path)
    p.add_argument("scan_b", type=Path)
    p.add_argument("--features-a", type=Path, help="feature sidecar of scan A (built-in descriptor if omitted)")
    p.add_argument("--features-b", type=Path, help="feature sidecar of scan B")
    p.add_argument("--feature-radius", type=float, default=1.0, help="built-in descriptor radius (m)")
    p.add_argument("--downsample", type=float, default=0.0, help="voxel size for one-point-per-voxel reduction (0: off)")
    p.add_argument("--match-mode", choices=("mutual", "one-way"), default="mutual")
    p.add_argument("--inlier-threshold", type=float, default=matching.DEFAULT_INLIER_THRESHOLD)
    p.add_argument("--confidence", type=float, default=matching.DEFAULT_CONFIDENCE)
    p.add_argument("--max-iterations", type=int, default=matching.DEFAULT_MAX_ITERATIONS)
    p.add_argument("--min-inliers", type=int, default=PipelineConfig.ransac_min_inliers,
                   help="fewer final inliers count as no consensus")
    p.set_defaults(func=cmd_register_pair)

    p = sub.add_parser("eval-rpe", parents=[common], help="KITTI relative pose error",
                       description="Segment RPE of estimated against ground-truth poses (files, or directories of <seq>.txt).")
    p.add_argument("gt", type=Path)
    p.add_argument("est", type=Path)
    p.add_argument("--exclude", nargs="*", default=[], help="sequence names left out of the pooled result")
    p.add_argument("--lengths", type=_float_list, default=[100, 200, 300, 400, 500, 600, 700, 800],
                   help="comma-separated segment lengths (m)")
    p.add_argument("--csv", action="store_true", help="also print metric,sequence,value lines")
    p.set_defaults(func=cmd_eval_rpe)

    p = sub.add_parser("eval-pair", parents=[common], help="per-pair RTE/RRE and registration recall",
                       description="Compare pose files line by line.")
    p.add_argument("gt", type=Path)
    p.add_argument("est", type=Path)
    p.add_argument("--rte-max", type=float, default=DEFAULT_RTE_MAX_CM, help="success bound on RTE (cm)")
    p.add_argument("--rre-max", type=float, default=DEFAULT_RRE_MAX_DEG, help="success bound on RRE (deg)")
    p.set_defaults(func=cmd_eval_pair)

    p = sub.add_parser("fmr-sweep", parents=[common], help="feature-matching recall over a threshold grid",
                       description=_read_pair_list.__doc__)
    p.add_argument("pair_list", type=Path)
    p.add_argument("--tau1", type=_float_list, default=[0.1, 0.2, 0.3], help="inlier distances (m)")
    p.add_argument("--tau2", type=_float_list, default=[0.05, 0.1, 0.2], help="inlier-ratio thresholds")
    p.add_argument("--feature-radius", type=float, default=1.0)
    p.add_argument("--match-mode", choices=("mutual", "one-way"), default="mutual")
    p.set_defaults(func=cmd_fmr_sweep)

    p = sub.add_parser("losses-check", parents=[common], help="descriptor and detector losses of a cloud pair",
                       description="Contrastive and detection losses for cloud A posed into cloud B's frame.")
    p.add_argument("cloud_a", type=Path)
    p.add_argument("cloud_b", type=Path)
    p.add_argument("features_a", type=Path)
    p.add_argument("features_b", type=Path)
    p.add_argument("gt_pose", type=Path, help="pose file whose first line maps A into B")
    p.add_argument("--r-p", type=float, default=DEFAULT_R_P, help="positive-pair radius (m)")
    p.add_argument("--r-n", type=float, default=DEFAULT_R_N, help="negative radius (m)")
    p.add_argument("--m-p", type=float, default=DEFAULT_M_P, help="positive margin")
    p.add_argument("--m-n", type=float, default=DEFAULT_M_N, help="negative margin")
    p.add_argument("--lambda-p", type=float, default=DEFAULT_LAMBDA_P, help="positive-term weight")
    p.set_defaults(func=cmd_losses_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("kddloam: error: --threads must be >= 1", file=sys.stderr)
        return 1
    matching.max_workers = args.threads
    try:
        args.func(args)
    except PipelineFailure as exc:
        print(f"kddloam: pipeline failure: {exc}", file=sys.stderr)
        return 2
    except (KddLoamError, UsageError, OSError, ValueError) as exc:
        print(f"kddloam: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
