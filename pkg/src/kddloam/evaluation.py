"""Trajectory and registration metrics: KITTI relative pose error, per-pair
RTE/RRE/RR, and feature-matching recall."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import EmptyPairList, LengthMismatch, TooShort
from .geometry import Pose, rotation_angle

KITTI_LENGTHS = (100, 200, 300, 400, 500, 600, 700, 800)
DEFAULT_RTE_MAX_CM = 200.0
DEFAULT_RRE_MAX_DEG = 5.0


@dataclass(frozen=True)
class SegmentErrors:
    length: float
    count: int
    t_err: float  # percent
    r_err: float  # degrees per 100 m


@dataclass(frozen=True)
class RpeReport:
    t_err: float
    r_err: float
    segments: int
    per_length: dict = field(default_factory=dict)

    def lines(self, sequence: str = "-") -> list[str]:
        """Machine-readable ``metric,sequence,value`` lines."""
        out = [f"t_err,{sequence},{self.t_err!r}", f"r_err,{sequence},{self.r_err!r}"]
        for L, seg in sorted(self.per_length.items()):
            out.append(f"t_err_{int(L)},{sequence},{seg.t_err!r}")
            out.append(f"r_err_{int(L)},{sequence},{seg.r_err!r}")
        return out

    def table(self) -> str:
        rows = [f"t_err={self.t_err:.4f} r_err={self.r_err:.4f}"]
        for L, seg in sorted(self.per_length.items()):
            rows.append(f"  {int(L):4d} m  n={seg.count:6d}  t_err={seg.t_err:.4f}%  r_err={seg.r_err:.4f} deg/100m")
        return "\n".join(rows)


def path_distances(poses: Sequence[Pose]) -> np.ndarray:
    t = np.array([p.translation for p in poses])
    steps = np.linalg.norm(np.diff(t, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def _stack(poses: Sequence[Pose]) -> tuple[np.ndarray, np.ndarray]:
    return np.array([p.rotation for p in poses]), np.array([p.translation for p in poses])


def _relative(R: np.ndarray, t: np.ndarray, i: np.ndarray, j: np.ndarray):
    """Batched ``T_i^-1 T_j``."""
    Ri_T = R[i].transpose(0, 2, 1)
    return Ri_T @ R[j], np.einsum("nab,nb->na", Ri_T, t[j] - t[i])


def _angles(R: np.ndarray) -> np.ndarray:
    # batched rotation_angle
    c = np.clip((np.trace(R, axis1=1, axis2=2) - 1.0) / 2.0, -1.0, 1.0)
    w = np.stack([R[:, 2, 1] - R[:, 1, 2], R[:, 0, 2] - R[:, 2, 0], R[:, 1, 0] - R[:, 0, 1]], axis=1)
    return np.arctan2(0.5 * np.linalg.norm(w, axis=1), c)


def _segments(gt: Sequence[Pose], est: Sequence[Pose], lengths) -> dict:
    dist = path_distances(gt)
    Rg, tg = _stack(gt)
    Re, te = _stack(est)
    out: dict = {}
    for L in lengths:
        # segment end: first frame whose accumulated length reaches start + L
        ends = np.searchsorted(dist, dist + L, side="left")
        i = np.flatnonzero(ends < len(gt))
        if len(i) == 0:
            continue
        j = ends[i]
        Rdg, tdg = _relative(Rg, tg, i, j)
        Rde, tde = _relative(Re, te, i, j)
        Rde_T = Rde.transpose(0, 2, 1)
        R_err = Rde_T @ Rdg
        t_err = np.einsum("nab,nb->na", Rde_T, tdg - tde)
        out[L] = np.stack([np.linalg.norm(t_err, axis=1) / L, np.degrees(_angles(R_err)) / L], axis=1)
    return out


def kitti_rpe(gt: Sequence[Pose], est: Sequence[Pose], lengths: Iterable[float] = KITTI_LENGTHS) -> RpeReport:
    """Segment-based relative pose error over every start frame.

    ``t_err`` is the mean translational error in percent of segment length,
    ``r_err`` the mean rotational error in degrees per 100 m.
    """
    if len(gt) != len(est):
        raise LengthMismatch(f"{len(gt)} ground-truth poses vs {len(est)} estimates")
    if len(gt) < 2:
        raise TooShort("need at least two poses")
    segs = _segments(gt, est, tuple(lengths))
    if not segs:
        raise TooShort(f"trajectory ({path_distances(gt)[-1]:.1f} m) has no {min(lengths)} m segment")
    pooled = np.concatenate(list(segs.values()))
    per_length = {
        L: SegmentErrors(L, len(e), float(e[:, 0].mean() * 100.0), float(e[:, 1].mean() * 100.0))
        for L, e in segs.items()
    }
    return RpeReport(float(pooled[:, 0].mean() * 100.0), float(pooled[:, 1].mean() * 100.0), len(pooled), per_length)


def kitti_rpe_sequences(
    runs: Mapping[str, tuple[Sequence[Pose], Sequence[Pose]]],
    exclude: Iterable[str] = (),
    lengths: Iterable[float] = KITTI_LENGTHS,
) -> tuple[dict, RpeReport]:
    """Per-sequence reports plus a report pooled over all segments of the
    sequences not in ``exclude``."""
    skip = set(exclude)
    lengths = tuple(lengths)
    reports, pooled_t, pooled_r, pooled_by_len = {}, [], [], {}
    for name, (gt, est) in sorted(runs.items()):
        if name in skip:
            continue
        reports[name] = kitti_rpe(gt, est, lengths)
        for L, e in _segments(gt, est, lengths).items():
            pooled_t.append(e[:, 0])
            pooled_r.append(e[:, 1])
            pooled_by_len.setdefault(L, []).append(e)
    if not reports:
        raise TooShort("no sequences left to evaluate")
    per_length = {}
    for L, es in pooled_by_len.items():
        e = np.concatenate(es)
        per_length[L] = SegmentErrors(L, len(e), float(e[:, 0].mean() * 100), float(e[:, 1].mean() * 100))
    t = np.concatenate(pooled_t)
    r = np.concatenate(pooled_r)
    return reports, RpeReport(float(t.mean() * 100), float(r.mean() * 100), len(t), per_length)


@dataclass(frozen=True)
class PairMetrics:
    rte: float  # cm
    rre: float  # degrees
    success: bool


def pair_metrics(
    gt_pose: Pose,
    est_pose: Pose,
    rte_max: float = DEFAULT_RTE_MAX_CM,
    rre_max: float = DEFAULT_RRE_MAX_DEG,
) -> PairMetrics:
    rte = float(np.linalg.norm(est_pose.translation - gt_pose.translation) * 100.0)
    rre = float(np.degrees(rotation_angle(gt_pose.rotation.T @ est_pose.rotation)))
    return PairMetrics(rte, rre, rte <= rte_max and rre <= rre_max)


def registration_recall(metrics: Sequence[PairMetrics]) -> float:
    if not metrics:
        raise EmptyPairList("no registration pairs")
    return sum(m.success for m in metrics) / len(metrics)


@dataclass(frozen=True)
class MatchPair:
    """Putative matches ``src[i] <-> dst[i]`` and the ground-truth pose mapping
    the source frame onto the target frame."""

    src: np.ndarray
    dst: np.ndarray
    gt_pose: Pose

    def inlier_ratio(self, tau_1: float) -> float:
        src = np.asarray(self.src, dtype=float).reshape(-1, 3)
        dst = np.asarray(self.dst, dtype=float).reshape(-1, 3)
        if len(src) != len(dst):
            raise LengthMismatch("source and target matches differ in length")
        if len(src) == 0:
            return 0.0
        d = np.linalg.norm(self.gt_pose.apply(src) - dst, axis=1)
        return float(np.mean(d <= tau_1))


def fmr(pairs: Sequence[MatchPair], tau_1: float, tau_2: float) -> float:
    """Fraction of pairs whose inlier ratio at distance ``tau_1`` is at least ``tau_2``."""
    if not pairs:
        raise EmptyPairList("no pairs to evaluate")
    if tau_1 <= 0 or not 0.0 < tau_2 < 1.0:
        raise ValueError("need tau_1 > 0 and 0 < tau_2 < 1")
    return sum(p.inlier_ratio(tau_1) >= tau_2 for p in pairs) / len(pairs)


def fmr_sweep(pairs: Sequence[MatchPair], tau_1s: Iterable[float], tau_2s: Iterable[float]) -> np.ndarray:
    """Recall grid with rows indexed by ``tau_1s`` and columns by ``tau_2s``."""
    if not pairs:
        raise EmptyPairList("no pairs to evaluate")
    tau_1s, tau_2s = list(tau_1s), list(tau_2s)
    out = np.empty((len(tau_1s), len(tau_2s)))
    for a, t1 in enumerate(tau_1s):
        ratios = [p.inlier_ratio(t1) for p in pairs]
        for b, t2 in enumerate(tau_2s):
            if t1 <= 0 or not 0.0 < t2 < 1.0:
                raise ValueError("need tau_1 > 0 and 0 < tau_2 < 1")
            out[a, b] = sum(r >= t2 for r in ratios) / len(pairs)
    return out
