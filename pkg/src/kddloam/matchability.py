"""Descriptor and detector losses over given descriptor arrays.

Covers correspondence / negative-set construction for a ground-truth aligned
pair of clouds, the matchability index (hardest-triplet margin of a single
descriptor), the hardest quadruplet contrastive loss with its subgradient,
the exponential likelihood of a matchability index under a saliency
uncertainty, and the resulting detection loss.  Distances are Euclidean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .cloud import PointCloud
from .errors import EmptyCorrespondences, EmptyNegatives, EmptyResult, LengthMismatch, NonPositiveSigma
from .features import FeatureSet

DEFAULT_M_P = 0.1
DEFAULT_M_N = 1.4
DEFAULT_LAMBDA_P = 1.0


@dataclass(frozen=True, eq=False)
class TrainingPair:
    cloud_P: PointCloud
    cloud_Q: PointCloud
    desc_P: FeatureSet
    desc_Q: FeatureSet
    R_p: float
    R_n: float

    def __post_init__(self):
        if not (self.R_n >= self.R_p > 0):
            raise ValueError("need R_n >= R_p > 0")


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Mutually-nearest pairs (i in P, j in Q) and, per pair, the negative
    index sets: ``negatives_P[c]`` indexes Q (far from p_i), ``negatives_Q[c]``
    indexes P (far from q_j)."""

    pairs: np.ndarray  # (C, 2) int
    negatives_P: list
    negatives_Q: list

    def __len__(self) -> int:
        return len(self.pairs)


def _positions(c) -> np.ndarray:
    return c.positions if isinstance(c, PointCloud) else np.asarray(c, dtype=float).reshape(-1, 3)


def build_correspondences(pair: TrainingPair) -> CorrespondenceSet:
    P, Q = _positions(pair.cloud_P), _positions(pair.cloud_Q)
    if len(P) == 0 or len(Q) == 0:
        raise ValueError("both clouds must be non-empty")
    live_P, live_Q = pair.desc_P.valid, pair.desc_Q.valid

    d_pq, nn_pq = cKDTree(Q).query(P)
    _, nn_qp = cKDTree(P).query(Q)
    i = np.arange(len(P))
    mutual = (nn_qp[nn_pq] == i) & (d_pq <= pair.R_p) & live_P & live_Q[nn_pq]
    ii = i[mutual]
    jj = nn_pq[mutual]
    if len(ii) == 0:
        raise EmptyResult("no mutually nearest pair within R_p")

    # negatives: everything at or beyond R_n, i.e. the complement of the open ball
    tree_P, tree_Q = cKDTree(P), cKDTree(Q)
    near_P = tree_Q.query_ball_point(P[ii], np.nextafter(pair.R_n, 0.0))
    near_Q = tree_P.query_ball_point(Q[jj], np.nextafter(pair.R_n, 0.0))
    all_Q, all_P = np.flatnonzero(live_Q), np.flatnonzero(live_P)
    neg_P = [np.setdiff1d(all_Q, near, assume_unique=False) for near in near_P]
    neg_Q = [np.setdiff1d(all_P, near, assume_unique=False) for near in near_Q]
    return CorrespondenceSet(np.stack([ii, jj], axis=1), neg_P, neg_Q)


def _check_margins(m_p: float, m_n: float) -> None:
    if not 0.0 <= m_p < m_n:
        raise ValueError("need 0 <= m_p < m_n")


def matchability_index(d_i, d_j, negatives, m_p: float = DEFAULT_M_P, m_n: float = DEFAULT_M_N) -> float:
    """``[D(d_i, d_j) - m_p]+ + [m_n - min_k D(d_i, d_k)]+``."""
    _check_margins(m_p, m_n)
    negatives = np.asarray(negatives, dtype=float)
    if negatives.size == 0:
        raise EmptyNegatives("matchability needs at least one negative descriptor")
    d_i = np.asarray(d_i, dtype=float)
    pos = float(np.linalg.norm(d_i - np.asarray(d_j, dtype=float)))
    hardest = float(np.min(np.linalg.norm(negatives.reshape(-1, d_i.size) - d_i, axis=1)))
    return max(pos - m_p, 0.0) + max(m_n - hardest, 0.0)


_ROW_BLOCK = 512


def _hardest_batch(anchors: np.ndarray, pool: np.ndarray, negatives: list):
    """Hardest negative per anchor: ``(distances, pool indices)``.

    Candidates are ranked by squared distance from one GEMM per row block;
    the reported distance of the winner is recomputed directly.
    """
    if any(len(n) == 0 for n in negatives):
        raise EmptyNegatives("empty negative set for a correspondence")
    pool_sq = np.einsum("ij,ij->i", pool, pool)
    best = np.empty(len(anchors), dtype=np.int64)
    for lo in range(0, len(anchors), _ROW_BLOCK):
        blk = anchors[lo : lo + _ROW_BLOCK]
        d2 = pool_sq[None, :] - 2.0 * blk @ pool.T
        masked = np.full_like(d2, np.inf)
        for r, neg in enumerate(negatives[lo : lo + _ROW_BLOCK]):
            masked[r, neg] = d2[r, neg]
        best[lo : lo + len(blk)] = np.argmin(masked, axis=1)
    return np.linalg.norm(pool[best] - anchors, axis=1), best


def pair_matchability(
    cs: CorrespondenceSet,
    desc_P,
    desc_Q,
    m_p: float = DEFAULT_M_P,
    m_n: float = DEFAULT_M_N,
) -> np.ndarray:
    """(C, 2) matchability indices ``(m_i, m_j)`` for every correspondence."""
    _check_margins(m_p, m_n)
    DP, DQ = _desc(desc_P), _desc(desc_Q)
    i, j = cs.pairs[:, 0], cs.pairs[:, 1]
    hinge_pos = np.maximum(np.linalg.norm(DP[i] - DQ[j], axis=1) - m_p, 0.0)
    hi, _ = _hardest_batch(DP[i], DQ, cs.negatives_P)
    hj, _ = _hardest_batch(DQ[j], DP, cs.negatives_Q)
    return np.stack([hinge_pos + np.maximum(m_n - hi, 0.0), hinge_pos + np.maximum(m_n - hj, 0.0)], axis=1)


def _desc(d) -> np.ndarray:
    return d.descriptors if isinstance(d, FeatureSet) else np.asarray(d, dtype=float)


def contrastive_loss_and_grad(
    cs: CorrespondenceSet,
    desc_P,
    desc_Q,
    lambda_p: float = DEFAULT_LAMBDA_P,
    m_p: float = DEFAULT_M_P,
    m_n: float = DEFAULT_M_N,
):
    """Hardest quadruplet contrastive loss and its subgradient w.r.t. both
    descriptor matrices.  At a hinge kink the inactive side is taken."""
    _check_margins(m_p, m_n)
    if len(cs) == 0:
        raise EmptyCorrespondences("contrastive loss over an empty correspondence set")
    DP, DQ = _desc(desc_P), _desc(desc_Q)
    gP, gQ = np.zeros_like(DP), np.zeros_like(DQ)
    total = 0.0
    scale = 1.0 / len(cs)

    def unit(a, b):
        d = a - b
        n = np.linalg.norm(d)
        return d / n if n > 0 else np.zeros_like(d)

    HI, KI = _hardest_batch(DP[cs.pairs[:, 0]], DQ, cs.negatives_P)
    HJ, KJ = _hardest_batch(DQ[cs.pairs[:, 1]], DP, cs.negatives_Q)
    for c, (i, j) in enumerate(cs.pairs):
        pos = float(np.linalg.norm(DP[i] - DQ[j]))
        if pos > m_p:
            total += lambda_p * (pos - m_p)
            u = unit(DP[i], DQ[j])
            gP[i] += scale * lambda_p * u
            gQ[j] -= scale * lambda_p * u
        if HI[c] < m_n:
            total += m_n - HI[c]
            u = unit(DP[i], DQ[KI[c]])
            gP[i] -= scale * u
            gQ[KI[c]] += scale * u
        if HJ[c] < m_n:
            total += m_n - HJ[c]
            u = unit(DQ[j], DP[KJ[c]])
            gQ[j] -= scale * u
            gP[KJ[c]] += scale * u
    return float(total * scale), gP, gQ


def contrastive_loss(
    cs: CorrespondenceSet,
    desc_P,
    desc_Q,
    lambda_p: float = DEFAULT_LAMBDA_P,
    m_p: float = DEFAULT_M_P,
    m_n: float = DEFAULT_M_N,
) -> float:
    return contrastive_loss_and_grad(cs, desc_P, desc_Q, lambda_p, m_p, m_n)[0]


def exp_likelihood(m, sigma):
    """Exponential density ``exp(-m / sigma) / sigma``."""
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise NonPositiveSigma("sigma must be > 0")
    m = np.asarray(m, dtype=float)
    if np.any(m < 0):
        raise ValueError("matchability index must be >= 0")
    out = np.exp(-m / sigma) / sigma
    return float(out) if out.ndim == 0 else out


def detection_loss(m_values, sigma_values) -> float:
    """Mean over correspondences of ``ln s_i + m_i/s_i + ln s_j + m_j/s_j``.

    Both arguments are (C, 2) arrays holding the pair ``(i, j)`` per row.
    """
    m = np.asarray(m_values, dtype=float)
    s = np.asarray(sigma_values, dtype=float)
    if m.shape != s.shape:
        raise LengthMismatch(f"{m.shape} matchability values vs {s.shape} saliency values")
    if m.size == 0:
        raise EmptyCorrespondences("detection loss over an empty correspondence set")
    if np.any(s <= 0):
        raise NonPositiveSigma("sigma must be > 0")
    m = m.reshape(len(m), -1)
    s = s.reshape(len(s), -1)
    return float(np.sum(np.log(s) + m / s) / len(m))


def detection_loss_grad_sigma(m_values, sigma_values) -> np.ndarray:
    """Analytic d(loss)/d(sigma); zero exactly where sigma equals m."""
    m = np.asarray(m_values, dtype=float)
    s = np.asarray(sigma_values, dtype=float)
    return (1.0 / s - m / s**2) / len(m)
