"""Per-point descriptors and saliency.

Two providers: a hand-crafted, rotation-invariant histogram descriptor with a
covariance-based saliency proxy, and a loader for precomputed (e.g. learned)
features stored in a binary sidecar next to each scan.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .cloud import PointCloud
from .errors import CountMismatch, InsufficientNeighbors, IoFailure, MalformedHeader, TruncatedPayload

SIGMA_MIN = 0.05
SIGMA_MAX = 1.0
MIN_NEIGHBORS = 5
DEFAULT_BINS = (11, 11, 10)
MAX_NORMAL_PAIRS = 64
_SALIENCY_LEVELS = 32

SIDECAR_MAGIC = b"KDDF"
SIDECAR_VERSION = 1
_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True, eq=False)
class FeatureSet:
    """Descriptors (N x D, unit rows) and positive saliency uncertainties.

    Rows that are exactly zero are flagged unmatched: they are skipped by
    descriptor matching but the points stay usable as geometry.
    """

    descriptors: np.ndarray
    saliency: np.ndarray

    def __post_init__(self):
        d = np.array(self.descriptors, dtype=float)
        if d.ndim != 2:
            raise ValueError("descriptors must be an N x D matrix")
        s = np.array(self.saliency, dtype=float).reshape(-1)
        if len(s) != len(d):
            raise ValueError("need one saliency value per descriptor")
        if len(s) and s.min() <= 0.0:
            raise ValueError("saliency entries must be > 0")
        d.flags.writeable = False
        s.flags.writeable = False
        object.__setattr__(self, "descriptors", d)
        object.__setattr__(self, "saliency", s)

    def __len__(self) -> int:
        return len(self.descriptors)

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return np.any(self.descriptors != 0.0, axis=1)

    def take(self, indices) -> "FeatureSet":
        indices = np.asarray(indices, dtype=np.int64)
        return FeatureSet(self.descriptors[indices], self.saliency[indices])


@dataclass(frozen=True)
class LocalFrameStats:
    centroid: np.ndarray
    eigenvalues: np.ndarray  # descending
    normal: np.ndarray


def _oriented_normals(normals: np.ndarray, positions: np.ndarray) -> np.ndarray:
    # face the sensor origin
    flip = np.einsum("ij,ij->i", normals, -positions) < 0.0
    normals = normals.copy()
    normals[flip] *= -1.0
    return normals


def local_stats(cloud: PointCloud | np.ndarray, center_index: int, radius: float) -> LocalFrameStats:
    if radius <= 0:
        raise ValueError("radius must be positive")
    pts = cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
    center = pts[center_index]
    nbrs = pts[np.linalg.norm(pts - center, axis=1) <= radius]
    if len(nbrs) < MIN_NEIGHBORS:
        raise InsufficientNeighbors(f"{len(nbrs)} points within {radius} m of point {center_index}")
    centroid = nbrs.mean(axis=0)
    X = nbrs - centroid
    w, v = np.linalg.eigh(X.T @ X / len(nbrs))
    w = np.clip(w[::-1], 0.0, None)
    normal = _oriented_normals(v[:, 0][None, :], center[None, :])[0]
    return LocalFrameStats(centroid, w, normal)


def saliency_from_eigenvalues(eigenvalues: np.ndarray) -> np.ndarray:
    """Map descending covariance eigenvalues (..., 3) to saliency uncertainty.

    Surface-like neighborhoods (smallest eigenvalue negligible against the
    in-surface spread) map to SIGMA_MAX; lines, edges and corners go towards
    SIGMA_MIN.  The ratio is quantized so exact planes land exactly on SIGMA_MAX.
    """
    lam = np.asarray(eigenvalues, dtype=float)
    l2, l3 = lam[..., 1], lam[..., 2]
    scale = lam[..., 0]
    degenerate = l2 <= 1e-12 * np.maximum(scale, 1e-300)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(degenerate, 1.0, l3 / np.where(degenerate, 1.0, l2))
    a = np.clip(a, 0.0, 1.0)
    a = np.floor(a * _SALIENCY_LEVELS + 1e-9) / _SALIENCY_LEVELS
    return SIGMA_MIN + (SIGMA_MAX - SIGMA_MIN) * (1.0 - a)


def _ball_neighbors(tree: cKDTree, queries: np.ndarray, radius: float):
    lists = tree.query_ball_point(queries, radius, return_sorted=True)
    counts = np.fromiter((len(l) for l in lists), dtype=np.int64, count=len(lists))
    flat = np.fromiter((j for l in lists for j in l), dtype=np.int64, count=int(counts.sum()))
    owners = np.repeat(np.arange(len(lists)), counts)
    return owners, flat, counts


def _batched_stats(points: np.ndarray, centers: np.ndarray, owners, flat, counts):
    """Covariance eigen-decomposition per neighborhood; neighborhoods are
    given as a flattened (owner, neighbor) list."""
    m = len(centers)
    X = points[flat] - centers[owners]
    n = np.maximum(counts, 1).astype(float)
    mean = np.stack([np.bincount(owners, X[:, k], minlength=m) for k in range(3)], axis=1) / n[:, None]
    outer = X[:, :, None] * X[:, None, :]
    S = np.empty((m, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            S[:, a, b] = S[:, b, a] = np.bincount(owners, outer[:, a, b], minlength=m)
    cov = S / n[:, None, None] - mean[:, :, None] * mean[:, None, :]
    w, v = np.linalg.eigh(cov)
    return np.clip(w[:, ::-1], 0.0, None), v[:, :, 0]


def _histogram(owner, values, lo, hi, nbins, m):
    b = np.floor((values - lo) / (hi - lo) * nbins).astype(np.int64)
    b = np.clip(b, 0, nbins - 1)
    h = np.bincount(owner * nbins + b, minlength=m * nbins).reshape(m, nbins).astype(float)
    total = h.sum(axis=1, keepdims=True)
    return np.divide(h, total, out=np.zeros_like(h), where=total > 0)


def compute_builtin_features(
    cloud: PointCloud | np.ndarray,
    radius: float = 1.0,
    bins: tuple[int, int, int] = DEFAULT_BINS,
    query=None,
) -> FeatureSet:
    """Histogram descriptor + saliency proxy for the points selected by ``query``
    (all points by default), using the whole cloud as neighbor support.

    Descriptor: normal-angle cosine between each neighbor and the point,
    neighbor distance / radius, and normal-angle cosine between consecutive
    neighbor pairs (by distance, at most 64 pairs); each histogram is
    normalized to unit mass, then the concatenation to unit L2 norm.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    pts = cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float).reshape(-1, 3)
    qidx = np.arange(len(pts)) if query is None else np.asarray(query, dtype=np.int64)
    nq = len(qidx)
    dim = int(sum(bins))
    descriptors = np.zeros((nq, dim))
    saliency = np.full(nq, SIGMA_MAX)
    if nq == 0:
        return FeatureSet(descriptors, saliency)

    tree = cKDTree(pts)
    q_owner, q_flat, q_counts = _ball_neighbors(tree, pts[qidx], radius)
    # every point whose normal gets used: queries and their neighbors
    support = np.union1d(qidx, q_flat)
    s_owner, s_flat, s_counts = _ball_neighbors(tree, pts[support], radius)
    eig, normals = _batched_stats(pts, pts[support], s_owner, s_flat, s_counts)
    normals = _oriented_normals(normals, pts[support])
    ok = s_counts >= MIN_NEIGHBORS

    slot = np.full(len(pts), -1, dtype=np.int64)
    slot[support] = np.arange(len(support))
    q_slot = slot[qidx]
    q_valid = ok[q_slot]
    saliency[q_valid] = saliency_from_eigenvalues(eig[q_slot[q_valid]])

    # drop self and neighbors without a usable normal
    n_slot = slot[q_flat]
    keep = (q_flat != qidx[q_owner]) & ok[n_slot] & q_valid[q_owner]
    owner, nbr, nslot = q_owner[keep], q_flat[keep], n_slot[keep]
    center_n = normals[q_slot[owner]]
    nbr_n = normals[nslot]
    cos_a = np.einsum("ij,ij->i", center_n, nbr_n)
    dist = np.linalg.norm(pts[nbr] - pts[qidx[owner]], axis=1)
    h_angle = _histogram(owner, cos_a, -1.0, 1.0 + 1e-12, bins[0], nq)
    h_dist = _histogram(owner, dist / radius, 0.0, 1.0 + 1e-12, bins[1], nq)

    # consecutive pairs in distance order within each neighborhood
    order = np.lexsort((nbr, dist, owner))
    o_sorted, ns_sorted = owner[order], nslot[order]
    same = o_sorted[1:] == o_sorted[:-1]
    first = np.r_[0, np.flatnonzero(~same) + 1]
    rank = np.arange(len(o_sorted)) - np.repeat(first, np.diff(np.r_[first, len(o_sorted)]))
    pair = same & (rank[:-1] < MAX_NORMAL_PAIRS)
    cos_p = np.einsum("ij,ij->i", normals[ns_sorted[:-1][pair]], normals[ns_sorted[1:][pair]])
    h_pair = _histogram(o_sorted[:-1][pair], cos_p, -1.0, 1.0 + 1e-12, bins[2], nq)

    desc = np.hstack([h_angle, h_dist, h_pair])
    norm = np.linalg.norm(desc, axis=1)
    good = q_valid & (norm > 0)
    descriptors[good] = desc[good] / norm[good, None]
    saliency[~good] = SIGMA_MAX
    return FeatureSet(descriptors, saliency)


def load_external_features(path, expected_count: int | None = None) -> FeatureSet:
    """Read a feature sidecar (little-endian): magic ``KDDF``, u32 version,
    u32 count N, u32 dim D, then N records of D float32 + 1 float32 saliency."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if len(blob) < _HEADER.size:
        raise MalformedHeader(f"{path}: file shorter than the 16-byte header")
    magic, version, n, dim = _HEADER.unpack_from(blob)
    if magic != SIDECAR_MAGIC or version != SIDECAR_VERSION or dim == 0:
        raise MalformedHeader(f"{path}: bad magic/version/dim ({magic!r}, {version}, {dim})")
    payload = len(blob) - _HEADER.size
    rec = 4 * (dim + 1)
    if payload < n * rec:
        raise TruncatedPayload(f"{path}: {payload} payload bytes, header promises {n * rec}")
    if payload > n * rec:
        raise CountMismatch(f"{path}: trailing bytes after {n} records")
    if expected_count is not None and n != expected_count:
        raise CountMismatch(f"{path}: {n} records for a {expected_count}-point cloud")
    data = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size, count=n * (dim + 1)).reshape(n, dim + 1)
    desc = data[:, :dim].astype(float)
    sal = data[:, dim].astype(float)
    norms = np.linalg.norm(desc, axis=1)
    live = norms > 0
    if np.any(np.abs(norms[live] - 1.0) > 1e-3):
        warnings.warn(f"{path}: descriptors are not unit-norm; renormalizing", stacklevel=2)
        desc[live] /= norms[live, None]
    return FeatureSet(desc, sal)
