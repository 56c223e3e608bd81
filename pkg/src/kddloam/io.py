"""Scan binaries, KITTI pose files, feature sidecars and map export."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .cloud import PointCloud
from .errors import FieldCountMismatch, IoFailure, NonNumeric, SizeNotMultipleOf16
from .features import _HEADER, SIDECAR_MAGIC, SIDECAR_VERSION, FeatureSet, load_external_features
from .geometry import Pose
from .voxelmap import VoxelHashMap

SCAN_SUFFIX = ".bin"
SIDECAR_SUFFIX = ".kddf"


def azimuth_timestamps(positions: np.ndarray) -> np.ndarray:
    """Fraction of a counter-clockwise revolution swept since the first
    point's azimuth, in [0, 1)."""
    if len(positions) == 0:
        return np.zeros(0)
    az = np.arctan2(positions[:, 1], positions[:, 0])
    s = np.mod(az - az[0], 2.0 * np.pi) / (2.0 * np.pi)
    return np.clip(s, 0.0, 1.0)


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


def _write_bytes(path, data: bytes) -> None:
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _write_text(path, text: str) -> None:
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_scan_bin(path) -> PointCloud:
    """Little-endian float32 (x, y, z, intensity) records."""
    blob = _read_bytes(path)
    if len(blob) % 16:
        raise SizeNotMultipleOf16(f"{path}: {len(blob)} bytes is not a multiple of 16")
    data = np.frombuffer(blob, dtype="<f4").reshape(-1, 4).astype(float)
    pos = data[:, :3]
    return PointCloud(pos, timestamps=azimuth_timestamps(pos), intensity=data[:, 3])


def write_scan_bin(path, cloud: PointCloud) -> None:
    rec = np.zeros((len(cloud), 4), dtype="<f4")
    rec[:, :3] = cloud.positions
    if cloud.intensity is not None:
        rec[:, 3] = cloud.intensity
    _write_bytes(path, rec.tobytes())


def parse_poses(text: str) -> list[Pose]:
    poses = []
    for lineno, line in enumerate(text.splitlines(), 1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != 12:
            raise FieldCountMismatch(lineno, len(tokens))
        vals = []
        for tok in tokens:
            try:
                vals.append(float(tok))
            except ValueError:
                raise NonNumeric(lineno, tok) from None
        m = np.array(vals).reshape(3, 4)
        poses.append(Pose(m[:, :3], m[:, 3]))
    return poses


def read_poses(path) -> list[Pose]:
    """KITTI pose file: 12 floats per line, row-major upper 3x4 of the pose."""
    return parse_poses(_read_bytes(path).decode("ascii", errors="replace"))


def format_pose(pose: Pose) -> str:
    m = np.hstack([pose.rotation, pose.translation[:, None]])
    return " ".join(repr(float(x)) for x in m.reshape(-1))


def write_poses(path, poses: Iterable[Pose]) -> None:
    _write_text(path, "".join(format_pose(p) + "\n" for p in poses))


def feature_bytes(fs: FeatureSet) -> bytes:
    n, dim = fs.descriptors.shape
    rec = np.empty((n, dim + 1), dtype="<f4")
    rec[:, :dim] = fs.descriptors
    rec[:, dim] = fs.saliency
    return _HEADER.pack(SIDECAR_MAGIC, SIDECAR_VERSION, n, dim) + rec.tobytes()


def write_features(path, fs: FeatureSet) -> None:
    _write_bytes(path, feature_bytes(fs))


def write_map(path, map_: VoxelHashMap) -> int:
    """Write the map export text; returns the number of records."""
    lines = list(map_.export_lines())
    _write_text(path, "".join(line + "\n" for line in lines))
    return len(lines)


@dataclass(frozen=True)
class ScanSource:
    """Scan files of a directory in lexicographic order, with optional
    feature sidecars (``<stem>.kddf``) from a second directory."""

    paths: tuple
    feature_dir: Path | None = None

    @classmethod
    def from_directory(cls, scan_dir, feature_dir=None) -> "ScanSource":
        d = Path(scan_dir)
        if not d.is_dir():
            raise IoFailure(f"{scan_dir} is not a directory")
        paths = tuple(sorted((p for p in d.iterdir() if p.suffix == SCAN_SUFFIX), key=lambda p: p.name))
        if not paths:
            raise IoFailure(f"no {SCAN_SUFFIX} scans in {scan_dir}")
        return cls(paths, Path(feature_dir) if feature_dir is not None else None)

    def __len__(self) -> int:
        return len(self.paths)

    def scans(self) -> Iterator:
        """Deferred loaders, so read errors surface with their scan index."""
        for p in self.paths:
            yield lambda p=p: read_scan_bin(p)

    def features(self) -> Iterator | None:
        if self.feature_dir is None:
            return None

        def load(p):
            cloud_n = (p.stat().st_size // 16) if p.exists() else None
            return load_external_features(self.feature_dir / (p.stem + SIDECAR_SUFFIX), cloud_n)

        return (lambda p=p: load(p) for p in self.paths)
