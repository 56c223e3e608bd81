import os
import struct

import numpy as np
import pytest
from hypothesis import given

from kddloam.cloud import PointCloud
from kddloam.errors import FieldCountMismatch, IoFailure, NonNumeric, SizeNotMultipleOf16
from kddloam.geometry import Pose, random_pose
from kddloam.io import (
    ScanSource,
    azimuth_timestamps,
    format_pose,
    parse_poses,
    read_poses,
    read_scan_bin,
    write_map,
    write_poses,
    write_scan_bin,
)
from kddloam.voxelmap import VoxelHashMap

from strategies import poses


class TestScanBin:
    def test_hand_built_bytes(self, tmp_path):
        path = tmp_path / "s.bin"
        path.write_bytes(struct.pack("<8f", 1, 2, 3, 0.5, 4, 5, 6, 0.1))
        c = read_scan_bin(path)
        np.testing.assert_array_equal(c.positions, [[1, 2, 3], [4, 5, 6]])
        np.testing.assert_allclose(c.intensity, [0.5, 0.1], rtol=1e-7)

    def test_empty(self, tmp_path):
        (tmp_path / "e.bin").write_bytes(b"")
        assert len(read_scan_bin(tmp_path / "e.bin")) == 0

    def test_bad_size(self, tmp_path):
        (tmp_path / "b.bin").write_bytes(b"\0" * 20)
        with pytest.raises(SizeNotMultipleOf16):
            read_scan_bin(tmp_path / "b.bin")

    def test_missing(self, tmp_path):
        with pytest.raises(IoFailure):
            read_scan_bin(tmp_path / "nope.bin")

    def test_round_trip(self, tmp_path, rng):
        pts = rng.normal(size=(50, 3)).astype(np.float32).astype(float)
        write_scan_bin(tmp_path / "r.bin", PointCloud(pts, intensity=np.ones(50)))
        back = read_scan_bin(tmp_path / "r.bin")
        np.testing.assert_array_equal(back.positions, pts)

    def test_full_revolution_timestamps(self):
        # counter-clockwise sweep starting at azimuth 0.3 rad
        az = 0.3 + np.linspace(0, 2 * np.pi, 720, endpoint=False)
        pts = np.c_[10 * np.cos(az), 10 * np.sin(az), np.zeros(720)]
        s = azimuth_timestamps(pts)
        assert s[0] == 0.0 and s.min() >= 0.0 and s.max() <= 1.0
        assert np.all(np.diff(s) > 0)
        np.testing.assert_allclose(s, (az - az[0]) / (2 * np.pi), atol=1e-12)


class TestPoses:
    def test_identity_line(self):
        (p,) = parse_poses("1 0 0 0 0 1 0 0 0 0 1 0\n")
        assert p.allclose(Pose.identity(), atol=0.0)

    def test_row_major(self):
        (p,) = parse_poses("1 0 0 7 0 1 0 8 0 0 1 9")
        np.testing.assert_array_equal(p.translation, [7, 8, 9])

    def test_round_trip_100(self, tmp_path, rng):
        ps = [random_pose(rng, None, 100.0) for _ in range(100)]
        write_poses(tmp_path / "p.txt", ps)
        back = read_poses(tmp_path / "p.txt")
        err = max(np.abs(a.as_matrix() - b.as_matrix()).max() for a, b in zip(ps, back))
        assert err < 1e-9

    @given(poses())
    def test_format_parse_exact(self, p):
        (back,) = parse_poses(format_pose(p))
        np.testing.assert_array_equal(back.as_matrix(), p.as_matrix())

    def test_field_count(self):
        with pytest.raises(FieldCountMismatch) as err:
            parse_poses("1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 0 0 1 0 0 0 0 1\n")
        assert err.value.line == 2 and err.value.count == 11

    def test_non_numeric(self):
        with pytest.raises(NonNumeric) as err:
            parse_poses("1 0 0 0 0 1 0 x 0 0 1 0")
        assert err.value.token == "x"

    def test_blank_lines_skipped(self):
        assert len(parse_poses("\n1 0 0 0 0 1 0 0 0 0 1 0\n\n")) == 1


class TestScanSource:
    def test_lexicographic_order(self, tmp_path):
        names = ["010.bin", "002.bin", "001.bin", "notes.txt"]
        for n in names:
            (tmp_path / n).write_bytes(b"")
        src = ScanSource.from_directory(tmp_path)
        assert [p.name for p in src.paths] == ["001.bin", "002.bin", "010.bin"]
        assert len(list(src.scans())) == 3 and src.features() is None

    def test_empty_directory(self, tmp_path):
        with pytest.raises(IoFailure):
            ScanSource.from_directory(tmp_path)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(IoFailure):
            ScanSource.from_directory(tmp_path / "nope")

    def test_sidecar_lookup(self, tmp_path):
        scans, feats = tmp_path / "s", tmp_path / "f"
        scans.mkdir()
        feats.mkdir()
        (scans / "000.bin").write_bytes(struct.pack("<4f", 1, 2, 3, 0))
        src = ScanSource.from_directory(scans, feats)
        (loader,) = list(src.features())
        with pytest.raises(IoFailure):
            loader()


def test_write_map(tmp_path):
    m = VoxelHashMap(1.0, n_max=3, min_point_spacing=0.0)
    m.insert_points([[0.1, 0.1, 0.5], [0.9, 0.1, 0.5], [0.5, 0.9, 0.5], [5.5, 5.5, 5.5]])
    n = write_map(tmp_path / "m.txt", m)
    lines = (tmp_path / "m.txt").read_text().splitlines()
    assert n == len(lines) == 2
    assert lines[0].startswith("S ") and len(lines[0].split()) == 8
    assert lines[1] == "P 5.5 5.5 5.5"


def test_writer_failure(tmp_path):
    with pytest.raises(IoFailure):
        write_poses(tmp_path / "missing" / "p.txt", [Pose.identity()])
