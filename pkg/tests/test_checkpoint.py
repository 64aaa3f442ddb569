"""Unit tests for map checkpoints."""

import struct

import numpy as np
import pytest

from fgo_slam.checkpoint import (
    FORMAT_VERSION,
    MAGIC,
    Checkpoint,
    KeyframeView,
    load_checkpoint,
    save_checkpoint,
)
from fgo_slam.errors import CheckpointFormatError, MissingFileError
from fgo_slam.geometry import GaussianPrimitive, PinholeCamera, RigidPose
from fgo_slam.models import RunConfig
from fgo_slam.renderer import GaussianMap


def as_array(t):
    return t.detach().numpy()


class TestCheckpoint:
    """Test cases for checkpoint save and load."""

    def setup_method(self):
        """Setup test fixtures."""
        prims = [
            GaussianPrimitive([0.1, 0.2, 0.3], [0.9, 0.1, 0.0, 0.2], [0.05, 0.1, 0.02], 0.7, (0.2, 0.4, 0.6)),
            GaussianPrimitive.isotropic([-1.0, 0.5, 2.0], 0.3, 0.4, (1.0, 0.0, 0.5)),
        ]
        self.gmap = GaussianMap.from_primitives(prims, anchors=[3, -1])
        self.views = [
            KeyframeView(0, RigidPose.identity(), PinholeCamera.from_fov(64, 48)),
            KeyframeView(7, RigidPose.look_at([1.0, -2.0, 0.5], [0, 0, 0]), PinholeCamera(fx=500.0, fy=510.0, cx=319.5, cy=239.5, width=640, height=480)),
        ]
        self.config = RunConfig(mode="mono", width=32, seed=9)

    def save(self, tmp_path):
        return save_checkpoint(tmp_path / "map.ckpt", Checkpoint(self.gmap, self.config, 42, self.views))

    def test_round_trip(self, tmp_path):
        """Test parameters, anchors, views, iteration and config survive a save/load cycle."""
        loaded = load_checkpoint(self.save(tmp_path))
        for name in ("means", "quats", "log_scales", "opacity_logits", "colors"):
            np.testing.assert_array_equal(as_array(getattr(loaded.gmap, name)), as_array(getattr(self.gmap, name)))
        np.testing.assert_array_equal(loaded.gmap.anchors, [3, -1])
        assert loaded.iteration == 42
        assert loaded.config.mode == "mono"
        assert loaded.config.width == 32
        assert loaded.config.seed == 9
        assert [v.id for v in loaded.views] == [0, 7]
        for a, b in zip(loaded.views, self.views):
            np.testing.assert_array_equal(a.pose.matrix(), b.pose.matrix())
            assert a.camera == b.camera
        assert len(loaded.view_tuples()) == 2

    def test_empty_map(self, tmp_path):
        """Test a map without Gaussians or views round-trips."""
        path = save_checkpoint(tmp_path / "map.ckpt", Checkpoint(GaussianMap.empty(), self.config))
        loaded = load_checkpoint(path)
        assert len(loaded.gmap) == 0
        assert loaded.views == []

    def test_sentry_dsn_is_not_stored(self, tmp_path):
        """Test the error tracking DSN stays out of the file."""
        self.config = RunConfig(sentry_dsn="https://key@example.invalid/1")
        data = self.save(tmp_path).read_bytes()
        assert b"example.invalid" not in data

    def test_bad_magic(self, tmp_path):
        """Test files without the magic prefix are rejected."""
        path = tmp_path / "map.ckpt"
        path.write_bytes(b"NOTAMAP" + bytes(32))
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)

    def test_wrong_version(self, tmp_path):
        """Test an unknown format version is rejected."""
        path = self.save(tmp_path)
        data = path.read_bytes()
        path.write_bytes(MAGIC + struct.pack("<I", FORMAT_VERSION + 1) + data[len(MAGIC) + 4:])
        with pytest.raises(CheckpointFormatError, match="version"):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        """Test a cut-off file is reported as truncated."""
        path = self.save(tmp_path)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(CheckpointFormatError, match="truncated"):
            load_checkpoint(path)

    def test_trailing_bytes(self, tmp_path):
        """Test extra bytes after the payload are rejected."""
        path = self.save(tmp_path)
        path.write_bytes(path.read_bytes() + b"\0")
        with pytest.raises(CheckpointFormatError, match="trailing"):
            load_checkpoint(path)

    def test_invalid_config(self, tmp_path):
        """Test an embedded config that fails validation is rejected."""
        config = b"mode: stereo\n"
        path = tmp_path / "map.ckpt"
        path.write_bytes(
            MAGIC + struct.pack("<I", FORMAT_VERSION) + struct.pack("<I", len(config)) + config + bytes(16)
        )
        with pytest.raises(CheckpointFormatError, match="config"):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        """Test loading a missing checkpoint."""
        with pytest.raises(MissingFileError):
            load_checkpoint(tmp_path / "nope.ckpt")
