"""Integration tests for the FGO-SLAM CLI."""

import json
from pathlib import Path

import numpy as np
import pytest
from typer.testing import CliRunner

from fgo_slam.formats import Trajectory, read_ply, write_tum
from fgo_slam.geometry import RigidPose
from fgo_slam.main import app


class TestIntegration:
    """Integration tests for the full application workflow."""

    def setup_method(self):
        """Setup test fixtures."""
        self.runner = CliRunner()

    def test_cli_help_command(self):
        """Test CLI help command."""
        result = self.runner.invoke(app, ["--help"])
        assert result.exit_code == 0
        for command in ("run", "extract-mesh", "eval", "render"):
            assert command in result.output

    def test_cli_version_command(self):
        """Test CLI version command."""
        result = self.runner.invoke(app, ["--version"])
        assert result.exit_code == 0
        assert "FGO-SLAM CLI v0.1.0" in result.output

    def test_run_command_help(self):
        """Test run command help."""
        result = self.runner.invoke(app, ["run", "--help"])
        assert result.exit_code == 0
        assert "--data" in result.output
        assert "--workers" in result.output

    def test_eval_prints_ate(self, tmp_path: Path):
        """Test eval prints the ATE as a machine-readable line."""
        stamps = [0.0, 0.1, 0.2, 0.3]
        poses = [RigidPose.look_at([np.cos(a), np.sin(a), 0.1 * a], [0, 0, 0]) for a in (0.0, 0.5, 1.0, 1.5)]
        gt = write_tum(tmp_path / "gt.txt", Trajectory.from_poses(stamps, poses))

        result = self.runner.invoke(app, ["eval", "--est", str(gt), "--gt", str(gt)])

        assert result.exit_code == 0
        key, value = result.output.strip().splitlines()[-1].split()
        assert key == "ate_rmse_m"
        assert float(value) == pytest.approx(0.0, abs=1e-9)

    def test_eval_without_associations(self, tmp_path: Path):
        """Test eval reports a one-line error when timestamps never match."""
        poses = [RigidPose.identity()] * 3
        est = write_tum(tmp_path / "est.txt", Trajectory.from_poses([0.0, 1.0, 2.0], poses))
        gt = write_tum(tmp_path / "gt.txt", Trajectory.from_poses([10.0, 11.0, 12.0], poses))

        result = self.runner.invoke(app, ["eval", "--est", str(est), "--gt", str(gt)])

        assert result.exit_code == 1
        assert result.output.strip().splitlines()[-1].startswith("error: no-associations: ")

    def test_missing_checkpoint(self, tmp_path: Path):
        """Test a missing checkpoint exits non-zero with a one-line error."""
        result = self.runner.invoke(app, ["extract-mesh", "--checkpoint", str(tmp_path / "nope.ckpt")])

        assert result.exit_code == 1
        assert result.output.strip().splitlines()[-1].startswith("error: missing-file: checkpoint not found")

    def test_unknown_synthetic_option(self, tmp_path: Path):
        """Test a malformed data source is reported on one line."""
        result = self.runner.invoke(app, ["run", "--data", "synthetic:orbit,radius=2", "--out", str(tmp_path)])

        assert result.exit_code == 1
        assert result.output.strip().splitlines()[-1].startswith("error: ValueError: unknown synthetic scene option")

    def test_run_with_invalid_config(self, tmp_path: Path):
        """Test an out-of-range config value stops the run before anything is written."""
        config = tmp_path / "bad.yaml"
        config.write_text("extraction:\n  tau: 1.5\n")
        out = tmp_path / "out"

        result = self.runner.invoke(
            app, ["run", "--data", "synthetic:orbit", "--config", str(config), "--out", str(out)]
        )

        assert result.exit_code == 1
        last = result.output.strip().splitlines()[-1]
        assert last.startswith("error: invalid-config: invalid value for extraction.tau")
        assert not out.exists()

    def test_run_with_unparseable_config(self, tmp_path: Path):
        """Test a config file that is not YAML exits non-zero."""
        config = tmp_path / "bad.yaml"
        config.write_text("mode: [unclosed\n")

        result = self.runner.invoke(
            app, ["run", "--data", "synthetic:orbit", "--config", str(config), "--out", str(tmp_path / "out")]
        )

        assert result.exit_code == 1
        assert result.output.strip().splitlines()[-1].startswith("error: invalid-config: ")

    @pytest.mark.slow
    def test_run_then_extract_and_render(self, tmp_path: Path):
        """Test a full run followed by mesh extraction and rendering from its checkpoint."""
        config = tmp_path / "config.yaml"
        config.write_text(
            "width: 24\nheight: 24\neval_every: 3\n"
            "optimizer:\n  iterations_per_keyframe: 2\n  densify: false\n"
            "frontend:\n  n_landmarks: 200\n"
        )
        out = tmp_path / "out"
        result = self.runner.invoke(
            app,
            ["run", "--data", "synthetic:orbit,gaussians=6,frames=6", "--config", str(config), "--out", str(out)],
        )
        assert result.exit_code == 0, result.output
        for name in ("trajectory.txt", "map.ckpt", "mesh.ply", "metrics.json", "frames.csv"):
            assert (out / name).is_file()
        assert json.loads((out / "metrics.json").read_text())["ate_rmse_m"] < 1e-3

        mesh_out = tmp_path / "remesh.ply"
        result = self.runner.invoke(
            app, ["extract-mesh", "--checkpoint", str(out / "map.ckpt"), "--tau", "0.3", "--out", str(mesh_out)]
        )
        assert result.exit_code == 0, result.output
        assert mesh_out.is_file()
        read_ply(mesh_out)

        render_out = tmp_path / "render.png"
        result = self.runner.invoke(
            app, ["render", "--checkpoint", str(out / "map.ckpt"), "--pose", "0", "--out", str(render_out)]
        )
        assert result.exit_code == 0, result.output
        assert render_out.is_file()
