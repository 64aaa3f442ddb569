"""Unit tests for trajectory and image metrics."""

import numpy as np
import pytest

from fgo_slam.errors import AllInvalidDepthError, LengthMismatchError, NoAssociationsError, ShapeMismatchError
from fgo_slam.formats import Trajectory
from fgo_slam.geometry import RigidPose, SimilarityTransform, so3_exp
from fgo_slam.metrics import PSNR_CAP_DB, align_trajectory, associate_trajectories, ate_rmse, depth_l1, psnr, ssim


def curved_path(n: int = 10) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)
    return np.column_stack([np.cos(2 * t), np.sin(2 * t), 0.3 * t**2])


class TestAteRmse:
    """Test cases for absolute trajectory error."""

    def test_rigidly_moved_copy(self):
        """Test a rigidly transformed trajectory aligns to zero error."""
        gt = curved_path()
        moved = SimilarityTransform(1.0, so3_exp([0.3, -0.2, 0.5]), [1.0, 2.0, -0.5]).apply(gt)
        assert ate_rmse(moved, gt) == pytest.approx(0.0, abs=1e-12)

    def test_scaled_copy_needs_similarity(self):
        """Test a scaled copy only aligns exactly with scale estimation."""
        gt = curved_path()
        scaled = SimilarityTransform(0.4, so3_exp([0.1, 0.2, 0.3]), [0.5, 0.0, 0.0]).apply(gt)
        assert ate_rmse(scaled, gt) > 1e-3
        assert ate_rmse(scaled, gt, alignment="similarity") == pytest.approx(0.0, abs=1e-12)
        transform, _ = align_trajectory(scaled, gt, alignment="similarity")
        assert transform.scale == pytest.approx(2.5)

    def test_constant_offset_error(self):
        """Test perpendicular noise that alignment cannot absorb is reported as is."""
        gt = np.column_stack([np.zeros(4), np.zeros(4), np.arange(4.0)])
        gt[:, 0] = [0.0, 1.0, 0.0, 1.0]
        est = gt.copy()
        est[:, 1] = [0.1, -0.1, -0.1, 0.1]
        assert ate_rmse(est, gt) == pytest.approx(0.1, rel=1e-6)

    def test_pose_sequences(self):
        """Test pose lists are compared through their camera centers."""
        poses = [RigidPose.look_at(c, [0.0, 0.0, 0.0]) for c in curved_path() + [0.0, -3.0, 0.0]]
        assert ate_rmse(poses, poses) == pytest.approx(0.0, abs=1e-12)

    def test_collinear_trajectories(self):
        """Test straight-line trajectories still align."""
        gt = np.column_stack([np.linspace(-1.0, 1.0, 6), np.zeros(6), np.full(6, 0.9)])
        est = SimilarityTransform(1.0, so3_exp([0.0, 0.0, 0.7]), [0.2, 0.1, 0.0]).apply(gt)
        assert ate_rmse(est, gt) == pytest.approx(0.0, abs=1e-9)
        assert ate_rmse(0.5 * est, gt, alignment="similarity") == pytest.approx(0.0, abs=1e-9)

    def test_length_mismatch(self):
        """Test trajectories must have the same length."""
        with pytest.raises(LengthMismatchError):
            ate_rmse(curved_path(5), curved_path(6))

    def test_empty(self):
        """Test empty trajectories are rejected."""
        with pytest.raises(LengthMismatchError):
            ate_rmse(np.zeros((0, 3)), np.zeros((0, 3)))


class TestAssociation:
    """Test cases for timestamp association."""

    def setup_method(self):
        """Setup test fixtures."""
        quats = np.tile([0.0, 0.0, 0.0, 1.0], (3, 1))
        self.gt = Trajectory(np.array([0.0, 1.0, 2.0]), np.eye(3), quats)

    def test_nearest_within_tolerance(self):
        """Test each estimate pairs with the closest ground truth in time."""
        est = Trajectory(np.array([0.99, 2.005, 5.0]), np.arange(9.0).reshape(3, 3), self.gt.quaternions)
        est_pos, gt_pos = associate_trajectories(est, self.gt, tolerance=0.02)
        np.testing.assert_array_equal(est_pos, [[0.0, 1.0, 2.0], [3.0, 4.0, 5.0]])
        np.testing.assert_array_equal(gt_pos, [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])

    def test_nothing_associates(self):
        """Test disjoint timestamps raise."""
        est = Trajectory(np.array([10.0]), np.zeros((1, 3)), np.array([[0.0, 0.0, 0.0, 1.0]]))
        with pytest.raises(NoAssociationsError):
            associate_trajectories(est, self.gt)


class TestImageMetrics:
    """Test cases for PSNR, SSIM and depth error."""

    def setup_method(self):
        """Setup test fixtures."""
        rng = np.random.default_rng(0)
        self.image = rng.uniform(0.2, 0.8, size=(16, 16, 3))

    def test_identical_images(self):
        """Test identical images hit the PSNR cap and SSIM of one."""
        assert psnr(self.image, self.image) == PSNR_CAP_DB
        assert ssim(self.image, self.image) == pytest.approx(1.0)

    def test_psnr_of_uniform_error(self):
        """Test an error of 0.1 everywhere is 20 dB."""
        assert psnr(self.image + 0.1, self.image) == pytest.approx(20.0)

    def test_ssim_drops_with_noise(self):
        """Test structural similarity falls for a noisy copy."""
        noisy = self.image + np.random.default_rng(1).normal(scale=0.2, size=self.image.shape)
        assert ssim(noisy, self.image) < 0.9

    def test_shape_mismatch(self):
        """Test images must have the same shape."""
        with pytest.raises(ShapeMismatchError):
            psnr(self.image, self.image[:8])

    def test_depth_l1_skips_invalid(self):
        """Test only pixels valid in both maps count."""
        rendered = np.array([[1.0, 2.05], [0.0, 3.0]])
        target = np.array([[1.05, 2.0], [1.0, 0.0]])
        assert depth_l1(rendered, target) == pytest.approx(0.05)

    def test_depth_l1_all_invalid(self):
        """Test maps without shared valid pixels raise."""
        with pytest.raises(AllInvalidDepthError):
            depth_l1(np.zeros((2, 2)), np.ones((2, 2)))
