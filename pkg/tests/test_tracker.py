"""Tests for frame-by-frame tracking on synthetic sequences."""

import numpy as np
import pytest

from fgo_slam.frontend import SyntheticFrontend
from fgo_slam.metrics import ate_rmse
from fgo_slam.models import FrontendConfig, TrackingConfig
from fgo_slam.synthetic import generate_synthetic_scene
from fgo_slam.tracker import Tracker, TrackingFrame


def run_tracker(scene, mode="rgbd", config=None, frontend_config=None):
    tracker = Tracker(scene.camera, config or TrackingConfig(), mode=mode, seed=0)
    frontend = SyntheticFrontend.from_scene(scene, frontend_config, seed=0, with_depth=(mode == "rgbd"))
    results = []
    for i in range(len(scene)):
        frame = TrackingFrame(i, float(scene.timestamps[i]), frontend.observe(i), scene.images[i], scene.depths[i])
        results.append(tracker.process(frame))
    return tracker, results


def relative_ground_truth(scene):
    first = scene.poses[0]
    return [pose @ first.inverse() for pose in scene.poses]


class TestTracker:
    """Test cases for the tracker."""

    def setup_method(self):
        """Setup test fixtures."""
        self.scene = generate_synthetic_scene(0, n_gaussians=8, n_frames=10, width=32, height=32, n_landmarks=200)

    def test_unknown_mode(self):
        """Test an unknown sensor mode is rejected."""
        with pytest.raises(ValueError):
            Tracker(self.scene.camera, mode="stereo")

    def test_rgbd_tracks_noise_free_orbit(self):
        """Test noise-free RGB-D tracking recovers the trajectory in the first camera's frame."""
        tracker, results = run_tracker(self.scene)
        trajectory = tracker.trajectory()
        assert len(trajectory) == len(self.scene)
        assert results[0].keyframe_id == 0
        for estimate, truth in zip(trajectory, relative_ground_truth(self.scene)):
            translation_err, rotation_err = estimate.distance(truth)
            assert translation_err < 1e-4
            assert rotation_err < 1e-4
        assert tracker.timestamps() == pytest.approx(list(self.scene.timestamps))

    def test_publish_snapshots(self):
        """Test snapshots are published once per change."""
        tracker, _ = run_tracker(self.scene)
        snapshot = tracker.publish()
        assert snapshot is not None
        assert set(snapshot.keyframes) == set(tracker.keyframes)
        assert tracker.publish() is None
        snapshot.keyframes[0].point_ids.clear()
        assert tracker.keyframes[0].point_ids

    def test_line_has_no_loop(self):
        """Test a straight sweep never closes a loop."""
        scene = generate_synthetic_scene(
            2, n_gaussians=12, n_frames=12, shape="line", width=32, height=32, n_landmarks=300
        )
        tracker, results = run_tracker(scene, config=TrackingConfig(loop_min_gap=2))
        assert tracker.loops == []
        assert all(r.loop is None for r in results)

    @pytest.mark.slow
    def test_monocular_initializes_up_to_scale(self):
        """Test monocular tracking matches the trajectory after similarity alignment."""
        scene = generate_synthetic_scene(4, n_gaussians=10, n_frames=12, width=48, height=48, n_landmarks=300)
        tracker, results = run_tracker(scene, mode="mono")
        assert not results[0].initialized
        assert tracker.initialized
        error = ate_rmse(tracker.trajectory(), relative_ground_truth(scene), alignment="similarity")
        assert error < 1e-3

    @pytest.mark.slow
    def test_square_loop_with_drift_is_corrected(self):
        """Test injected drift is detected as a loop and the correction lowers the trajectory error."""
        scene = generate_synthetic_scene(
            5, n_gaussians=30, n_frames=48, shape="square-loop", width=48, height=48, n_landmarks=600
        )
        config = TrackingConfig(loop_min_gap=8, drift_translation=(0.004, 0.0, 0.0), drift_yaw_deg=0.2)
        tracker, _ = run_tracker(scene, config=config, frontend_config=FrontendConfig(relabel_gap=10))
        assert tracker.loops
        truth = relative_ground_truth(scene)
        before = tracker.loops[0].trajectory_before
        after = tracker.trajectory()[: len(before)]
        assert ate_rmse(after, truth[: len(before)]) < ate_rmse(before, truth[: len(before)])
