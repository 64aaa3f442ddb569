"""Unit tests for synthetic scene generation and the synthetic front-end."""

import numpy as np
import pytest

from fgo_slam.frontend import (
    SyntheticFrontend,
    TrackingFrontend,
    landmarks_from_depth,
    landmarks_in_frustum,
)
from fgo_slam.geometry import PinholeCamera, RigidPose, project
from fgo_slam.models import FrontendConfig
from fgo_slam.synthetic import ORBIT_RADIUS, PLANE_HEIGHT, generate_synthetic_scene


class TestGenerateSyntheticScene:
    """Test cases for the synthetic scene generator."""

    def test_deterministic(self):
        """Test the same seed reproduces the same scene."""
        a = generate_synthetic_scene(3, n_gaussians=5, n_frames=3, width=16, height=16, n_landmarks=20)
        b = generate_synthetic_scene(3, n_gaussians=5, n_frames=3, width=16, height=16, n_landmarks=20)
        for x, y in zip(a.images, b.images):
            np.testing.assert_array_equal(x, y)
        np.testing.assert_array_equal(a.landmarks, b.landmarks)

    def test_renders_match_camera(self):
        """Test images and depth maps have the camera size and valid ranges."""
        scene = generate_synthetic_scene(0, n_gaussians=6, n_frames=3, width=20, height=12, n_landmarks=10)
        assert len(scene) == 3
        for image, depth in zip(scene.images, scene.depths):
            assert image.shape == (12, 20, 3)
            assert depth.shape == (12, 20)
            assert image.min() >= 0.0 and image.max() <= 1.0
            assert depth.min() >= 0.0
        assert np.all(np.diff(scene.timestamps) > 0)
        assert scene.extent > 0

    def test_orbit_looks_at_origin(self):
        """Test orbit cameras sit on the orbit circle looking at the origin."""
        scene = generate_synthetic_scene(1, n_gaussians=4, n_frames=5, width=16, height=16, n_landmarks=10)
        for pose in scene.poses:
            centre = pose.camera_center()
            assert np.linalg.norm(centre[:2]) == pytest.approx(ORBIT_RADIUS)
            np.testing.assert_allclose(pose.apply(np.zeros(3))[:2], [0.0, 0.0], atol=1e-9)

    def test_line_is_collinear(self):
        """Test line cameras move along a straight line at a fixed height."""
        scene = generate_synthetic_scene(1, n_gaussians=4, n_frames=6, shape="line", width=16, height=16, n_landmarks=10)
        centres = np.stack([p.camera_center() for p in scene.poses])
        np.testing.assert_allclose(centres[:, 1:], np.broadcast_to([0.0, PLANE_HEIGHT], (6, 2)), atol=1e-12)

    def test_square_loop_closes(self):
        """Test the square trajectory ends where it starts."""
        scene = generate_synthetic_scene(
            1, n_gaussians=4, n_frames=9, shape="square-loop", width=16, height=16, n_landmarks=10
        )
        np.testing.assert_allclose(scene.poses[0].matrix(), scene.poses[-1].matrix(), atol=1e-12)

    @pytest.mark.parametrize(
        "kwargs",
        [{"n_gaussians": 0}, {"n_frames": 1}, {"shape": "spiral"}],
    )
    def test_invalid_arguments(self, kwargs):
        """Test invalid generator arguments are rejected."""
        with pytest.raises(ValueError):
            generate_synthetic_scene(0, **kwargs)


class TestSyntheticFrontend:
    """Test cases for the synthetic correspondence provider."""

    def setup_method(self):
        """Setup test fixtures."""
        self.camera = PinholeCamera.from_fov(32, 32)
        self.toward = RigidPose.look_at([0.0, -3.0, 0.0], [0.0, 0.0, 0.0])
        self.away = RigidPose.look_at([0.0, -3.0, 0.0], [0.0, -6.0, 0.0])
        self.landmarks = np.array([[0.0, 0.0, 0.0], [0.2, 0.1, -0.1]])

    def test_noise_free_projection(self):
        """Test observations are exact projections with their depth."""
        frontend = SyntheticFrontend(self.landmarks, [self.toward], self.camera)
        observations = frontend.observe(0)
        assert [o.landmark for o in observations] == [0, 1]
        for obs in observations:
            np.testing.assert_allclose(obs.pixel, project(self.camera, self.toward, self.landmarks[obs.landmark]))
            assert obs.depth == pytest.approx(self.toward.apply(self.landmarks[obs.landmark])[2])
        assert isinstance(frontend, TrackingFrontend)

    def test_monocular_has_no_depth(self):
        """Test depth is withheld without a depth sensor."""
        frontend = SyntheticFrontend(self.landmarks, [self.toward], self.camera, with_depth=False)
        assert all(o.depth is None for o in frontend.observe(0))

    def test_frames_in_order(self):
        """Test observing a frame twice is rejected."""
        frontend = SyntheticFrontend(self.landmarks, [self.toward, self.toward], self.camera)
        frontend.observe(1)
        with pytest.raises(ValueError):
            frontend.observe(0)

    def test_relabel_after_long_absence(self):
        """Test a landmark unseen for more than the gap gets a fresh track id."""
        poses = [self.toward] + [self.away] * 11 + [self.toward]
        frontend = SyntheticFrontend(self.landmarks, poses, self.camera, FrontendConfig(relabel_gap=10))
        first = {o.landmark: o.track_id for o in frontend.observe(0)}
        for i in range(1, 12):
            assert frontend.observe(i) == []
        again = {o.landmark: o.track_id for o in frontend.observe(12)}
        assert set(first.values()).isdisjoint(again.values())

    def test_short_absence_keeps_track(self):
        """Test a brief occlusion keeps the track id."""
        poses = [self.toward, self.away, self.toward]
        frontend = SyntheticFrontend(self.landmarks, poses, self.camera)
        first = [o.track_id for o in frontend.observe(0)]
        frontend.observe(1)
        assert [o.track_id for o in frontend.observe(2)] == first

    def test_outliers_are_displaced(self):
        """Test every observation moves by the outlier magnitude at ratio close to one."""
        config = FrontendConfig(outlier_ratio=0.999, outlier_magnitude=5.0)
        frontend = SyntheticFrontend(self.landmarks, [self.toward], self.camera, config, seed=1)
        for obs in frontend.observe(0):
            exact = project(self.camera, self.toward, self.landmarks[obs.landmark])
            assert np.linalg.norm(obs.pixel - exact) == pytest.approx(5.0)


class TestLandmarkStandIns:
    """Test cases for landmarks derived from real sequences."""

    def test_landmarks_from_depth(self):
        """Test back-projected landmarks lie at the sensed depth."""
        camera = PinholeCamera.from_fov(8, 6)
        depths = [np.full((6, 8), 2.0), np.zeros((6, 8))]
        poses = [RigidPose.identity(), RigidPose.identity()]
        points = landmarks_from_depth(depths, poses, camera, 10, np.random.default_rng(0))
        assert points.shape == (5, 3)
        np.testing.assert_allclose(points[:, 2], 2.0)

    def test_landmarks_from_depth_length_mismatch(self):
        """Test a depth map per pose is required."""
        with pytest.raises(ValueError):
            landmarks_from_depth([np.ones((2, 2))], [], PinholeCamera.from_fov(2, 2), 4, np.random.default_rng(0))

    def test_landmarks_in_frustum(self):
        """Test frustum landmarks project into the image within the depth range."""
        camera = PinholeCamera.from_fov(16, 16)
        pose = RigidPose.look_at([1.0, -2.0, 0.5], [0.0, 0.0, 0.0])
        points = landmarks_in_frustum([pose], camera, 30, np.random.default_rng(2), near=0.5, far=3.0)
        assert points.shape == (30, 3)
        z = pose.apply(points)[:, 2]
        assert np.all((z >= 0.5) & (z <= 3.0))
        pixels = camera.project_camera(pose.apply(points))
        assert camera.in_image(pixels).all()
