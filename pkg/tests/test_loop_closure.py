"""Unit tests for loop detection and correction."""

import numpy as np
import pytest

from fgo_slam.geometry import PinholeCamera, RigidPose, SimilarityTransform, project, so3_exp
from fgo_slam.loop_closure import correct_loop, detect_loop, fuse_points
from fgo_slam.models import TrackingConfig
from fgo_slam.tracking import Keyframe, LoopConstraint, MapPoint, Observation

CAMERA = PinholeCamera.from_fov(64, 64)


def revisit_map(offset=(0.0, 0.0, 0.0), n: int = 12):
    """Keyframe 0 and keyframe 60 see the same landmarks through different map points.

    The second set of points is displaced by ``offset``, the way drift would leave it.
    """
    rng = np.random.default_rng(0)
    landmarks = rng.uniform(-0.5, 0.5, size=(n, 3))
    pose = RigidPose.look_at([0.0, -2.5, 0.3], [0.0, 0.0, 0.0])
    keyframes = {
        0: Keyframe(id=0, pose=pose, camera=CAMERA, point_ids=set(range(n))),
        60: Keyframe(id=60, pose=pose, camera=CAMERA, point_ids=set(range(100, 100 + n))),
    }
    points = {}
    for i, p in enumerate(landmarks):
        pixel = project(CAMERA, pose, p)
        points[i] = MapPoint(i, p, [Observation(0, pixel)], landmark=i)
        points[100 + i] = MapPoint(100 + i, p + offset, [Observation(60, pixel)], landmark=i)
    return keyframes, points


class TestDetectLoop:
    """Test cases for loop detection."""

    def test_revisit_is_detected(self):
        """Test a revisit with shifted points yields the inverse shift."""
        keyframes, points = revisit_map(offset=(0.2, -0.1, 0.05))
        constraint = detect_loop(keyframes, points, 60)
        assert constraint is not None
        assert (constraint.a, constraint.b) == (0, 60)
        assert len(constraint.matches) == 12
        np.testing.assert_allclose(constraint.similarity.translation, [-0.2, 0.1, -0.05], atol=1e-9)
        np.testing.assert_allclose(constraint.similarity.rotation, np.eye(3), atol=1e-9)
        assert constraint.similarity.scale == 1.0

    def test_gap_too_small(self):
        """Test keyframes closer than the minimum gap are not loop candidates."""
        keyframes, points = revisit_map()
        assert detect_loop(keyframes, points, 60, TrackingConfig(loop_min_gap=61)) is None

    def test_same_points_are_not_a_loop(self):
        """Test landmarks tracked through the same points do not count."""
        keyframes, points = revisit_map()
        keyframes[60].point_ids = set(range(12))
        assert detect_loop(keyframes, points, 60) is None

    def test_similarity_with_scale(self):
        """Test monocular detection recovers a scale change."""
        keyframes, points = revisit_map()
        for i in range(100, 112):
            points[i].position = 1.5 * points[i].position
        constraint = detect_loop(keyframes, points, 60, with_scale=True)
        assert constraint is not None
        assert constraint.similarity.scale == pytest.approx(1.0 / 1.5)


class TestCorrectLoop:
    """Test cases for loop correction."""

    def test_identity_constraint_only_fuses(self):
        """Test an identity similarity leaves every pose in place."""
        keyframes, points = revisit_map()
        before = {k: kf.pose.matrix() for k, kf in keyframes.items()}
        constraint = LoopConstraint(0, 60, SimilarityTransform.identity(), tuple((i, 100 + i) for i in range(12)))
        result = correct_loop(keyframes, points, constraint, run_ba=False)
        for k, kf in keyframes.items():
            np.testing.assert_allclose(kf.pose.matrix(), before[k], atol=1e-12)
        assert len(points) == 12
        assert result.fused == {100 + i: i for i in range(12)}
        assert keyframes[60].point_ids == set(range(12))

    def test_correction_is_blended(self):
        """Test intermediate keyframes get a fraction of the loop correction."""
        pose = RigidPose.identity()
        keyframes = {k: Keyframe(id=k, pose=pose, camera=CAMERA) for k in (0, 5, 10)}
        shift = SimilarityTransform(1.0, so3_exp([0.0, 0.0, 0.2]), [1.0, 0.0, 0.0])
        matches = ((0, 1), (2, 3), (4, 5))
        constraint = LoopConstraint(0, 10, shift, matches)
        result = correct_loop(keyframes, {}, constraint, run_ba=False)
        assert set(result.corrections) == {5, 10}
        np.testing.assert_allclose(keyframes[0].pose.camera_center(), [0.0, 0.0, 0.0])
        np.testing.assert_allclose(keyframes[5].pose.camera_center(), [0.5, 0.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(keyframes[10].pose.camera_center(), [1.0, 0.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(keyframes[10].pose.rotation, so3_exp([0.0, 0.0, 0.2]).T, atol=1e-12)

    def test_points_follow_last_observer(self):
        """Test points move with the keyframe that last observed them."""
        keyframes = {k: Keyframe(id=k, pose=RigidPose.identity(), camera=CAMERA) for k in (0, 10)}
        points = {
            0: MapPoint(0, [0.0, 0.0, 2.0], [Observation(0, [32.0, 32.0])]),
            1: MapPoint(1, [0.0, 0.0, 2.0], [Observation(0, [32.0, 32.0]), Observation(10, [32.0, 32.0])]),
        }
        shift = SimilarityTransform(1.0, np.eye(3), [0.0, 0.3, 0.0])
        correct_loop(keyframes, points, LoopConstraint(0, 10, shift, ((5, 6), (7, 8), (9, 11))), run_ba=False)
        np.testing.assert_allclose(points[0].position, [0.0, 0.0, 2.0])
        np.testing.assert_allclose(points[1].position, [0.0, 0.3, 2.0])

    def test_fuse_points_merges_observations(self):
        """Test fusing keeps one observation per keyframe and drops the duplicate point."""
        keyframes = {k: Keyframe(id=k, pose=RigidPose.identity(), camera=CAMERA) for k in (0, 1, 2)}
        keyframes[0].point_ids = {0}
        keyframes[1].point_ids = {0, 1}
        keyframes[2].point_ids = {1}
        points = {
            0: MapPoint(0, [0.0, 0.0, 2.0], [Observation(0, [1.0, 1.0]), Observation(1, [2.0, 2.0])]),
            1: MapPoint(1, [0.0, 0.0, 2.1], [Observation(1, [3.0, 3.0]), Observation(2, [4.0, 4.0])]),
        }
        fuse_points(keyframes, points, keep=0, drop=1)
        assert list(points) == [0]
        assert points[0].keyframe_ids() == [0, 1, 2]
        np.testing.assert_allclose(points[0].observations[1].pixel, [2.0, 2.0])
        assert keyframes[1].point_ids == {0}
        assert keyframes[2].point_ids == {0}
