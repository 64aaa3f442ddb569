"""Unit tests for map optimization."""

import numpy as np
import pytest
import torch

from fgo_slam.errors import DivergenceError
from fgo_slam.geometry import GaussianPrimitive, PinholeCamera, RigidPose
from fgo_slam.losses import LossBreakdown
from fgo_slam.map_optimizer import (
    SPLIT_SHRINK,
    GradientStats,
    MapOptimizer,
    densify_and_prune,
    loss_curve,
    optimize_map,
    points_extent,
    reanchor,
    seed_gaussians,
    select_window,
    trailing_mean,
)
from fgo_slam.models import OptimizerConfig
from fgo_slam.renderer import GaussianMap, render
from fgo_slam.tracking import Keyframe, MapPoint, Observation


def small_scene():
    camera = PinholeCamera.from_fov(12, 12)
    prims = [
        GaussianPrimitive.isotropic([0.1, 0.0, 0.0], 0.25, 0.7, (0.9, 0.1, 0.1)),
        GaussianPrimitive.isotropic([-0.2, 0.1, 0.2], 0.2, 0.6, (0.1, 0.8, 0.2)),
        GaussianPrimitive.isotropic([0.0, -0.2, -0.1], 0.3, 0.5, (0.2, 0.2, 0.9)),
    ]
    poses = [
        RigidPose.look_at([0.3 * i, -2.5, 0.4], [0.0, 0.0, 0.0]) for i in range(3)
    ]
    keyframes = {}
    for i, pose in enumerate(poses):
        image = render(camera, pose, GaussianMap.from_primitives(prims)).color.detach().numpy()
        keyframes[i] = Keyframe(id=i, pose=pose, camera=camera, image=image)
    return prims, keyframes


def pixel_points(n: int, spacing: float) -> list:
    return [
        MapPoint(i, [spacing * i, 0.0, 2.0], [Observation(0, [1.2 + i, 2.7])])
        for i in range(n)
    ]


class TestSeeding:
    """Test cases for seeding Gaussians from map points."""

    def setup_method(self):
        """Setup test fixtures."""
        image = np.zeros((8, 8, 3))
        image[2, 1] = [1.0, 0.0, 0.0]
        camera = PinholeCamera.from_fov(8, 8)
        self.keyframes = {0: Keyframe(id=0, pose=RigidPose.identity(), camera=camera, image=image)}

    def test_points_extent(self):
        """Test the extent is the bounding box diagonal."""
        corners = np.array([[0, 0, 0], [1, 1, 1], [0.5, 0.2, 0.1]], dtype=float)
        assert points_extent(corners) == pytest.approx(np.sqrt(3.0))
        assert points_extent(np.zeros((0, 3))) == 0.0

    def test_scale_is_mean_neighbour_distance(self):
        """Test evenly spaced points get their spacing as scale."""
        config = OptimizerConfig()
        gaussians = seed_gaussians(pixel_points(6, 0.1), self.keyframes, config, extent=10.0)
        assert len(gaussians) == 6
        # the inner points see neighbours at 0.1, 0.1 and 0.2
        assert gaussians[2].scale[0] == pytest.approx(0.4 / 3.0)
        assert all(g.opacity == pytest.approx(config.seed_opacity) for g in gaussians)

    def test_scale_is_clamped(self):
        """Test scales are clamped to a tenth of the extent and to the minimum."""
        config = OptimizerConfig(seed_min_scale=0.05)
        wide = seed_gaussians(pixel_points(4, 1.0), self.keyframes, config, extent=2.0)
        assert all(g.scale[0] == pytest.approx(0.2) for g in wide)
        tight = seed_gaussians(pixel_points(4, 0.001), self.keyframes, config, extent=2.0)
        assert all(g.scale[0] == pytest.approx(0.05) for g in tight)

    def test_color_from_first_keyframe(self):
        """Test the color is read at the observed pixel."""
        gaussians = seed_gaussians(pixel_points(2, 0.1), self.keyframes)
        np.testing.assert_allclose(gaussians[0].color, [1.0, 0.0, 0.0])
        np.testing.assert_allclose(gaussians[1].color, [0.0, 0.0, 0.0])

    def test_no_points(self):
        """Test seeding nothing."""
        assert seed_gaussians([], self.keyframes) == []


class TestDensifyAndPrune:
    """Test cases for adaptive density control."""

    def setup_method(self):
        """Setup test fixtures."""
        self.config = OptimizerConfig()

    def stats_for(self, grads) -> GradientStats:
        stats = GradientStats(len(grads))
        stats.accumulate(torch.tensor([[g, 0.0, 0.0] for g in grads], dtype=torch.float64))
        return stats

    def test_unchanged_map_is_returned_as_is(self):
        """Test a map with nothing to do comes back as the same object."""
        gmap = GaussianMap.from_primitives([GaussianPrimitive.isotropic([0, 0, 0], 0.001, 0.5)])
        assert densify_and_prune(gmap, self.stats_for([0.0]), self.config) is gmap

    def test_transparent_gaussians_are_pruned(self):
        """Test near-zero opacity Gaussians are removed."""
        gmap = GaussianMap.from_primitives(
            [GaussianPrimitive.isotropic([0, 0, 0], 0.001, 0.5), GaussianPrimitive.isotropic([1, 0, 0], 0.001, 1e-4)],
            anchors=[3, 4],
        )
        out = densify_and_prune(gmap, self.stats_for([0.0, 0.0]), self.config)
        assert len(out) == 1
        assert out.anchors.tolist() == [3]

    def test_small_gaussian_is_cloned(self):
        """Test a small high-gradient Gaussian gets an identical copy."""
        gmap = GaussianMap.from_primitives(
            [GaussianPrimitive.isotropic([0, 0, 0], 0.001, 0.5), GaussianPrimitive.isotropic([1, 0, 0], 0.001, 0.5)]
        )
        out = densify_and_prune(gmap, self.stats_for([1e-3, 0.0]), self.config, extent=1.0)
        assert len(out) == 3
        np.testing.assert_allclose(out.means[2].detach().numpy(), [0.0, 0.0, 0.0])

    def test_large_gaussian_is_split_preserving_volume(self):
        """Test a large high-gradient Gaussian becomes two children of equal total volume."""
        gmap = GaussianMap.from_primitives([GaussianPrimitive.isotropic([0, 0, 0], 0.1, 0.5)])
        out = densify_and_prune(gmap, self.stats_for([1e-3]), self.config, extent=1.0, seed=7)
        assert len(out) == 2
        child_scales = torch.exp(out.log_scales).detach().numpy()
        np.testing.assert_allclose(child_scales, 0.1 / SPLIT_SHRINK)
        assert np.prod(child_scales, axis=1).sum() == pytest.approx(0.1**3)

    def test_cap_is_respected(self):
        """Test densification stops at max_gaussians."""
        config = OptimizerConfig(max_gaussians=2)
        gmap = GaussianMap.from_primitives(
            [GaussianPrimitive.isotropic([0, 0, 0], 0.001, 0.5), GaussianPrimitive.isotropic([1, 0, 0], 0.001, 0.5)]
        )
        out = densify_and_prune(gmap, self.stats_for([1e-3, 1e-3]), config)
        assert out is gmap
        assert len(out) <= config.max_gaussians


class TestWindowAndAnchors:
    """Test cases for keyframe windows and re-anchoring."""

    def test_window_recent_and_random(self):
        """Test the window holds the recent keyframes plus random older ones."""
        config = OptimizerConfig(window_recent=3, window_random=2)
        window = select_window(list(range(10)), config, np.random.default_rng(0))
        assert {7, 8, 9} <= set(window)
        assert len(window) == 5
        assert window == sorted(window)

    def test_short_history(self):
        """Test a short history is used whole."""
        config = OptimizerConfig(window_recent=8)
        assert select_window([0, 1, 2], config, np.random.default_rng(0)) == [0, 1, 2]

    def test_reanchor_keeps_camera_frame_coordinates(self):
        """Test anchored Gaussians follow their keyframe's pose update."""
        gmap = GaussianMap.from_primitives(
            [GaussianPrimitive.isotropic([0, 0, 2.0], 0.1, 0.5), GaussianPrimitive.isotropic([1, 0, 2.0], 0.1, 0.5)],
            anchors=[0, 1],
        )
        old = {0: RigidPose.identity(), 1: RigidPose.identity()}
        new_pose = RigidPose.look_at([0.5, -1.0, 0.0], [0.0, 0.0, 2.0])
        moved = reanchor(gmap, old, {0: new_pose, 1: RigidPose.identity()})
        assert moved == 1
        mean = gmap.means[0].detach().numpy()
        np.testing.assert_allclose(new_pose.apply(mean), [0.0, 0.0, 2.0], atol=1e-12)
        np.testing.assert_allclose(gmap.means[1].detach().numpy(), [1.0, 0.0, 2.0])


class TestMapOptimizer:
    """Test cases for the Adam mapping loop."""

    def test_empty_keyframes_is_a_no_op(self):
        """Test optimizing against no keyframes."""
        gmap = GaussianMap.from_primitives([GaussianPrimitive.isotropic([0, 0, 0], 0.1, 0.5)])
        out, history = optimize_map(gmap, {})
        assert out is gmap
        assert history == []

    def test_ground_truth_is_a_fixed_point(self):
        """Test the true map stays put when the regularizers are off."""
        prims, keyframes = small_scene()
        config = OptimizerConfig(use_distortion=False, use_normal_consistency=False, densify=False, lambda_dssim=0.0)
        gmap = GaussianMap.from_primitives(prims)
        start = gmap.means.detach().clone()
        out, history = optimize_map(gmap, keyframes, config, iterations=6)
        assert len(history) == 6
        assert max(h.color for h in history) < 1e-9
        assert torch.allclose(out.means, start, atol=1e-9)

    @pytest.mark.slow
    def test_loss_decreases(self):
        """Test the photometric loss drops from a perturbed start."""
        prims, keyframes = small_scene()
        config = OptimizerConfig(densify=False, lr_color=0.02)
        gmap = GaussianMap.from_primitives(prims)
        with torch.no_grad():
            gmap.colors.fill_(0.5)
        _, history = optimize_map(gmap, keyframes, config, iterations=60, extent=1.0)
        curve = loss_curve(history)
        assert np.mean(curve["color"][-5:]) < np.mean(curve["color"][:5])

    @pytest.mark.slow
    def test_windowed_loss_never_increases(self):
        """Test the mean total loss over each window of iterations keeps falling on fixed data."""
        prims, keyframes = small_scene()
        config = OptimizerConfig(densify=False, lr_color=0.02)
        gmap = GaussianMap.from_primitives(prims)
        with torch.no_grad():
            gmap.colors.fill_(0.5)
        optimizer = MapOptimizer(gmap, config)
        history = optimizer.optimize(keyframes, iterations=150, window=[0, 1, 2])
        w = config.history_window
        assert len(history) == 3 * w
        means = [trailing_mean(history[: k * w], w) for k in range(1, 4)]
        assert means[1] <= means[0]
        assert means[2] <= means[1]
        assert not optimizer.loss_rising()

    def test_rising_loss_is_detected(self):
        """Test a later window averaging above the earlier one is flagged."""
        optimizer = MapOptimizer(config=OptimizerConfig(history_window=2))
        flat = lambda t: LossBreakdown(color=t, distortion=0.0, normal=0.0, total=t)  # noqa: E731
        optimizer.history = [flat(0.4), flat(0.2), flat(0.3)]
        assert not optimizer.loss_rising()
        optimizer.history.append(flat(0.5))
        assert optimizer.loss_rising()
        assert trailing_mean(optimizer.history, 2) == pytest.approx(0.4)
        assert trailing_mean([], 2) == 0.0

    def test_nan_loss_raises_divergence(self):
        """Test a non-finite loss stops the loop."""
        prims, keyframes = small_scene()
        gmap = GaussianMap.from_primitives(prims)
        with torch.no_grad():
            gmap.colors[0, 0] = float("nan")
        optimizer = MapOptimizer(gmap, OptimizerConfig())
        with pytest.raises(DivergenceError) as excinfo:
            optimizer.step(keyframes[0])
        assert excinfo.value.error_class == "divergence"

    def test_keyframe_without_image(self):
        """Test a keyframe without an image cannot be optimized against."""
        prims, keyframes = small_scene()
        optimizer = MapOptimizer(GaussianMap.from_primitives(prims))
        bare = Keyframe(id=9, pose=keyframes[0].pose, camera=keyframes[0].camera)
        with pytest.raises(ValueError):
            optimizer.step(bare)

    def test_add_gaussians_respects_cap(self):
        """Test seeding stops at the cap and records anchors."""
        optimizer = MapOptimizer(config=OptimizerConfig(max_gaussians=3))
        prims = [GaussianPrimitive.isotropic([i, 0, 0], 0.1, 0.5) for i in range(5)]
        optimizer.add_gaussians(prims, anchor=2)
        assert len(optimizer.gmap) == 3
        assert optimizer.gmap.anchors.tolist() == [2, 2, 2]
