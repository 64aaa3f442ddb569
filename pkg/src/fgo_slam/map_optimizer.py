"""Gaussian map optimization: seeding, the Adam loop over keyframe windows, densify and prune."""

from __future__ import annotations

from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
from loguru import logger
from scipy.spatial import cKDTree

from fgo_slam.errors import DivergenceError
from fgo_slam.geometry import GaussianPrimitive, RigidPose
from fgo_slam.losses import LossBreakdown, total_loss
from fgo_slam.models import OptimizerConfig
from fgo_slam.renderer import GaussianMap, render
from fgo_slam.tracking import Keyframe, MapPoint

SPLIT_CHILDREN = 2
SPLIT_SHRINK = SPLIT_CHILDREN ** (1.0 / 3.0)
NEIGHBOURS = 3


def points_extent(positions: np.ndarray) -> float:
    """Diagonal of the axis-aligned bounding box of a point set."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if len(positions) == 0:
        return 0.0
    return float(np.linalg.norm(np.ptp(positions, axis=0)))


def _sample_color(keyframe: Optional[Keyframe], pixel: np.ndarray) -> np.ndarray:
    if keyframe is None or keyframe.image is None:
        return np.full(3, 0.5)
    image = np.asarray(keyframe.image, dtype=np.float64)
    h, w = image.shape[:2]
    u = int(np.clip(np.floor(pixel[0]), 0, w - 1))
    v = int(np.clip(np.floor(pixel[1]), 0, h - 1))
    return np.clip(image[v, u, :3], 0.0, 1.0)


def seed_gaussians(
    points: Sequence[MapPoint],
    keyframes: Mapping[int, Keyframe],
    config: Optional[OptimizerConfig] = None,
    extent: Optional[float] = None,
) -> List[GaussianPrimitive]:
    """One isotropic Gaussian per map point.

    The scale is the mean distance to the three nearest other points, clamped
    to ``[seed_min_scale, extent / 10]``; the color is read from the first
    observing keyframe at the observed pixel.
    """
    config = config or OptimizerConfig()
    if not points:
        return []
    positions = np.stack([p.position for p in points])
    extent = points_extent(positions) if extent is None else extent
    upper = max(extent / 10.0, config.seed_min_scale)

    k = min(NEIGHBOURS, len(points) - 1)
    if k > 0:
        dist, _ = cKDTree(positions).query(positions, k=k + 1)
        scales = np.asarray(dist).reshape(len(points), k + 1)[:, 1:].mean(axis=1)
    else:
        scales = np.zeros(len(points))
    scales = np.clip(scales, config.seed_min_scale, upper)

    out = []
    for point, scale in zip(points, scales):
        color = np.full(3, 0.5)
        if point.observations:
            first = min(point.observations, key=lambda o: o.keyframe_id)
            color = _sample_color(keyframes.get(first.keyframe_id), first.pixel)
        out.append(GaussianPrimitive.isotropic(point.position, float(scale), config.seed_opacity, color))
    logger.debug(f"Seeded {len(out)} Gaussians (scale range {scales.min():.3g}-{scales.max():.3g})")
    return out


class GradientStats:
    """Accumulated positional-gradient norms per Gaussian since the last densify call."""

    def __init__(self, n: int) -> None:
        self.total = np.zeros(n)
        self.count = np.zeros(n, dtype=np.int64)

    def accumulate(self, means_grad: Optional[torch.Tensor]) -> None:
        if means_grad is None:
            return
        norms = means_grad.detach().norm(dim=-1).numpy()
        seen = norms > 0
        self.total[seen] += norms[seen]
        self.count[seen] += 1

    def mean(self) -> np.ndarray:
        return np.where(self.count > 0, self.total / np.maximum(self.count, 1), 0.0)

    def __len__(self) -> int:
        return len(self.total)


def densify_and_prune(
    gmap: GaussianMap,
    stats: GradientStats,
    config: Optional[OptimizerConfig] = None,
    extent: float = 1.0,
    seed: int = 0,
) -> GaussianMap:
    """Clone small and split large high-gradient Gaussians, drop nearly transparent ones.

    Split children keep the parent's orientation with scales divided by
    ``2^(1/3)``, so their summed ellipsoid volume equals the parent's. The
    result never exceeds ``max_gaussians``. Returns ``gmap`` itself when
    nothing changes.
    """
    config = config or OptimizerConfig()
    n = len(gmap)
    if n == 0:
        return gmap
    with torch.no_grad():
        opacity = torch.sigmoid(gmap.opacity_logits).numpy()
        scales = torch.exp(gmap.log_scales).numpy()
    keep = opacity >= config.prune_opacity
    grad = stats.mean() if len(stats) == n else np.zeros(n)
    candidates = np.nonzero(keep & (grad > config.densify_grad_threshold))[0]

    budget = config.max_gaussians - int(keep.sum())
    # stable order: strongest gradients first, ties by index
    candidates = candidates[np.argsort(-grad[candidates], kind="stable")]
    large = scales.max(axis=1) > config.split_scale_fraction * extent
    chosen: List[int] = []
    for i in candidates:
        cost = SPLIT_CHILDREN - 1 if large[i] else 1
        if budget - cost < 0:
            break
        budget -= cost
        chosen.append(int(i))
    chosen.sort()

    if keep.all() and not chosen:
        return gmap

    to_split = [i for i in chosen if large[i]]
    to_clone = [i for i in chosen if not large[i]]
    survivors = keep.copy()
    survivors[to_split] = False

    pieces = [gmap.select(survivors)]
    if to_clone:
        mask = np.zeros(n, dtype=bool)
        mask[to_clone] = True
        pieces.append(gmap.select(mask))
    if to_split:
        mask = np.zeros(n, dtype=bool)
        mask[to_split] = True
        parents = gmap.select(mask)
        rng = np.random.default_rng(seed)
        with torch.no_grad():
            rotations = parents.tensors().rotations.numpy()
            parent_scales = torch.exp(parents.log_scales).numpy()
        for _ in range(SPLIT_CHILDREN):
            child = parents.clone()
            offsets = rng.normal(size=(len(parents), 3)) * parent_scales
            shift = np.einsum("nij,nj->ni", rotations, offsets)
            with torch.no_grad():
                child.means += torch.as_tensor(shift)
                child.log_scales -= float(np.log(SPLIT_SHRINK))
            pieces.append(child)

    out = pieces[0]
    for piece in pieces[1:]:
        out = out.concat(piece)
    logger.info(
        f"Densify/prune: {n} -> {len(out)} Gaussians "
        f"({int((~keep).sum())} pruned, {len(to_clone)} cloned, {len(to_split)} split)"
    )
    return out


def select_window(keyframe_ids: Sequence[int], config: OptimizerConfig, rng: np.random.Generator) -> List[int]:
    """Most recent keyframes plus a few random older ones."""
    ids = sorted(keyframe_ids)
    recent = ids[-config.window_recent :]
    older = ids[: -config.window_recent] if len(ids) > config.window_recent else []
    if older and config.window_random > 0:
        picks = rng.choice(len(older), size=min(config.window_random, len(older)), replace=False)
        recent = sorted(set(recent) | {older[i] for i in picks})
    return recent


def reanchor(gmap: GaussianMap, old_poses: Mapping[int, RigidPose], new_poses: Mapping[int, RigidPose]) -> int:
    """Carry Gaussians rigidly with the pose change of the keyframe they were seeded from.

    Returns the number of Gaussians moved.
    """
    moved = 0
    for kf_id, old in old_poses.items():
        new = new_poses.get(kf_id)
        if new is None:
            continue
        mask = gmap.anchors == kf_id
        if not mask.any():
            continue
        motion = new.inverse() @ old
        if np.array_equal(motion.rotation, np.eye(3)) and not np.any(motion.translation):
            continue
        gmap.transform_(motion.rotation, motion.translation, mask)
        moved += int(mask.sum())
    if moved:
        logger.info(f"Re-anchored {moved} Gaussians after keyframe pose updates")
    return moved


class MapOptimizer:
    """Stateful mapping backend: owns the Gaussian map and its Adam state."""

    def __init__(
        self,
        gmap: Optional[GaussianMap] = None,
        config: Optional[OptimizerConfig] = None,
        extent: float = 1.0,
        seed: int = 0,
        use_depth: bool = False,
    ) -> None:
        self.config = config or OptimizerConfig()
        self.gmap = gmap if gmap is not None else GaussianMap.empty()
        self.extent = max(float(extent), 1e-6)
        self.seed = seed
        self.use_depth = use_depth
        self.iteration = 0
        self.history: List[LossBreakdown] = []
        self._since_densify = 0
        self._rebuild()

    def _rebuild(self) -> None:
        cfg = self.config
        self.stats = GradientStats(len(self.gmap))
        if len(self.gmap) == 0:
            self.optimizer: Optional[torch.optim.Optimizer] = None
            return
        self.optimizer = torch.optim.Adam(
            [
                {"params": [self.gmap.means], "lr": cfg.lr_mean * self.extent, "name": "means"},
                {"params": [self.gmap.quats], "lr": cfg.lr_rotation, "name": "quats"},
                {"params": [self.gmap.log_scales], "lr": cfg.lr_scale, "name": "log_scales"},
                {"params": [self.gmap.opacity_logits], "lr": cfg.lr_opacity, "name": "opacity_logits"},
                {"params": [self.gmap.colors], "lr": cfg.lr_color, "name": "colors"},
            ]
        )

    def replace_map(self, gmap: GaussianMap) -> None:
        self.gmap = gmap
        self._rebuild()

    def add_gaussians(self, gaussians: Sequence[GaussianPrimitive], anchor: int) -> None:
        if not gaussians:
            return
        room = self.config.max_gaussians - len(self.gmap)
        if room <= 0:
            logger.warning(f"Map is at its cap of {self.config.max_gaussians} Gaussians, seeding skipped")
            return
        gaussians = list(gaussians)[:room]
        fresh = GaussianMap.from_primitives(gaussians, np.full(len(gaussians), anchor))
        self.replace_map(self.gmap.concat(fresh))

    def step(self, keyframe: Keyframe) -> LossBreakdown:
        """One Adam step on one keyframe."""
        if self.optimizer is None:
            raise ValueError("cannot optimize an empty map")
        if keyframe.image is None:
            raise ValueError(f"keyframe {keyframe.id} has no image")
        self.optimizer.zero_grad(set_to_none=True)
        frame = render(keyframe.camera, keyframe.pose, self.gmap)
        target_depth = keyframe.depth if self.use_depth else None
        weight = self.config.depth_weight if self.use_depth and target_depth is not None else 0.0
        loss = total_loss(frame, keyframe.image, self.config, target_depth, weight)
        if not np.isfinite(loss.total):
            raise DivergenceError(
                f"loss became {loss.total} on keyframe {keyframe.id}",
                self.iteration,
                {"loss": loss.as_dict(), "n_gaussians": len(self.gmap), "keyframe": keyframe.id},
            )
        assert loss.value is not None
        loss.value.backward()
        self.stats.accumulate(self.gmap.means.grad)
        self.optimizer.step()
        self.gmap.normalize_()
        loss.value = None
        self.iteration += 1
        self._since_densify += 1
        self.history.append(loss)
        logger.debug(f"Map iteration {self.iteration}: {loss.as_dict()}")
        return loss

    def maybe_densify(self) -> None:
        if not self.config.densify or self._since_densify < self.config.densify_interval:
            return
        self._since_densify = 0
        updated = densify_and_prune(self.gmap, self.stats, self.config, self.extent, seed=self.seed + self.iteration)
        if updated is not self.gmap:
            self.replace_map(updated)
        else:
            self.stats = GradientStats(len(self.gmap))

    def optimize(
        self,
        keyframes: Mapping[int, Keyframe],
        iterations: Optional[int] = None,
        window: Optional[Sequence[int]] = None,
    ) -> List[LossBreakdown]:
        """Run ``iterations`` steps cycling over a keyframe window."""
        iterations = self.config.iterations_per_keyframe if iterations is None else iterations
        if not keyframes or len(self.gmap) == 0 or iterations == 0:
            return []
        if window is None:
            rng = np.random.default_rng([self.seed, self.iteration])
            window = select_window(list(keyframes), self.config, rng)
        start = len(self.history)
        for i in range(iterations):
            self.step(keyframes[window[i % len(window)]])
            self.maybe_densify()
        if self.loss_rising():
            w = self.config.history_window
            logger.warning(
                f"Mean map loss rose over the last {w} iterations: "
                f"{trailing_mean(self.history[:-w], w):.6g} -> {trailing_mean(self.history, w):.6g}"
            )
        return self.history[start:]

    def loss_rising(self) -> bool:
        """Whether the last ``history_window`` iterations average above the window before them."""
        w = self.config.history_window
        if len(self.history) < 2 * w:
            return False
        return trailing_mean(self.history, w) > trailing_mean(self.history[:-w], w)

    def sync(self, keyframes: Mapping[int, Keyframe], previous: Mapping[int, RigidPose]) -> None:
        """Follow keyframe pose corrections published by tracking."""
        reanchor(self.gmap, previous, {k: kf.pose for k, kf in keyframes.items()})


def optimize_map(
    gmap: GaussianMap,
    keyframes: Mapping[int, Keyframe],
    config: Optional[OptimizerConfig] = None,
    iterations: Optional[int] = None,
    extent: float = 1.0,
    seed: int = 0,
    use_depth: bool = False,
    window: Optional[Sequence[int]] = None,
) -> Tuple[GaussianMap, List[LossBreakdown]]:
    """Optimize a map against keyframes; returns the (possibly densified) map and the loss history."""
    if not keyframes:
        return gmap, []
    optimizer = MapOptimizer(gmap, config, extent, seed, use_depth)
    history = optimizer.optimize(keyframes, iterations, window)
    return optimizer.gmap, history


def trailing_mean(history: Sequence[LossBreakdown], window: int) -> float:
    values = [h.total for h in history[-window:]]
    return float(np.mean(values)) if values else 0.0


def loss_curve(history: Sequence[LossBreakdown]) -> Dict[str, List[float]]:
    keys = ("color", "distortion", "normal", "depth", "total")
    return {k: [getattr(h, k) for h in history] for k in keys}
