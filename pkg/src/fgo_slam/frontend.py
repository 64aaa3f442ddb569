"""Feature front-ends feeding the tracker with per-frame correspondences."""

from __future__ import annotations

from typing import Dict, List, Optional, Protocol, Sequence, runtime_checkable

import numpy as np
from loguru import logger

from fgo_slam.geometry import PinholeCamera, RigidPose, project_points
from fgo_slam.models import FrontendConfig
from fgo_slam.synthetic import SyntheticScene
from fgo_slam.tracking import FeatureObservation

MIN_LANDMARK_DEPTH = 0.05


@runtime_checkable
class TrackingFrontend(Protocol):
    """Anything that turns a frame into feature observations with stable track ids."""

    def observe(
        self, frame_index: int, image: Optional[np.ndarray] = None, depth: Optional[np.ndarray] = None
    ) -> List[FeatureObservation]:
        ...


class SyntheticFrontend:
    """Projects known landmarks through known poses.

    Adds pixel noise and gross outliers, and hands out a fresh track id for a
    landmark that has been out of view for more than ``relabel_gap`` frames,
    so revisits show up as new map points until a loop is detected. Frames
    must be observed in order.
    """

    def __init__(
        self,
        landmarks: np.ndarray,
        poses: Sequence[RigidPose],
        camera: PinholeCamera,
        config: Optional[FrontendConfig] = None,
        seed: int = 0,
        with_depth: bool = True,
    ) -> None:
        self.landmarks = np.asarray(landmarks, dtype=np.float64).reshape(-1, 3)
        self.poses = list(poses)
        self.camera = camera
        self.config = config or FrontendConfig()
        self.seed = seed
        self.with_depth = with_depth
        self._track_of: Dict[int, int] = {}
        self._last_seen: Dict[int, int] = {}
        self._next_track = 0
        self._last_frame = -1

    @classmethod
    def from_scene(
        cls, scene: SyntheticScene, config: Optional[FrontendConfig] = None, seed: int = 0, with_depth: bool = True
    ) -> SyntheticFrontend:
        return cls(scene.landmarks, scene.poses, scene.camera, config, seed, with_depth)

    def _track_id(self, landmark: int, frame_index: int) -> int:
        last = self._last_seen.get(landmark)
        if last is None or frame_index - last > self.config.relabel_gap:
            if last is not None:
                logger.debug(f"Landmark {landmark} re-labelled after {frame_index - last} frames")
            self._track_of[landmark] = self._next_track
            self._next_track += 1
        self._last_seen[landmark] = frame_index
        return self._track_of[landmark]

    def observe(
        self, frame_index: int, image: Optional[np.ndarray] = None, depth: Optional[np.ndarray] = None
    ) -> List[FeatureObservation]:
        if frame_index <= self._last_frame:
            raise ValueError(f"frames must be observed in order ({frame_index} after {self._last_frame})")
        self._last_frame = frame_index
        pose = self.poses[frame_index]
        camera = self.camera
        rng = np.random.default_rng([self.seed, frame_index])

        pixels, in_front = project_points(camera, pose, self.landmarks)
        z = pose.apply(self.landmarks)[:, 2]
        visible = in_front & (z > MIN_LANDMARK_DEPTH) & camera.in_image(pixels)
        idx = np.nonzero(visible)[0]

        noise = rng.normal(scale=self.config.pixel_noise, size=(len(idx), 2)) if self.config.pixel_noise > 0 else 0.0
        observed = pixels[idx] + noise
        outliers = rng.random(len(idx)) < self.config.outlier_ratio
        if np.any(outliers):
            angle = rng.uniform(0.0, 2.0 * np.pi, size=int(outliers.sum()))
            observed[outliers] += self.config.outlier_magnitude * np.stack([np.cos(angle), np.sin(angle)], axis=-1)

        out = [
            FeatureObservation(
                track_id=self._track_id(int(lm), frame_index),
                pixel=observed[k],
                sigma2=1.0,
                depth=float(z[lm]) if self.with_depth else None,
                landmark=int(lm),
            )
            for k, lm in enumerate(idx)
        ]
        logger.debug(f"Frame {frame_index}: {len(out)} landmarks visible ({int(outliers.sum())} outliers)")
        return out


def landmarks_from_depth(
    depths: Sequence[np.ndarray],
    poses: Sequence[RigidPose],
    camera: PinholeCamera,
    n_landmarks: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """World points back-projected from random valid depth pixels, spread evenly over the frames."""
    if len(depths) != len(poses):
        raise ValueError(f"{len(depths)} depth maps for {len(poses)} poses")
    per_frame = int(np.ceil(n_landmarks / max(len(depths), 1)))
    out = []
    for depth, pose in zip(depths, poses):
        v, u = np.nonzero(np.asarray(depth) > MIN_LANDMARK_DEPTH)
        if len(u) == 0:
            continue
        pick = rng.choice(len(u), size=min(per_frame, len(u)), replace=False)
        pixels = np.stack([u[pick] + 0.5, v[pick] + 0.5], axis=-1)
        points_c = camera.back_project(pixels, depth[v[pick], u[pick]])
        out.append(pose.inverse().apply(points_c))
    if not out:
        return np.zeros((0, 3))
    return np.concatenate(out)[:n_landmarks]


def landmarks_in_frustum(
    poses: Sequence[RigidPose],
    camera: PinholeCamera,
    n_landmarks: int,
    rng: np.random.Generator,
    near: float = 0.5,
    far: float = 3.0,
) -> np.ndarray:
    """Random world points inside the viewing frusta, for runs without depth."""
    per_frame = int(np.ceil(n_landmarks / max(len(poses), 1)))
    out = []
    for pose in poses:
        pixels = rng.uniform([0.0, 0.0], [camera.width, camera.height], size=(per_frame, 2))
        z = rng.uniform(near, far, size=per_frame)
        out.append(pose.inverse().apply(camera.back_project(pixels, z)))
    if not out:
        return np.zeros((0, 3))
    return np.concatenate(out)[:n_landmarks]
