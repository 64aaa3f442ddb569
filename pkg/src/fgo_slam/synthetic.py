"""Deterministic synthetic scenes for tests and desk-scale experiments."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Literal

import numpy as np
import torch
from loguru import logger

from fgo_slam.geometry import Array, GaussianPrimitive, PinholeCamera, RigidPose, matrix_to_quat, so3_exp
from fgo_slam.renderer import render

TrajectoryShape = Literal["orbit", "line", "square-loop"]
SHAPES = ("orbit", "line", "square-loop")

ORBIT_RADIUS = 2.5
ORBIT_HEIGHT = 0.8
ORBIT_SWEEP_DEG = 120.0
PLANE_HEIGHT = 0.9
SQUARE_SIDE = 1.2
FRAME_RATE = 30.0


@dataclass
class SyntheticScene:
    gaussians: List[GaussianPrimitive]
    poses: List[RigidPose]
    camera: PinholeCamera
    images: List[Array]
    depths: List[Array]
    landmarks: Array  # (L, 3)
    extent: float
    shape: str
    timestamps: Array = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return len(self.poses)


def _orbit_gaussians(rng: np.random.Generator, n: int) -> List[GaussianPrimitive]:
    out = []
    for _ in range(n):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        mean = direction * 0.6 * rng.uniform() ** (1.0 / 3.0)
        q = rng.normal(size=4)
        out.append(
            GaussianPrimitive(
                mean,
                q / np.linalg.norm(q),
                rng.uniform(0.06, 0.16, size=3),
                float(rng.uniform(0.6, 0.95)),
                rng.uniform(0.1, 0.9, size=3),
            )
        )
    return out


def _plane_gaussians(rng: np.random.Generator, n: int, half_x: float, half_y: float) -> List[GaussianPrimitive]:
    """Flat Gaussians lying on the ground plane ``z = 0``."""
    out = []
    for _ in range(n):
        mean = np.array([rng.uniform(-half_x, half_x), rng.uniform(-half_y, half_y), 0.0])
        yaw = rng.uniform(-np.pi, np.pi)
        q = matrix_to_quat(so3_exp([0.0, 0.0, yaw]))
        scale = np.array([rng.uniform(0.08, 0.2), rng.uniform(0.08, 0.2), 0.01])
        out.append(GaussianPrimitive(mean, q, scale, float(rng.uniform(0.7, 0.95)), rng.uniform(0.1, 0.9, size=3)))
    return out


def _orbit_poses(n_frames: int) -> List[RigidPose]:
    sweep = np.radians(ORBIT_SWEEP_DEG)
    poses = []
    for i in range(n_frames):
        theta = sweep * i / max(n_frames - 1, 1)
        eye = np.array([ORBIT_RADIUS * np.cos(theta), ORBIT_RADIUS * np.sin(theta), ORBIT_HEIGHT])
        poses.append(RigidPose.look_at(eye, np.zeros(3)))
    return poses


def _down_pose(x: float, y: float) -> RigidPose:
    eye = np.array([x, y, PLANE_HEIGHT])
    return RigidPose.look_at(eye, np.array([x, y, 0.0]), up=(0.0, 1.0, 0.0))


def _line_poses(n_frames: int) -> List[RigidPose]:
    xs = np.linspace(-1.0, 1.0, n_frames)
    return [_down_pose(float(x), 0.0) for x in xs]


def _square_position(t: float) -> Array:
    """Point on the square perimeter at fraction ``t`` (``t = 0`` and ``t = 1`` coincide)."""
    h = SQUARE_SIDE / 2.0
    corners = np.array([[-h, -h], [h, -h], [h, h], [-h, h], [-h, -h]])
    s = (4.0 * t) % 4.0
    leg = min(int(s), 3)
    f = s - leg
    return corners[leg] + f * (corners[leg + 1] - corners[leg])


def _square_poses(n_frames: int) -> List[RigidPose]:
    poses = []
    for i in range(n_frames):
        x, y = _square_position(i / max(n_frames - 1, 1))
        poses.append(_down_pose(float(x), float(y)))
    return poses


def _sample_landmarks(rng: np.random.Generator, gaussians: List[GaussianPrimitive], n: int) -> Array:
    """Points on the Gaussians' 1-sigma ellipsoids (flat Gaussians give points on the plane)."""
    idx = rng.integers(0, len(gaussians), size=n)
    u = rng.normal(size=(n, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    out = np.empty((n, 3))
    for k, (i, d) in enumerate(zip(idx, u)):
        g = gaussians[i]
        out[k] = g.mean + g.rotation_matrix() @ (g.scale * d)
    return out


def scene_extent(gaussians: List[GaussianPrimitive]) -> float:
    """Diagonal of the axis-aligned box around all 1-sigma boxes."""
    corners = np.concatenate([g.box_corners(1.0) for g in gaussians])
    return float(np.linalg.norm(corners.max(axis=0) - corners.min(axis=0)))


def generate_synthetic_scene(
    seed: int,
    n_gaussians: int = 20,
    n_frames: int = 24,
    shape: TrajectoryShape = "orbit",
    width: int = 64,
    height: int = 64,
    n_landmarks: int = 400,
    fov_deg: float = 60.0,
) -> SyntheticScene:
    """Random Gaussians, a camera trajectory and the ground-truth renders."""
    if n_gaussians < 1:
        raise ValueError("a synthetic scene needs at least one Gaussian")
    if n_frames < 2:
        raise ValueError("a synthetic scene needs at least two frames")
    if shape not in SHAPES:
        raise ValueError(f"unknown trajectory shape {shape!r}, expected one of {SHAPES}")

    rng = np.random.default_rng(seed)
    if shape == "orbit":
        gaussians = _orbit_gaussians(rng, n_gaussians)
        poses = _orbit_poses(n_frames)
    elif shape == "line":
        gaussians = _plane_gaussians(rng, n_gaussians, 1.6, 0.7)
        poses = _line_poses(n_frames)
    else:
        half = SQUARE_SIDE / 2.0 + 0.6
        gaussians = _plane_gaussians(rng, n_gaussians, half, half)
        poses = _square_poses(n_frames)
    landmarks = _sample_landmarks(rng, gaussians, n_landmarks)

    camera = PinholeCamera.from_fov(width, height, fov_deg)
    images, depths = [], []
    with torch.no_grad():
        for pose in poses:
            frame = render(camera, pose, gaussians).to_numpy()
            images.append(np.clip(frame["color"], 0.0, 1.0))
            depths.append(frame["depth"])
    extent = scene_extent(gaussians)
    logger.info(
        f"Generated synthetic {shape} scene: {n_gaussians} Gaussians, {n_frames} frames, "
        f"{n_landmarks} landmarks, extent {extent:.3f} m"
    )
    return SyntheticScene(
        gaussians, poses, camera, images, depths, landmarks, extent, shape,
        np.arange(n_frames, dtype=np.float64) / FRAME_RATE,
    )
