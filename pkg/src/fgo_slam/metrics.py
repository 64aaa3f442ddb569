"""Trajectory and image quality metrics."""

from __future__ import annotations

from typing import Literal, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from loguru import logger
from scipy.spatial.transform import Rotation

from fgo_slam.errors import (
    AllInvalidDepthError,
    DegenerateConfigurationError,
    LengthMismatchError,
    NoAssociationsError,
    ShapeMismatchError,
)
from fgo_slam.formats import Trajectory
from fgo_slam.geometry import Array, RigidPose, SimilarityTransform, umeyama_align
from fgo_slam.losses import ssim as _ssim_tensor

PSNR_CAP_DB = 99.0

Alignment = Literal["rigid", "similarity"]
PoseSequence = Union[Sequence[RigidPose], Array]


def _positions(trajectory: PoseSequence) -> Array:
    if isinstance(trajectory, np.ndarray):
        return np.asarray(trajectory, dtype=np.float64).reshape(-1, 3)
    return np.array([p.camera_center() for p in trajectory], dtype=np.float64).reshape(-1, 3)


def _collinear_alignment(src: Array, dst: Array, with_scale: bool) -> SimilarityTransform:
    """Centroid, spread and principal-direction alignment for straight-line trajectories."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    spread_s = np.sqrt(np.mean(np.sum(xs**2, axis=1)))
    spread_d = np.sqrt(np.mean(np.sum(xd**2, axis=1)))
    if spread_s < 1e-15 or spread_d < 1e-15:
        return SimilarityTransform(1.0, np.eye(3), mu_d - mu_s)
    dir_s = np.linalg.svd(xs)[2][0]
    dir_d = np.linalg.svd(xd)[2][0]
    if np.sum((xs @ dir_s) * (xd @ dir_d)) < 0:
        dir_d = -dir_d
    rotation = Rotation.align_vectors(dir_d[None], dir_s[None])[0].as_matrix()
    scale = spread_d / spread_s if with_scale else 1.0
    return SimilarityTransform(scale, rotation, mu_d - scale * rotation @ mu_s)


def align_trajectory(
    estimated: PoseSequence, ground_truth: PoseSequence, alignment: Alignment = "rigid"
) -> Tuple[SimilarityTransform, Array]:
    """Transform taking the estimated camera centers onto the ground truth, and the aligned centers."""
    est, gt = _positions(estimated), _positions(ground_truth)
    if len(est) != len(gt):
        raise LengthMismatchError(f"estimated trajectory has {len(est)} poses, ground truth {len(gt)}")
    if len(est) == 0:
        raise LengthMismatchError("trajectories are empty")
    with_scale = alignment == "similarity"
    try:
        transform = umeyama_align(est, gt, with_scale=with_scale)
    except DegenerateConfigurationError as exc:
        logger.warning(f"Trajectory alignment degenerate ({exc}), aligning along the principal direction")
        transform = _collinear_alignment(est, gt, with_scale)
    return transform, transform.apply(est)


def ate_rmse(estimated: PoseSequence, ground_truth: PoseSequence, alignment: Alignment = "rigid") -> float:
    """RMS of translational residuals after rigid or similarity alignment, in meters."""
    _, aligned = align_trajectory(estimated, ground_truth, alignment)
    residuals = aligned - _positions(ground_truth)
    return float(np.sqrt(np.mean(np.sum(residuals**2, axis=1))))


def associate_trajectories(
    estimated: Trajectory, ground_truth: Trajectory, tolerance: float = 0.02
) -> Tuple[Array, Array]:
    """Camera centers of estimate and ground truth paired by nearest timestamp."""
    est = pd.DataFrame({"timestamp": estimated.timestamps, "est_idx": np.arange(len(estimated))})
    gt = pd.DataFrame({"timestamp": ground_truth.timestamps, "gt_idx": np.arange(len(ground_truth))})
    merged = pd.merge_asof(
        est.sort_values("timestamp"), gt.sort_values("timestamp"),
        on="timestamp", direction="nearest", tolerance=tolerance,
    ).dropna()
    if merged.empty:
        raise NoAssociationsError(f"no timestamps within {tolerance} s between the trajectories")
    est_idx = merged["est_idx"].to_numpy(dtype=np.int64)
    gt_idx = merged["gt_idx"].to_numpy(dtype=np.int64)
    logger.debug(f"Associated {len(merged)} of {len(estimated)} estimated poses")
    return estimated.positions[est_idx], ground_truth.positions[gt_idx]


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{a.shape} vs {b.shape}")


def psnr(rendered: np.ndarray, target: np.ndarray) -> float:
    """PSNR in dB for images in [0, 1]; identical images report the 99 dB cap."""
    x = np.asarray(rendered, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    _check_shapes(x, y)
    mse = float(np.mean((x - y) ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return float(min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB))


def ssim(rendered: np.ndarray, target: np.ndarray) -> float:
    x = np.asarray(rendered, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    _check_shapes(x, y)
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    with torch.no_grad():
        return float(_ssim_tensor(torch.from_numpy(x), torch.from_numpy(y)))


def depth_l1(rendered: np.ndarray, target: np.ndarray) -> float:
    """Mean absolute depth difference in meters over pixels valid (> 0) in both maps."""
    x = np.asarray(rendered, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    _check_shapes(x, y)
    valid = (x > 0) & (y > 0) & np.isfinite(x) & np.isfinite(y)
    if not np.any(valid):
        raise AllInvalidDepthError("no pixel has valid depth in both maps")
    return float(np.mean(np.abs(x[valid] - y[valid])))
