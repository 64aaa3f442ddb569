"""Color, depth-distortion and depth-normal consistency losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from fgo_slam.errors import ShapeMismatchError
from fgo_slam.models import OptimizerConfig
from fgo_slam.opacity_field import SortedContributions
from fgo_slam.renderer import RenderedFrame, depth_to_normal

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class LossBreakdown:
    """Loss terms of one step. ``value`` is the differentiable total."""

    color: float
    distortion: float
    normal: float
    total: float
    depth: float = 0.0
    value: Optional[torch.Tensor] = None

    @classmethod
    def assemble(
        cls,
        color: float,
        distortion: float,
        normal: float,
        alpha: float,
        beta: float,
        depth: float = 0.0,
        depth_weight: float = 0.0,
        value: Optional[torch.Tensor] = None,
    ) -> LossBreakdown:
        total = color + alpha * distortion + beta * normal + depth_weight * depth
        return cls(color, distortion, normal, total, depth, value)

    def as_dict(self) -> dict[str, float]:
        return {
            "color": self.color,
            "distortion": self.distortion,
            "normal": self.normal,
            "depth": self.depth,
            "total": self.total,
        }


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - size // 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(rendered: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean SSIM of two (H, W, C) images in [0, 1], averaged over channels."""
    if rendered.shape != target.shape:
        raise ShapeMismatchError(f"{tuple(rendered.shape)} vs {tuple(target.shape)}")
    x = rendered.permute(2, 0, 1)[None].to(torch.float64)
    y = target.permute(2, 0, 1)[None].to(torch.float64)
    channels = x.shape[1]
    window = _gaussian_window().expand(channels, 1, SSIM_WINDOW, SSIM_WINDOW).contiguous()
    pad = SSIM_WINDOW // 2

    def filt(img: torch.Tensor) -> torch.Tensor:
        return F.conv2d(img, window, padding=pad, groups=channels)

    mu_x, mu_y = filt(x), filt(y)
    sigma_x = filt(x * x) - mu_x**2
    sigma_y = filt(y * y) - mu_y**2
    sigma_xy = filt(x * y) - mu_x * mu_y
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * sigma_xy + c2)) / (
        (mu_x**2 + mu_y**2 + c1) * (sigma_x + sigma_y + c2)
    )
    return ssim_map.mean()


def color_loss(rendered: torch.Tensor, target: torch.Tensor, lambda_dssim: float) -> torch.Tensor:
    """``(1 - lambda) * L1 + lambda * (1 - SSIM) / 2``."""
    target = torch.as_tensor(target, dtype=torch.float64)
    if rendered.shape != target.shape:
        raise ShapeMismatchError(f"{tuple(rendered.shape)} vs {tuple(target.shape)}")
    l1 = (rendered - target).abs().mean()
    if lambda_dssim == 0.0:
        return l1
    return (1.0 - lambda_dssim) * l1 + lambda_dssim * (1.0 - ssim(rendered, target)) / 2.0


def depth_distortion_loss(samples: SortedContributions) -> torch.Tensor:
    """Mean over rays of ``sum_ij w_i w_j |d_i - d_j|`` with the weights held constant.

    Uses the sorted-order identity ``sum_ij w_i w_j |d_i - d_j| =
    2 sum_i w_i (d_i W_<i - D_<i)``; inactive entries carry zero weight.
    """
    if samples.weight.numel() == 0:
        return torch.zeros((), dtype=torch.float64)
    w = samples.weight.detach()
    d = samples.d_star
    w_before = torch.cumsum(w, dim=-1) - w
    wd = w * d
    wd_before = torch.cumsum(wd, dim=-1) - wd
    per_ray = 2.0 * (w * (d * w_before - wd_before)).sum(-1)
    return per_ray.mean()


def normal_consistency_loss(
    samples: SortedContributions, normals: torch.Tensor, pixel_normals: torch.Tensor
) -> torch.Tensor:
    """Mean over pixels with a valid depth normal of ``sum_i w_i (1 - n_i . N)``.

    ``normals`` is (R, K, 3) in the same order as ``samples``; ``pixel_normals``
    is (R, 3) in the same frame, zero rows are skipped.
    """
    valid = pixel_normals.norm(dim=-1) > 0.5
    if not bool(valid.any()):
        return torch.zeros((), dtype=torch.float64)
    cos = (normals * pixel_normals[:, None, :]).sum(-1)
    per_ray = (samples.weight * (1.0 - cos)).sum(-1)
    return per_ray[valid].mean()


def depth_supervision_loss(depth: torch.Tensor, target_depth: torch.Tensor) -> torch.Tensor:
    """L1 between rendered and sensor depth over pixels valid in both."""
    target_depth = torch.as_tensor(target_depth, dtype=torch.float64)
    if depth.shape != target_depth.shape:
        raise ShapeMismatchError(f"{tuple(depth.shape)} vs {tuple(target_depth.shape)}")
    valid = (target_depth > 0) & (depth > 0)
    if not bool(valid.any()):
        return torch.zeros((), dtype=torch.float64)
    return (depth - target_depth).abs()[valid].mean()


def total_loss(
    frame: RenderedFrame,
    target: torch.Tensor | np.ndarray,
    config: OptimizerConfig,
    target_depth: Optional[torch.Tensor | np.ndarray] = None,
    depth_weight: float = 0.0,
) -> LossBreakdown:
    """Assemble ``L_c + alpha L_d + beta L_n`` (plus optional depth supervision)."""
    target_t = torch.as_tensor(np.asarray(target), dtype=torch.float64)
    l_c = color_loss(frame.color, target_t, config.lambda_dssim)
    zero = torch.zeros((), dtype=torch.float64)

    l_d = zero
    l_n = zero
    samples = frame.contributions
    if samples is not None and config.use_distortion:
        l_d = depth_distortion_loss(samples)
    if samples is not None and config.use_normal_consistency and frame.camera is not None:
        n_cam = depth_to_normal(frame.depth, frame.camera).reshape(-1, 3)
        rotation = torch.as_tensor(frame.pose.rotation, dtype=torch.float64)
        n_world = n_cam @ rotation
        l_n = normal_consistency_loss(samples, frame.gaussian_normals, n_world)

    l_depth = zero
    if target_depth is not None and depth_weight > 0.0:
        l_depth = depth_supervision_loss(frame.depth, torch.as_tensor(np.asarray(target_depth)))

    value = l_c + config.alpha * l_d + config.beta * l_n + depth_weight * l_depth
    return LossBreakdown.assemble(
        float(l_c), float(l_d), float(l_n), config.alpha, config.beta,
        depth=float(l_depth), depth_weight=depth_weight, value=value,
    )
