"""Per-pixel ray-Gaussian rendering of color, depth and normal maps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from loguru import logger
from numpy.typing import ArrayLike

from fgo_slam.errors import DegenerateRayError
from fgo_slam.geometry import GaussianPrimitive, PinholeCamera, Ray, RigidPose, matrix_to_quat, to_gaussian_local
from fgo_slam.opacity_field import (
    DEGENERATE_RAY,
    GaussianTensors,
    SortedContributions,
    ray_terms,
    sort_contributions,
)

WEIGHT_EPS = 1e-8
MIN_ALPHA_FOR_DEPTH = 1e-4
OPACITY_CLAMP = 1e-6


def quaternion_to_rotation(q: torch.Tensor) -> torch.Tensor:
    """(N, 4) quaternions (w, x, y, z), normalized on the fly, to (N, 3, 3) matrices."""
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    return torch.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w),
            2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w),
            2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y),
        ],
        dim=-1,
    ).reshape(-1, 3, 3)


class GaussianMap:
    """The Gaussian map in its unconstrained parameterization.

    Means and colors are stored directly, rotations as (not necessarily unit)
    quaternions, scales as logs and opacities as logits. ``anchors`` records the
    keyframe each Gaussian was created from.
    """

    PARAM_NAMES = ("means", "quats", "log_scales", "opacity_logits", "colors")

    def __init__(
        self,
        means: torch.Tensor,
        quats: torch.Tensor,
        log_scales: torch.Tensor,
        opacity_logits: torch.Tensor,
        colors: torch.Tensor,
        anchors: Optional[ArrayLike] = None,
    ) -> None:
        def leaf(t: torch.Tensor) -> torch.Tensor:
            return t.detach().to(torch.float64).clone().requires_grad_(True)

        self.means = leaf(means.reshape(-1, 3))
        self.quats = leaf(quats.reshape(-1, 4))
        self.log_scales = leaf(log_scales.reshape(-1, 3))
        self.opacity_logits = leaf(opacity_logits.reshape(-1))
        self.colors = leaf(colors.reshape(-1, 3))
        n = self.means.shape[0]
        self.anchors = (
            np.full(n, -1, dtype=np.int64) if anchors is None else np.asarray(anchors, dtype=np.int64).reshape(n)
        )

    @classmethod
    def empty(cls) -> GaussianMap:
        z = torch.zeros
        return cls(z(0, 3), z(0, 4), z(0, 3), z(0), z(0, 3), np.zeros(0, dtype=np.int64))

    @classmethod
    def from_primitives(
        cls, gaussians: Sequence[GaussianPrimitive], anchors: Optional[ArrayLike] = None
    ) -> GaussianMap:
        if not gaussians:
            return cls.empty()
        as_t = lambda values: torch.as_tensor(np.array(values), dtype=torch.float64)  # noqa: E731
        opacity = np.clip([g.opacity for g in gaussians], OPACITY_CLAMP, 1.0 - OPACITY_CLAMP)
        return cls(
            as_t([g.mean for g in gaussians]),
            as_t([g.rotation for g in gaussians]),
            torch.log(as_t([g.scale for g in gaussians])),
            torch.logit(as_t(opacity)),
            as_t([g.color for g in gaussians]),
            anchors,
        )

    def __len__(self) -> int:
        return int(self.means.shape[0])

    def parameters(self) -> Dict[str, torch.Tensor]:
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    def tensors(self) -> GaussianTensors:
        """Constrained parameters, differentiable w.r.t. the stored ones."""
        return GaussianTensors(
            self.means,
            quaternion_to_rotation(self.quats),
            torch.exp(self.log_scales),
            torch.sigmoid(self.opacity_logits),
            self.colors,
        )

    def to_primitives(self) -> List[GaussianPrimitive]:
        with torch.no_grad():
            quats = self.quats / self.quats.norm(dim=-1, keepdim=True)
            scales = torch.exp(self.log_scales)
            opac = torch.sigmoid(self.opacity_logits)
            colors = self.colors.clamp(0.0, 1.0)
            return [
                GaussianPrimitive(
                    self.means[i].numpy().copy(),
                    quats[i].numpy().copy(),
                    scales[i].numpy().copy(),
                    float(opac[i]),
                    colors[i].numpy().copy(),
                )
                for i in range(len(self))
            ]

    def clone(self) -> GaussianMap:
        return GaussianMap(*(getattr(self, n) for n in self.PARAM_NAMES), anchors=self.anchors.copy())

    def select(self, mask: ArrayLike) -> GaussianMap:
        keep = torch.as_tensor(np.asarray(mask, dtype=bool))
        return GaussianMap(
            *(getattr(self, n)[keep] for n in self.PARAM_NAMES),
            anchors=self.anchors[np.asarray(mask, dtype=bool)],
        )

    def concat(self, other: GaussianMap) -> GaussianMap:
        return GaussianMap(
            *(torch.cat([getattr(self, n), getattr(other, n)]) for n in self.PARAM_NAMES),
            anchors=np.concatenate([self.anchors, other.anchors]),
        )

    def normalize_(self) -> None:
        """Renormalize quaternions and clamp colors after an optimizer step."""
        with torch.no_grad():
            self.quats /= self.quats.norm(dim=-1, keepdim=True)
            self.colors.clamp_(0.0, 1.0)

    def transform_(self, rotation: np.ndarray, translation: np.ndarray, mask: np.ndarray) -> None:
        """Rigidly move the selected Gaussians by ``x -> R x + t``."""
        if not np.any(mask):
            return
        idx = torch.as_tensor(np.nonzero(mask)[0])
        r = torch.as_tensor(rotation, dtype=torch.float64)
        t = torch.as_tensor(translation, dtype=torch.float64)
        q_r = torch.as_tensor(matrix_to_quat(rotation), dtype=torch.float64)
        with torch.no_grad():
            self.means[idx] = self.means[idx] @ r.T + t
            self.quats[idx] = _quat_multiply(q_r.expand(len(idx), 4), self.quats[idx])


def _quat_multiply(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dim=-1,
    )


@dataclass
class RenderedFrame:
    """Rendered maps of one view, plus the per-ray records the losses consume."""

    color: torch.Tensor  # (H, W, 3)
    depth: torch.Tensor  # (H, W), z-depth in meters, 0 where empty
    normal: torch.Tensor  # (H, W, 3) world frame, unit or zero
    alpha: torch.Tensor  # (H, W)
    contributions: Optional[SortedContributions] = None
    gaussian_normals: Optional[torch.Tensor] = None  # (H*W, N, 3) world, sorted order
    pose: Optional[RigidPose] = None
    camera: Optional[PinholeCamera] = None

    def to_numpy(self) -> Dict[str, np.ndarray]:
        return {
            "color": self.color.detach().numpy().copy(),
            "depth": self.depth.detach().numpy().copy(),
            "normal": self.normal.detach().numpy().copy(),
            "alpha": self.alpha.detach().numpy().copy(),
        }


def rays_for_camera(camera: PinholeCamera, pose: RigidPose) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """World-frame ray origins and unit directions through every pixel centre.

    Also returns the z-component of each unit direction in the camera frame,
    which converts distance along the ray into z-depth.
    """
    pix = camera.pixel_centers().reshape(-1, 2)
    d_cam = np.stack(
        [(pix[:, 0] - camera.cx) / camera.fx, (pix[:, 1] - camera.cy) / camera.fy, np.ones(len(pix))],
        axis=-1,
    )
    d_cam /= np.linalg.norm(d_cam, axis=-1, keepdims=True)
    d_world = d_cam @ pose.rotation
    origins = np.broadcast_to(pose.camera_center(), d_world.shape)
    as_t = lambda a: torch.as_tensor(np.ascontiguousarray(a), dtype=torch.float64)  # noqa: E731
    return as_t(origins), as_t(d_world), as_t(d_cam[:, 2])


def contribution_normals(g: GaussianTensors, r_g: torch.Tensor) -> torch.Tensor:
    """Camera-facing normal of each ray-Gaussian intersection plane, (R, N, 3).

    The plane normal is ``Sigma^-1 r = R S^-1 r_g``. Its dot product with the
    ray is ``|r_g|^2 > 0``, so negating it always faces the camera.
    """
    n = torch.einsum("nij,rnj->rni", g.rotations, r_g / g.scales[None])
    return -n / n.norm(dim=-1, keepdim=True).clamp_min(1e-30)


def gaussian_normal(g: GaussianPrimitive, ray: Ray) -> np.ndarray:
    """Unit normal of the ray-Gaussian intersection plane, facing the ray origin.

    For a flat Gaussian the normal deviates from the shortest local axis by
    ``atan((s_min / s_mid)^2 * tan(theta))``, theta being the ray's angle to
    that axis.
    """
    _, r_g = to_gaussian_local(g, ray)
    whitened = float(np.linalg.norm(r_g))
    if whitened <= DEGENERATE_RAY:
        raise DegenerateRayError(f"whitened direction norm {whitened:.3g}")
    # n . r = |r_g|^2 > 0, so -n faces the origin
    n = g.rotation_matrix() @ (r_g / g.scale)
    return -n / np.linalg.norm(n)


def as_tensors(gaussians: Union[GaussianMap, GaussianTensors, Sequence[GaussianPrimitive]]) -> GaussianTensors:
    if isinstance(gaussians, GaussianMap):
        return gaussians.tensors()
    if isinstance(gaussians, GaussianTensors):
        return gaussians
    return GaussianTensors.from_primitives(list(gaussians))


def render(
    camera: PinholeCamera,
    pose: RigidPose,
    gaussians: Union[GaussianMap, GaussianTensors, Sequence[GaussianPrimitive]],
) -> RenderedFrame:
    """Render color, depth, normal and alpha maps by exact per-pixel ray evaluation."""
    h, w = camera.height, camera.width
    g = as_tensors(gaussians)
    if g.means.shape[0] == 0:
        zeros = torch.zeros
        return RenderedFrame(zeros(h, w, 3, dtype=torch.float64), zeros(h, w, dtype=torch.float64),
                             zeros(h, w, 3, dtype=torch.float64), zeros(h, w, dtype=torch.float64),
                             pose=pose, camera=camera)

    origins, directions, cos_z = rays_for_camera(camera, pose)
    terms = ray_terms(origins, directions, g)
    sc = sort_contributions(terms, g.opacities)

    weight = sc.weight
    alpha = weight.sum(-1)
    color = torch.einsum("rn,rnc->rc", weight, g.colors[sc.order])
    mean_distance = (weight * sc.d_star).sum(-1) / alpha.clamp_min(WEIGHT_EPS)
    depth = torch.where(alpha < MIN_ALPHA_FOR_DEPTH, torch.zeros_like(alpha), mean_distance * cos_z)

    normals = contribution_normals(g, terms.r_g)
    normals = torch.gather(normals, 1, sc.order[..., None].expand(-1, -1, 3))
    blended = torch.einsum("rn,rnc->rc", weight, normals)
    norm = blended.norm(dim=-1, keepdim=True)
    pixel_normal = torch.where(norm > 1e-12, blended / norm.clamp_min(1e-12), torch.zeros_like(blended))

    logger.debug(f"Rendered {w}x{h} view over {g.means.shape[0]} Gaussians")
    return RenderedFrame(
        color=color.reshape(h, w, 3),
        depth=depth.reshape(h, w),
        normal=pixel_normal.reshape(h, w, 3),
        alpha=alpha.reshape(h, w),
        contributions=sc,
        gaussian_normals=normals,
        pose=pose,
        camera=camera,
    )


def depth_to_normal(depth: torch.Tensor, camera: PinholeCamera) -> torch.Tensor:
    """Camera-frame normals from a z-depth map by back-projecting right/down neighbours.

    Pixels whose own depth or either neighbour's depth is invalid (<= 0), and
    the last row and column, get a zero normal.
    """
    z = torch.as_tensor(depth, dtype=torch.float64)
    h, w = z.shape
    pix = torch.as_tensor(camera.pixel_centers(), dtype=torch.float64)
    x = (pix[..., 0] - camera.cx) / camera.fx * z
    y = (pix[..., 1] - camera.cy) / camera.fy * z
    points = torch.stack([x, y, z], dim=-1)

    if h < 2 or w < 2:
        return torch.zeros(h, w, 3, dtype=torch.float64)
    p = points[:-1, :-1]
    right = points[:-1, 1:] - p
    down = points[1:, :-1] - p
    n = torch.cross(right, down, dim=-1)
    n = n / n.norm(dim=-1, keepdim=True).clamp_min(1e-30)
    n = torch.where(((n * p).sum(-1, keepdim=True) > 0), -n, n)
    valid = (z[:-1, :-1] > 0) & (z[:-1, 1:] > 0) & (z[1:, :-1] > 0)
    n = torch.where(valid[..., None], n, torch.zeros_like(n))
    # pad the last row and column with zero normals
    return F.pad(n, (0, 0, 0, 1, 0, 1))
