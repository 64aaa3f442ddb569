"""Ray-Gaussian responses, per-view opacity compositing and the point opacity field.

Two flavours live here. The scalar functions work on one ray and a list of
:class:`GaussianPrimitive` objects and are used for point queries and as the
reference for tests. The tensor kernels evaluate many rays against the whole
map at once and are shared with the renderer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
from loguru import logger
from numpy.typing import ArrayLike

from fgo_slam.errors import DegenerateRayError, NoVisibleViewError
from fgo_slam.geometry import (
    MIN_DEPTH,
    Array,
    GaussianPrimitive,
    PinholeCamera,
    Ray,
    RigidPose,
    to_gaussian_local,
)

# Contributions with opacity * peak response below one 8-bit level are dropped.
CONTRIBUTION_CUTOFF = 1.0 / 255.0
BOX_SIGMA = 3.0
DEGENERATE_RAY = 1e-12

View = Tuple[RigidPose, PinholeCamera]


@dataclass(frozen=True)
class RayContribution:
    """One Gaussian's peak response along a ray."""

    gaussian_id: int
    d_star: float
    g_max: float
    weight: float = 0.0
    # r_g^T r_g: the 1D response is g_max * exp(-curvature * (d - d_star)^2 / 2)
    curvature: float = 1.0

    def response(self, d: float) -> float:
        return self.g_max * float(np.exp(-0.5 * self.curvature * (d - self.d_star) ** 2))

    def cumulative_response(self, d: float) -> float:
        """Response that rises to ``g_max`` and stays there past the peak."""
        return self.g_max if d >= self.d_star else self.response(d)


@dataclass(frozen=True)
class RaySample:
    """Contributions along one ray, sorted front to back."""

    ray: Ray
    contributions: List[RayContribution] = field(default_factory=list)

    @property
    def ids(self) -> List[int]:
        return [c.gaussian_id for c in self.contributions]

    @property
    def weights(self) -> Array:
        return np.array([c.weight for c in self.contributions], dtype=np.float64)

    @property
    def depths(self) -> Array:
        return np.array([c.d_star for c in self.contributions], dtype=np.float64)


def eval_1d(g: GaussianPrimitive, ray: Ray, d: float) -> float:
    """Gaussian value at parameter ``d`` along the ray."""
    o_g, r_g = to_gaussian_local(g, ray)
    x = o_g + d * r_g
    return float(np.exp(-0.5 * x @ x))


def peak_response(o_g: ArrayLike, r_g: ArrayLike) -> Tuple[float, float]:
    """Stationary point ``d* = -(o.r)/(r.r)`` and the peak value in a whitened frame."""
    o = np.asarray(o_g, dtype=np.float64)
    r = np.asarray(r_g, dtype=np.float64)
    rr = float(r @ r)
    if np.sqrt(rr) <= DEGENERATE_RAY:
        raise DegenerateRayError(f"whitened direction norm {np.sqrt(rr):.3g}")
    d_star = -float(o @ r) / rr
    x = o + d_star * r
    return d_star, float(np.exp(-0.5 * x @ x))


def max_contribution(g: GaussianPrimitive, ray: Ray) -> Tuple[float, float]:
    """Ray parameter of maximum response and the maximum value."""
    o_g, r_g = to_gaussian_local(g, ray)
    return peak_response(o_g, r_g)


def _hits_box(o_g: Array, r_g: Array, k: float = BOX_SIGMA) -> bool:
    """Slab test of the ray against the k-sigma box (a cube in the whitened frame)."""
    t_near, t_far = -np.inf, np.inf
    for o, r in zip(o_g, r_g):
        if abs(r) < 1e-300:
            if abs(o) > k:
                return False
            continue
        t1, t2 = (-k - o) / r, (k - o) / r
        t_near = max(t_near, min(t1, t2))
        t_far = min(t_far, max(t1, t2))
    return t_far >= max(t_near, 0.0)


def sample_ray(ray: Ray, gaussians: Sequence[GaussianPrimitive]) -> RaySample:
    """Collect, filter and sort the contributions of every Gaussian along a ray.

    Gaussians whose 3-sigma box misses the ray, whose peak lies behind the
    origin, or whose ``opacity * g_max`` is below the cutoff are dropped. Ties
    in ``d_star`` keep ascending Gaussian id.
    """
    found: List[RayContribution] = []
    for gid, g in enumerate(gaussians):
        o_g, r_g = to_gaussian_local(g, ray)
        if not _hits_box(o_g, r_g):
            continue
        d_star, g_max = peak_response(o_g, r_g)
        if d_star <= 0.0 or g.opacity * g_max < CONTRIBUTION_CUTOFF:
            continue
        found.append(RayContribution(gid, d_star, g_max, curvature=float(r_g @ r_g)))
    found.sort(key=lambda c: (c.d_star, c.gaussian_id))

    deltas = [gaussians[c.gaussian_id].opacity for c in found]
    weights = _front_to_back(np.array([c.g_max for c in found]) * np.array(deltas))
    contributions = [
        RayContribution(c.gaussian_id, c.d_star, c.g_max, float(w), c.curvature)
        for c, w in zip(found, weights)
    ]
    return RaySample(ray, contributions)


def _front_to_back(alphas: Array) -> Array:
    if alphas.size == 0:
        return alphas
    transmittance = np.concatenate([[1.0], np.cumprod(1.0 - alphas)[:-1]])
    return alphas * transmittance


def _deltas_for(sample: RaySample, deltas: Sequence[float]) -> Array:
    """Per-contribution opacities, indexed by Gaussian id."""
    lookup = np.asarray(deltas, dtype=np.float64)
    return lookup[sample.ids] if sample.contributions else np.zeros(0)


def composite_opacity(sample: RaySample, deltas: Sequence[float], d: float) -> float:
    """Front-to-back composited opacity along the ray up to parameter ``d``.

    ``deltas`` is indexed by Gaussian id. Each Gaussian contributes its
    cumulative response, frozen at its peak once ``d`` passes ``d_star``.
    """
    if not sample.contributions:
        return 0.0
    alphas = _deltas_for(sample, deltas) * np.array(
        [c.cumulative_response(d) for c in sample.contributions]
    )
    value = float(np.sum(_front_to_back(alphas)))
    return min(max(value, 0.0), 1.0)


def mixing_weights(sample: RaySample, deltas: Sequence[float]) -> Array:
    """Blending weight of each contribution, evaluated at its peak response."""
    if not sample.contributions:
        return np.zeros(0)
    alphas = _deltas_for(sample, deltas) * np.array([c.g_max for c in sample.contributions])
    return _front_to_back(alphas)


def single_view_opacity(
    point: ArrayLike, view: View, gaussians: Sequence[GaussianPrimitive]
) -> Optional[float]:
    """Opacity at ``point`` seen from one view, or None when it is behind the camera."""
    pose, _camera = view
    p = np.asarray(point, dtype=np.float64).reshape(3)
    if pose.apply(p)[2] <= MIN_DEPTH:
        return None
    center = pose.camera_center()
    ray = Ray.through(center, p)
    sample = sample_ray(ray, gaussians)
    deltas = [g.opacity for g in gaussians]
    return composite_opacity(sample, deltas, float(np.linalg.norm(p - center)))


def point_opacity(
    point: ArrayLike, views: Sequence[View], gaussians: Sequence[GaussianPrimitive]
) -> float:
    """Minimum single-view opacity over every view that has the point in front of it."""
    values = [
        v for v in (single_view_opacity(point, view, gaussians) for view in views) if v is not None
    ]
    if not values:
        raise NoVisibleViewError("point is behind every camera")
    return min(max(min(values), 0.0), 1.0)


# ----------------------------------------------------------------------------
# Tensor kernels
# ----------------------------------------------------------------------------


class GaussianTensors(NamedTuple):
    """Constrained Gaussian parameters as tensors (N rows)."""

    means: torch.Tensor  # (N, 3)
    rotations: torch.Tensor  # (N, 3, 3) local -> world
    scales: torch.Tensor  # (N, 3)
    opacities: torch.Tensor  # (N,)
    colors: torch.Tensor  # (N, 3)

    @classmethod
    def from_primitives(cls, gaussians: Sequence[GaussianPrimitive]) -> GaussianTensors:
        def stack(values: List[Array]) -> torch.Tensor:
            return torch.as_tensor(np.array(values), dtype=torch.float64)

        return cls(
            stack([g.mean for g in gaussians]).reshape(-1, 3),
            stack([g.rotation_matrix() for g in gaussians]).reshape(-1, 3, 3),
            stack([g.scale for g in gaussians]).reshape(-1, 3),
            stack([g.opacity for g in gaussians]).reshape(-1),
            stack([g.color for g in gaussians]).reshape(-1, 3),
        )

    @property
    def num_gaussians(self) -> int:
        return int(self.means.shape[0])


class RayTerms(NamedTuple):
    """Per (ray, Gaussian) peak responses."""

    d_star: torch.Tensor  # (R, N)
    g_max: torch.Tensor  # (R, N)
    r_g: torch.Tensor  # (R, N, 3)
    hit: torch.Tensor  # (R, N) bool, box hit and in front of the origin


def ray_terms(origins: torch.Tensor, directions: torch.Tensor, g: GaussianTensors) -> RayTerms:
    """Whiten every ray against every Gaussian and take the peak response."""
    diff = origins[:, None, :] - g.means[None, :, :]
    o_g = torch.einsum("nji,rnj->rni", g.rotations, diff) / g.scales[None]
    r_g = torch.einsum("nji,rj->rni", g.rotations, directions) / g.scales[None]
    rr = (r_g * r_g).sum(-1).clamp_min(DEGENERATE_RAY**2)
    d_star = -(o_g * r_g).sum(-1) / rr
    x = o_g + d_star[..., None] * r_g
    g_max = torch.exp(-0.5 * (x * x).sum(-1))
    with torch.no_grad():
        hit = _box_hits(o_g, r_g) & (d_star > 0.0)
    return RayTerms(d_star, g_max, r_g, hit)


def _box_hits(o_g: torch.Tensor, r_g: torch.Tensor, k: float = BOX_SIGMA) -> torch.Tensor:
    flat = r_g.abs() < 1e-300
    safe_r = torch.where(flat, torch.ones_like(r_g), r_g)
    t1 = (-k - o_g) / safe_r
    t2 = (k - o_g) / safe_r
    inf = torch.full_like(t1, float("inf"))
    lo = torch.where(flat, -inf, torch.minimum(t1, t2))
    hi = torch.where(flat, inf, torch.maximum(t1, t2))
    outside = flat & (o_g.abs() > k)
    t_near = lo.max(-1).values
    t_far = hi.min(-1).values
    return (t_far >= t_near.clamp_min(0.0)) & ~outside.any(-1)


class SortedContributions(NamedTuple):
    """Contributions per ray in front-to-back order."""

    order: torch.Tensor  # (R, N) Gaussian ids
    d_star: torch.Tensor  # (R, N), 0 where inactive
    alpha: torch.Tensor  # (R, N) opacity * g_max, 0 where inactive
    weight: torch.Tensor  # (R, N) mixing weights
    active: torch.Tensor  # (R, N) bool


def sort_contributions(terms: RayTerms, opacities: torch.Tensor) -> SortedContributions:
    """Apply the cutoff, sort by ``d_star`` (ties by id) and compute mixing weights."""
    alpha = opacities[None, :] * terms.g_max
    with torch.no_grad():
        active = terms.hit & (alpha >= CONTRIBUTION_CUTOFF)
        key = torch.where(active, terms.d_star, torch.full_like(terms.d_star, float("inf")))
        order = torch.sort(key, dim=-1, stable=True).indices
    active_s = torch.gather(active, 1, order)
    alpha_s = torch.where(active_s, torch.gather(alpha, 1, order), torch.zeros_like(alpha))
    d_s = torch.where(active_s, torch.gather(terms.d_star, 1, order), torch.zeros_like(alpha))
    ones = torch.ones_like(alpha_s[:, :1])
    transmittance = torch.cumprod(torch.cat([ones, 1.0 - alpha_s[:, :-1]], dim=1), dim=1)
    weight = alpha_s * transmittance
    return SortedContributions(order, d_s, alpha_s, weight, active_s)


def batched_point_opacity(
    points: Array,
    views: Sequence[View],
    gaussians: GaussianTensors,
    chunk: int = 2048,
) -> Tuple[Array, np.ndarray]:
    """Point opacity for many points at once.

    Returns the opacities and a mask of points seen by at least one view;
    points behind every camera get opacity 0.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    best = np.full(len(pts), np.inf)
    for pose, _camera in views:
        in_front = pose.apply(pts)[:, 2] > MIN_DEPTH
        center = pose.camera_center()
        for start in range(0, len(pts), chunk):
            sl = slice(start, start + chunk)
            idx = np.nonzero(in_front[sl])[0] + start
            if idx.size == 0:
                continue
            values = _view_opacity(pts[idx], center, gaussians)
            best[idx] = np.minimum(best[idx], values)
    seen = np.isfinite(best)
    out = np.where(seen, np.clip(best, 0.0, 1.0), 0.0)
    logger.debug(f"Evaluated opacity at {len(pts)} points over {len(views)} views")
    return out, seen


def _view_opacity(points: Array, center: Array, g: GaussianTensors) -> Array:
    with torch.no_grad():
        p = torch.as_tensor(points, dtype=torch.float64)
        c = torch.as_tensor(center, dtype=torch.float64).expand_as(p)
        offset = p - c
        dist = offset.norm(dim=-1)
        dirs = offset / dist[:, None]
        terms = ray_terms(c, dirs, g)
        alpha_peak = g.opacities[None, :] * terms.g_max
        active = terms.hit & (alpha_peak >= CONTRIBUTION_CUTOFF)
        rr = (terms.r_g * terms.r_g).sum(-1)
        d = dist[:, None]
        rising = terms.g_max * torch.exp(-0.5 * rr * (d - terms.d_star) ** 2)
        response = torch.where(d >= terms.d_star, terms.g_max, rising)
        alpha = torch.where(active, g.opacities[None, :] * response, torch.zeros_like(rising))
        key = torch.where(active, terms.d_star, torch.full_like(terms.d_star, float("inf")))
        order = torch.sort(key, dim=-1, stable=True).indices
        alpha_s = torch.gather(alpha, 1, order)
        ones = torch.ones_like(alpha_s[:, :1])
        transmittance = torch.cumprod(torch.cat([ones, 1.0 - alpha_s[:, :-1]], dim=1), dim=1)
        return (alpha_s * transmittance).sum(-1).numpy()
