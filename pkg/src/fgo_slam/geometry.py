"""Rigid and similarity transforms, the pinhole camera, rays and Gaussian primitives."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Tuple

import numpy as np
from numpy.typing import ArrayLike, NDArray
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.spatial.transform import Rotation

from fgo_slam.errors import DegenerateConfigurationError, PointBehindCameraError

Array = NDArray[np.float64]

# Camera-frame depth below which a point counts as behind the camera.
MIN_DEPTH = 1e-9


def _vec3(value: ArrayLike) -> Array:
    out = np.asarray(value, dtype=np.float64).reshape(3)
    return out


def skew(v: ArrayLike) -> Array:
    """Cross-product matrix of a 3-vector."""
    x, y, z = _vec3(v)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(phi: ArrayLike) -> Array:
    """Rotation matrix of an axis-angle vector."""
    return Rotation.from_rotvec(_vec3(phi)).as_matrix()


def so3_log(rotation: ArrayLike) -> Array:
    """Axis-angle vector of a rotation matrix."""
    return Rotation.from_matrix(np.asarray(rotation, dtype=np.float64)).as_rotvec()


def quat_to_matrix(q: ArrayLike) -> Array:
    """Rotation matrix from a (w, x, y, z) quaternion; the input is normalized first."""
    w, x, y, z = np.asarray(q, dtype=np.float64).reshape(4)
    return Rotation.from_quat([x, y, z, w]).as_matrix()


def matrix_to_quat(rotation: ArrayLike) -> Array:
    """(w, x, y, z) unit quaternion with non-negative w."""
    x, y, z, w = Rotation.from_matrix(np.asarray(rotation, dtype=np.float64)).as_quat()
    q = np.array([w, x, y, z])
    return -q if w < 0 else q


def _check_rotation(rotation: Array, tol: float = 1e-6) -> None:
    if rotation.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {rotation.shape}")
    if not np.allclose(rotation @ rotation.T, np.eye(3), atol=tol):
        raise ValueError("rotation is not orthonormal")
    if np.linalg.det(rotation) <= 0:
        raise ValueError("rotation has negative determinant")


@dataclass(frozen=True)
class RigidPose:
    """World-to-camera rigid transform ``x_c = R x_w + t``."""

    rotation: Array = field(default_factory=lambda: np.eye(3))
    translation: Array = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        rotation = np.asarray(self.rotation, dtype=np.float64)
        _check_rotation(rotation)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", _vec3(self.translation))

    @classmethod
    def identity(cls) -> RigidPose:
        return cls()

    @classmethod
    def from_matrix(cls, matrix: ArrayLike) -> RigidPose:
        m = np.asarray(matrix, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_quaternion(cls, q: ArrayLike, translation: ArrayLike) -> RigidPose:
        return cls(quat_to_matrix(q), translation)

    @classmethod
    def look_at(cls, eye: ArrayLike, target: ArrayLike, up: ArrayLike = (0.0, 0.0, 1.0)) -> RigidPose:
        """World-to-camera pose of a camera at ``eye`` whose optical axis points at ``target``."""
        eye_v, target_v, up_v = _vec3(eye), _vec3(target), _vec3(up)
        z = target_v - eye_v
        z /= np.linalg.norm(z)
        x = np.cross(z, up_v)
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(z, np.array([0.0, 1.0, 0.0]))
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        rotation = np.stack([x, y, z])
        return cls(rotation, -rotation @ eye_v)

    def matrix(self) -> Array:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> RigidPose:
        rt = self.rotation.T
        return RigidPose(rt, -rt @ self.translation)

    def compose(self, other: RigidPose) -> RigidPose:
        """``self ∘ other``: apply ``other`` first."""
        return RigidPose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def __matmul__(self, other: RigidPose) -> RigidPose:
        return self.compose(other)

    def apply(self, points: ArrayLike) -> Array:
        """Transform one point (3,) or a batch (N, 3)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def camera_center(self) -> Array:
        return -self.rotation.T @ self.translation

    def quaternion(self) -> Array:
        return matrix_to_quat(self.rotation)

    def retract(self, xi: ArrayLike) -> RigidPose:
        """Left update ``Exp(xi) ∘ self`` with ``xi = (rho, phi)``."""
        xi = np.asarray(xi, dtype=np.float64).reshape(6)
        dr = so3_exp(xi[3:])
        return RigidPose(dr @ self.rotation, dr @ self.translation + xi[:3])

    def distance(self, other: RigidPose) -> Tuple[float, float]:
        """Translational (camera centres) and angular distance to another pose."""
        dt = float(np.linalg.norm(self.camera_center() - other.camera_center()))
        da = float(np.linalg.norm(so3_log(self.rotation.T @ other.rotation)))
        return dt, da


@dataclass(frozen=True)
class SimilarityTransform:
    """``x -> s R x + t`` with ``s > 0``."""

    scale: float = 1.0
    rotation: Array = field(default_factory=lambda: np.eye(3))
    translation: Array = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        if not self.scale > 0:
            raise ValueError(f"similarity scale must be positive, got {self.scale}")
        rotation = np.asarray(self.rotation, dtype=np.float64)
        _check_rotation(rotation)
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", _vec3(self.translation))

    @classmethod
    def identity(cls) -> SimilarityTransform:
        return cls()

    def apply(self, points: ArrayLike) -> Array:
        p = np.asarray(points, dtype=np.float64)
        return self.scale * (p @ self.rotation.T) + self.translation

    def inverse(self) -> SimilarityTransform:
        rt = self.rotation.T
        inv_s = 1.0 / self.scale
        return SimilarityTransform(inv_s, rt, -inv_s * (rt @ self.translation))

    def compose(self, other: SimilarityTransform) -> SimilarityTransform:
        return SimilarityTransform(
            self.scale * other.scale,
            self.rotation @ other.rotation,
            self.scale * (self.rotation @ other.translation) + self.translation,
        )

    def __matmul__(self, other: SimilarityTransform) -> SimilarityTransform:
        return self.compose(other)

    def to_rigid(self) -> RigidPose:
        if abs(self.scale - 1.0) > 1e-12:
            raise ValueError("similarity with scale != 1 is not rigid")
        return RigidPose(self.rotation, self.translation)

    def power(self, w: float) -> SimilarityTransform:
        """Blend between identity (``w=0``) and ``self`` (``w=1``)."""
        return SimilarityTransform(
            self.scale**w,
            so3_exp(w * so3_log(self.rotation)),
            w * self.translation,
        )

    def transform_pose(self, pose: RigidPose) -> RigidPose:
        """Move a world-to-camera pose with the world: the camera centre maps through
        the similarity and the orientation is rotated, metric scale is dropped."""
        center = self.apply(pose.camera_center())
        rotation_wc = self.rotation @ pose.rotation.T
        rotation_cw = rotation_wc.T
        return RigidPose(rotation_cw, -rotation_cw @ center)


class PinholeCamera(BaseModel):
    """Pinhole intrinsics without distortion."""

    model_config = ConfigDict(frozen=True)

    fx: float = Field(gt=0, description="Focal length along x in pixels")
    fy: float = Field(gt=0, description="Focal length along y in pixels")
    cx: float = Field(ge=0, description="Principal point x in pixels")
    cy: float = Field(ge=0, description="Principal point y in pixels")
    width: int = Field(gt=0, description="Image width in pixels")
    height: int = Field(gt=0, description="Image height in pixels")

    @model_validator(mode="after")
    def _principal_point_inside(self) -> PinholeCamera:
        if not self.cx < self.width or not self.cy < self.height:
            raise ValueError("principal point must lie inside the image")
        return self

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float = 60.0) -> PinholeCamera:
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2.0)
        return cls(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0, width=width, height=height)

    def intrinsics(self) -> Array:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, width: int, height: int) -> PinholeCamera:
        sx, sy = width / self.width, height / self.height
        return PinholeCamera(
            fx=self.fx * sx, fy=self.fy * sy, cx=self.cx * sx, cy=self.cy * sy,
            width=width, height=height,
        )

    def project_camera(self, points_c: ArrayLike) -> Array:
        """Pinhole projection of camera-frame points (no depth check)."""
        p = np.asarray(points_c, dtype=np.float64)
        u = self.fx * p[..., 0] / p[..., 2] + self.cx
        v = self.fy * p[..., 1] / p[..., 2] + self.cy
        return np.stack([u, v], axis=-1)

    def back_project(self, pixels: ArrayLike, depth: ArrayLike) -> Array:
        """Camera-frame points at the given z-depth for pixel coordinates (..., 2)."""
        uv = np.asarray(pixels, dtype=np.float64)
        z = np.asarray(depth, dtype=np.float64)
        x = (uv[..., 0] - self.cx) / self.fx * z
        y = (uv[..., 1] - self.cy) / self.fy * z
        return np.stack([x, y, z * np.ones_like(x)], axis=-1)

    def in_image(self, pixels: ArrayLike) -> NDArray[np.bool_]:
        uv = np.asarray(pixels, dtype=np.float64)
        return (
            (uv[..., 0] >= 0) & (uv[..., 0] < self.width)
            & (uv[..., 1] >= 0) & (uv[..., 1] < self.height)
        )

    def pixel_centers(self) -> Array:
        """(H, W, 2) pixel-centre coordinates, row-major."""
        us = np.arange(self.width, dtype=np.float64) + 0.5
        vs = np.arange(self.height, dtype=np.float64) + 0.5
        uu, vv = np.meshgrid(us, vs)
        return np.stack([uu, vv], axis=-1)


@dataclass(frozen=True)
class Ray:
    """World-frame ray with a unit direction."""

    origin: Array
    direction: Array

    def __post_init__(self) -> None:
        direction = _vec3(self.direction)
        if abs(np.linalg.norm(direction) - 1.0) > 1e-12:
            raise ValueError("ray direction must be unit length")
        object.__setattr__(self, "origin", _vec3(self.origin))
        object.__setattr__(self, "direction", direction)

    @classmethod
    def through(cls, origin: ArrayLike, target: ArrayLike) -> Ray:
        o = _vec3(origin)
        d = _vec3(target) - o
        norm = np.linalg.norm(d)
        if norm < 1e-15:
            raise ValueError("ray target coincides with its origin")
        return cls(o, d / norm)

    def at(self, d: float) -> Array:
        return self.origin + d * self.direction


@dataclass(frozen=True)
class GaussianPrimitive:
    """Anisotropic Gaussian with opacity and RGB color."""

    mean: Array
    rotation: Array  # unit quaternion (w, x, y, z)
    scale: Array
    opacity: float
    color: Array

    def __post_init__(self) -> None:
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        norm = np.linalg.norm(q)
        if norm < 1e-12:
            raise ValueError("rotation quaternion is zero")
        scale = _vec3(self.scale)
        if np.any(scale <= 0):
            raise ValueError("Gaussian scales must be positive")
        if not 0.0 <= self.opacity <= 1.0:
            raise ValueError(f"opacity must lie in [0, 1], got {self.opacity}")
        color = _vec3(self.color)
        if np.any(color < 0) or np.any(color > 1):
            raise ValueError("color must lie in [0, 1]")
        object.__setattr__(self, "mean", _vec3(self.mean))
        object.__setattr__(self, "rotation", q / norm)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "opacity", float(self.opacity))
        object.__setattr__(self, "color", color)

    @classmethod
    def isotropic(
        cls,
        mean: ArrayLike,
        sigma: float,
        opacity: float,
        color: ArrayLike = (0.5, 0.5, 0.5),
    ) -> GaussianPrimitive:
        return cls(_vec3(mean), np.array([1.0, 0.0, 0.0, 0.0]), np.full(3, sigma), opacity, _vec3(color))

    def rotation_matrix(self) -> Array:
        return quat_to_matrix(self.rotation)

    def covariance(self) -> Array:
        r = self.rotation_matrix()
        return r @ np.diag(self.scale**2) @ r.T

    def density(self, x: ArrayLike) -> float:
        """Unnormalized, opacity-free density ``exp(-1/2 (x-mu)^T Sigma^-1 (x-mu))``."""
        diff = _vec3(x) - self.mean
        return float(np.exp(-0.5 * diff @ np.linalg.solve(self.covariance(), diff)))

    def box_corners(self, k: float = 3.0) -> Array:
        """(8, 3) corners of the oriented k-sigma box."""
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)
        return self.mean + (signs * (k * self.scale)) @ self.rotation_matrix().T


def project(camera: PinholeCamera, pose: RigidPose, point: ArrayLike) -> Array:
    """Pixel coordinates of a world point; raises when it is behind the camera."""
    pc = pose.apply(_vec3(point))
    if pc[2] <= MIN_DEPTH:
        raise PointBehindCameraError(f"camera-frame depth {pc[2]:.3g} <= {MIN_DEPTH}")
    return camera.project_camera(pc)


def project_points(
    camera: PinholeCamera, pose: RigidPose, points: ArrayLike
) -> Tuple[Array, NDArray[np.bool_]]:
    """Vectorized projection; returns pixels and a mask of points in front of the camera."""
    pc = pose.apply(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    valid = pc[:, 2] > MIN_DEPTH
    safe = pc.copy()
    safe[~valid, 2] = 1.0
    return camera.project_camera(safe), valid


def to_gaussian_local(g: GaussianPrimitive, ray: Ray) -> Tuple[Array, Array]:
    """Whitened ray origin and direction in the Gaussian's local frame.

    The direction is not renormalized, so the ray parameter keeps its metric
    meaning along the world ray.
    """
    rt = g.rotation_matrix().T
    inv_s = 1.0 / g.scale
    o_g = inv_s * (rt @ (ray.origin - g.mean))
    r_g = inv_s * (rt @ ray.direction)
    return o_g, r_g


def from_gaussian_local(g: GaussianPrimitive, o_g: ArrayLike, r_g: ArrayLike) -> Ray:
    """Inverse of :func:`to_gaussian_local`."""
    r = g.rotation_matrix()
    origin = r @ (g.scale * _vec3(o_g)) + g.mean
    direction = r @ (g.scale * _vec3(r_g))
    return Ray(origin, direction)


def umeyama_align(
    source: Sequence[ArrayLike] | Array,
    target: Sequence[ArrayLike] | Array,
    with_scale: bool = True,
    collinear_tol: float = 1e-9,
) -> SimilarityTransform:
    """Least-squares similarity (or rigid) transform mapping ``source`` onto ``target``."""
    src = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape:
        raise ValueError(f"point sets differ in size: {src.shape} vs {dst.shape}")
    if len(src) < 3:
        raise DegenerateConfigurationError(f"need at least 3 point pairs, got {len(src)}")

    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    spread = np.linalg.svd(xs, compute_uv=False)
    if spread[0] < 1e-15 or spread[1] < collinear_tol * spread[0]:
        raise DegenerateConfigurationError("source points are collinear")

    cov = xd.T @ xs / len(src)
    u, d, vt = np.linalg.svd(cov)
    s = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2, 2] = -1.0
    rotation = u @ s @ vt
    scale = 1.0
    if with_scale:
        var_s = np.mean(np.sum(xs**2, axis=1))
        scale = float(np.trace(np.diag(d) @ s) / var_s)
    translation = mu_d - scale * rotation @ mu_s
    return SimilarityTransform(scale, rotation, translation)
