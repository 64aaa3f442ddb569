"""Map points, keyframes and robust reprojection-based pose estimation."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np
from loguru import logger
from numpy.typing import ArrayLike, NDArray

from fgo_slam.errors import (
    DanglingReferenceError,
    DegenerateParallaxError,
    InsufficientObservationsError,
)
from fgo_slam.geometry import MIN_DEPTH, Array, PinholeCamera, RigidPose, SimilarityTransform
from fgo_slam.models import TrackingConfig

# 95% chi-square quantile for 2 DoF, in whitened pixel units.
HUBER_DELTA = 2.447
MIN_RAY_CROSS = 1e-6


@dataclass(frozen=True)
class Observation:
    """One keyframe's measurement of a map point."""

    keyframe_id: int
    pixel: Array
    sigma2: float = 1.0
    depth: Optional[float] = None

    def __post_init__(self) -> None:
        if not self.sigma2 > 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        object.__setattr__(self, "pixel", np.asarray(self.pixel, dtype=np.float64).reshape(2))


@dataclass(frozen=True)
class FeatureObservation:
    """A front-end measurement in the current frame.

    ``track_id`` identifies the feature track; ``landmark`` is the
    ground-truth identity and is only known for simulated data.
    """

    track_id: int
    pixel: Array
    sigma2: float = 1.0
    depth: Optional[float] = None
    landmark: Optional[int] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "pixel", np.asarray(self.pixel, dtype=np.float64).reshape(2))


@dataclass
class MapPoint:
    id: int
    position: Array
    observations: List[Observation] = field(default_factory=list)
    landmark: Optional[int] = None

    def __post_init__(self) -> None:
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)

    def keyframe_ids(self) -> List[int]:
        return [o.keyframe_id for o in self.observations]

    def first_keyframe(self) -> int:
        return min(self.keyframe_ids())

    def last_keyframe(self) -> int:
        return max(self.keyframe_ids())


@dataclass
class Keyframe:
    id: int
    pose: RigidPose
    camera: PinholeCamera
    image: Optional[np.ndarray] = None
    depth: Optional[np.ndarray] = None
    point_ids: Set[int] = field(default_factory=set)
    frame_index: int = 0
    timestamp: float = 0.0

    def view(self) -> Tuple[RigidPose, PinholeCamera]:
        return self.pose, self.camera


@dataclass(frozen=True)
class LoopConstraint:
    """Similarity mapping the drifted side of keyframe ``b`` onto keyframe ``a``'s frame."""

    a: int
    b: int
    similarity: SimilarityTransform
    matches: Tuple[Tuple[int, int], ...]

    def __post_init__(self) -> None:
        if self.a == self.b:
            raise ValueError("loop constraint needs two distinct keyframes")
        if len(self.matches) < 3:
            raise ValueError(f"loop constraint needs at least 3 matches, got {len(self.matches)}")


@dataclass(frozen=True)
class MapSnapshot:
    """Immutable copy of the tracking state handed to mapping."""

    version: int
    keyframes: Dict[int, Keyframe]
    points: Dict[int, MapPoint]
    new_keyframes: Tuple[int, ...] = ()
    loop_corrected: bool = False

    @classmethod
    def capture(
        cls,
        version: int,
        keyframes: Mapping[int, Keyframe],
        points: Mapping[int, MapPoint],
        new_keyframes: Sequence[int] = (),
        loop_corrected: bool = False,
    ) -> MapSnapshot:
        return cls(
            version,
            {k: copy.deepcopy(kf) for k, kf in keyframes.items()},
            {k: copy.deepcopy(p) for k, p in points.items()},
            tuple(new_keyframes),
            loop_corrected,
        )


def huber(s: ArrayLike, delta: float = HUBER_DELTA) -> NDArray[np.float64]:
    """Huber kernel on a squared whitened residual ``s``: quadratic, then linear in ``sqrt(s)``."""
    s = np.asarray(s, dtype=np.float64)
    k2 = delta * delta
    return np.where(s <= k2, s, 2.0 * delta * np.sqrt(np.maximum(s, k2)) - k2)


def huber_weight(s: ArrayLike, delta: float = HUBER_DELTA) -> NDArray[np.float64]:
    """IRLS weight ``rho'(s)``."""
    s = np.asarray(s, dtype=np.float64)
    k2 = delta * delta
    return np.where(s <= k2, 1.0, delta / np.sqrt(np.maximum(s, k2)))


@dataclass
class Evaluation:
    """Residuals, robust weights and Jacobians of a reprojection problem at one state."""

    cost: float
    n_valid: int
    valid: NDArray[np.bool_]
    r_px: Array  # (M, 2) whitened
    w_px: Array
    r_d: Array  # (M,) whitened, 0 where unused
    w_d: Array
    use_d: NDArray[np.bool_]
    j_pose_px: Optional[Array] = None  # (M, 2, 6)
    j_point_px: Optional[Array] = None  # (M, 2, 3)
    j_pose_d: Optional[Array] = None  # (M, 6)
    j_point_d: Optional[Array] = None  # (M, 3)


@dataclass
class ReprojectionProblem:
    """Flattened observation arrays over a set of poses and points."""

    pose_index: NDArray[np.int64]
    point_index: NDArray[np.int64]
    pixels: Array
    inv_sigma: Array
    depth: Array  # NaN where no depth measurement exists
    intrinsics: Array  # (M, 4) fx, fy, cx, cy
    depth_sigma: float = 0.01
    delta: float = HUBER_DELTA

    def __len__(self) -> int:
        return int(len(self.pose_index))

    @classmethod
    def from_map(
        cls,
        keyframes: Mapping[int, Keyframe],
        points: Mapping[int, MapPoint],
        keyframe_order: Sequence[int],
        point_order: Sequence[int],
        depth_sigma: float = 0.01,
        delta: float = HUBER_DELTA,
    ) -> ReprojectionProblem:
        kf_slot = {k: i for i, k in enumerate(keyframe_order)}
        rows: List[Tuple[int, int, Array, float, float, Array]] = []
        for j, pid in enumerate(point_order):
            for obs in points[pid].observations:
                if obs.keyframe_id not in keyframes:
                    raise DanglingReferenceError(f"point {pid} references missing keyframe {obs.keyframe_id}")
                cam = keyframes[obs.keyframe_id].camera
                rows.append(
                    (
                        kf_slot[obs.keyframe_id], j, obs.pixel, obs.sigma2,
                        np.nan if obs.depth is None else obs.depth,
                        np.array([cam.fx, cam.fy, cam.cx, cam.cy]),
                    )
                )
        return cls._from_rows(rows, depth_sigma, delta)

    @classmethod
    def single_view(
        cls,
        observations: Sequence[FeatureObservation],
        point_slots: Sequence[int],
        camera: PinholeCamera,
        depth_sigma: float = 0.01,
        delta: float = HUBER_DELTA,
    ) -> ReprojectionProblem:
        intr = np.array([camera.fx, camera.fy, camera.cx, camera.cy])
        rows = [
            (0, slot, o.pixel, o.sigma2, np.nan if o.depth is None else o.depth, intr)
            for o, slot in zip(observations, point_slots)
        ]
        return cls._from_rows(rows, depth_sigma, delta)

    @classmethod
    def _from_rows(cls, rows: list, depth_sigma: float, delta: float) -> ReprojectionProblem:
        if not rows:
            empty = np.zeros(0)
            return cls(
                np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros((0, 2)),
                empty, empty, np.zeros((0, 4)), depth_sigma, delta,
            )
        kf, pt, pix, s2, d, intr = zip(*rows)
        return cls(
            np.asarray(kf, dtype=np.int64),
            np.asarray(pt, dtype=np.int64),
            np.asarray(pix, dtype=np.float64),
            1.0 / np.sqrt(np.asarray(s2, dtype=np.float64)),
            np.asarray(d, dtype=np.float64),
            np.asarray(intr, dtype=np.float64),
            depth_sigma,
            delta,
        )

    def evaluate(
        self, rotations: Array, translations: Array, positions: Array, jacobians: bool = False
    ) -> Evaluation:
        m = len(self)
        if m == 0:
            z = np.zeros(0)
            return Evaluation(0.0, 0, np.zeros(0, dtype=bool), np.zeros((0, 2)), z, z, z, np.zeros(0, dtype=bool))
        r_mat = rotations[self.pose_index]
        pc = np.einsum("mij,mj->mi", r_mat, positions[self.point_index]) + translations[self.pose_index]
        valid = pc[:, 2] > MIN_DEPTH
        z = np.where(valid, pc[:, 2], 1.0)
        fx, fy, cx, cy = self.intrinsics.T
        uv = np.stack([fx * pc[:, 0] / z + cx, fy * pc[:, 1] / z + cy], axis=-1)
        r_px = (uv - self.pixels) * self.inv_sigma[:, None]
        r_px[~valid] = 0.0
        s_px = (r_px**2).sum(-1)

        use_d = valid & np.isfinite(self.depth)
        r_d = np.where(use_d, (pc[:, 2] - np.nan_to_num(self.depth)) / self.depth_sigma, 0.0)
        s_d = r_d**2

        cost = 0.5 * float(huber(s_px[valid], self.delta).sum() + huber(s_d[use_d], self.delta).sum())
        ev = Evaluation(
            cost=cost,
            n_valid=int(valid.sum()),
            valid=valid,
            r_px=r_px,
            w_px=np.where(valid, huber_weight(s_px, self.delta), 0.0),
            r_d=r_d,
            w_d=np.where(use_d, huber_weight(s_d, self.delta), 0.0),
            use_d=use_d,
        )
        if not jacobians:
            return ev

        d_proj = np.zeros((m, 2, 3))
        d_proj[:, 0, 0] = fx / z
        d_proj[:, 0, 2] = -fx * pc[:, 0] / z**2
        d_proj[:, 1, 1] = fy / z
        d_proj[:, 1, 2] = -fy * pc[:, 1] / z**2
        d_proj *= self.inv_sigma[:, None, None]
        d_proj[~valid] = 0.0

        # left perturbation: d pc / d(rho, phi) = [I, -[pc]x]
        d_pc = np.zeros((m, 3, 6))
        d_pc[:, :, :3] = np.eye(3)
        sk = np.zeros((m, 3, 3))
        sk[:, 0, 1], sk[:, 0, 2] = -pc[:, 2], pc[:, 1]
        sk[:, 1, 0], sk[:, 1, 2] = pc[:, 2], -pc[:, 0]
        sk[:, 2, 0], sk[:, 2, 1] = -pc[:, 1], pc[:, 0]
        d_pc[:, :, 3:] = -sk

        ev.j_pose_px = d_proj @ d_pc
        ev.j_point_px = d_proj @ r_mat
        ev.j_pose_d = np.where(use_d[:, None], d_pc[:, 2, :] / self.depth_sigma, 0.0)
        ev.j_point_d = np.where(use_d[:, None], r_mat[:, 2, :] / self.depth_sigma, 0.0)
        return ev


def _stack_poses(poses: Sequence[RigidPose]) -> Tuple[Array, Array]:
    return np.stack([p.rotation for p in poses]), np.stack([p.translation for p in poses])


def reprojection_cost(
    points: Mapping[int, MapPoint],
    keyframes: Mapping[int, Keyframe],
    delta: float = HUBER_DELTA,
    depth_sigma: float = 0.01,
) -> float:
    """Robust cost ``sum 1/2 rho(|p - pi(R P + t)|^2 / sigma2)`` over all observations.

    Depth measurements, when present, add ``1/2 rho(((z - d) / depth_sigma)^2)``.
    """
    kf_order = sorted(keyframes)
    pt_order = sorted(points)
    if not pt_order:
        return 0.0
    problem = ReprojectionProblem.from_map(keyframes, points, kf_order, pt_order, depth_sigma, delta)
    if len(problem) == 0:
        return 0.0
    rotations, translations = _stack_poses([keyframes[k].pose for k in kf_order])
    positions = np.stack([points[p].position for p in pt_order])
    return problem.evaluate(rotations, translations, positions).cost


@dataclass
class PoseEstimate:
    pose: RigidPose
    cost: float
    initial_cost: float
    iterations: int
    converged: bool
    n_observations: int


def _normal_equations_pose(ev: Evaluation) -> Tuple[Array, Array]:
    jw = ev.j_pose_px * ev.w_px[:, None, None]
    h = np.einsum("mki,mkj->ij", jw, ev.j_pose_px)
    g = np.einsum("mki,mk->i", jw, ev.r_px)
    jd = ev.j_pose_d * ev.w_d[:, None]
    h += jd.T @ ev.j_pose_d
    g += jd.T @ ev.r_d
    return h, g


def estimate_pose(
    observations: Sequence[FeatureObservation],
    points: Mapping[int, MapPoint],
    initial_pose: RigidPose,
    camera: PinholeCamera,
    config: Optional[TrackingConfig] = None,
    aliases: Optional[Mapping[int, int]] = None,
) -> PoseEstimate:
    """Pose-only Levenberg-Marquardt on SE(3) against known map points.

    Observations whose track is not a map point are ignored. The result is
    flagged ``converged=False`` when the iteration budget runs out.
    """
    config = config or TrackingConfig()
    aliases = aliases or {}
    matched = [(o, aliases.get(o.track_id, o.track_id)) for o in observations]
    matched = [(o, pid) for o, pid in matched if pid in points]
    if len(matched) < config.min_observations:
        raise InsufficientObservationsError(
            f"{len(matched)} observations of known points, need {config.min_observations}"
        )
    obs, pids = zip(*matched)
    problem = ReprojectionProblem.single_view(
        obs, list(range(len(pids))), camera, config.depth_sigma, config.huber_delta
    )
    positions = np.stack([points[p].position for p in pids])

    def evaluate(pose: RigidPose, jac: bool = False) -> Evaluation:
        return problem.evaluate(pose.rotation[None], pose.translation[None], positions, jac)

    pose = initial_pose
    ev = evaluate(pose, True)
    initial_cost = ev.cost
    mu: Optional[float] = None
    nu = 2.0
    steps = 0
    converged = False
    for _ in range(config.lm_max_iterations):
        h, g = _normal_equations_pose(ev)
        if mu is None:
            mu = 1e-4 * max(float(np.max(np.diag(h))), 1e-12)
        step = np.linalg.solve(h + mu * np.eye(6), -g)
        if np.linalg.norm(step) < config.lm_step_tolerance:
            converged = True
            break
        candidate = pose.retract(step)
        ev_c = evaluate(candidate, True)
        if ev_c.n_valid >= ev.n_valid and ev_c.cost < ev.cost:
            predicted = 0.5 * float(step @ (mu * step - g))
            gain = (ev.cost - ev_c.cost) / max(predicted, 1e-300)
            pose, ev = candidate, ev_c
            steps += 1
            mu *= max(1.0 / 3.0, 1.0 - (2.0 * gain - 1.0) ** 3)
            nu = 2.0
        else:
            mu *= nu
            nu *= 2.0
            if mu > 1e30:
                converged = True
                break
    if not converged:
        logger.warning(f"Pose estimation hit {config.lm_max_iterations} iterations (cost {ev.cost:.4g})")
    logger.debug(f"Pose LM: {steps} steps, cost {initial_cost:.4g} -> {ev.cost:.4g}")
    return PoseEstimate(pose, ev.cost, initial_cost, steps, converged, len(matched))


def pixel_ray(camera: PinholeCamera, pose: RigidPose, pixel: ArrayLike) -> Tuple[Array, Array]:
    """World-frame origin and unit direction of the ray through ``pixel``."""
    u, v = np.asarray(pixel, dtype=np.float64).reshape(2)
    d_cam = np.array([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, 1.0])
    d = pose.rotation.T @ d_cam
    return pose.camera_center(), d / np.linalg.norm(d)


def triangulate(
    pixel_a: ArrayLike,
    pixel_b: ArrayLike,
    pose_a: RigidPose,
    pose_b: RigidPose,
    camera_a: PinholeCamera,
    camera_b: Optional[PinholeCamera] = None,
) -> Array:
    """Midpoint of the closest approach of two back-projected rays."""
    camera_b = camera_b or camera_a
    c_a, d_a = pixel_ray(camera_a, pose_a, pixel_a)
    c_b, d_b = pixel_ray(camera_b, pose_b, pixel_b)
    if np.linalg.norm(c_b - c_a) < 1e-12:
        raise DegenerateParallaxError("zero baseline between the two views")
    if np.linalg.norm(np.cross(d_a, d_b)) < MIN_RAY_CROSS:
        raise DegenerateParallaxError("rays are parallel")
    w0 = c_a - c_b
    b = d_a @ d_b
    d, e = d_a @ w0, d_b @ w0
    denom = 1.0 - b * b
    s = (b * e - d) / denom
    t = (e - b * d) / denom
    return 0.5 * ((c_a + s * d_a) + (c_b + t * d_b))


def parallax_deg(point: ArrayLike, pose_a: RigidPose, pose_b: RigidPose) -> float:
    """Angle between the viewing rays of a point from two camera centres."""
    p = np.asarray(point, dtype=np.float64)
    a = p - pose_a.camera_center()
    b = p - pose_b.camera_center()
    cos = a @ b / max(np.linalg.norm(a) * np.linalg.norm(b), 1e-300)
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))


_W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


def _normalized(camera: PinholeCamera, pixels: Array) -> Array:
    return np.stack([(pixels[:, 0] - camera.cx) / camera.fx, (pixels[:, 1] - camera.cy) / camera.fy], axis=-1)


def _eight_point(xa: Array, xb: Array) -> Array:
    """Essential matrix with ``xb^T E xa = 0`` from normalized coordinates."""
    ha = np.column_stack([xa, np.ones(len(xa))])
    hb = np.column_stack([xb, np.ones(len(xb))])
    a = np.einsum("ni,nj->nij", hb, ha).reshape(len(xa), 9)
    _, _, vt = np.linalg.svd(a)
    e = vt[-1].reshape(3, 3)
    u, s, vt = np.linalg.svd(e)
    sigma = 0.5 * (s[0] + s[1])
    return u @ np.diag([sigma, sigma, 0.0]) @ vt


def _decompose_essential(e: Array) -> List[Tuple[Array, Array]]:
    u, _, vt = np.linalg.svd(e)
    if np.linalg.det(u) < 0:
        u[:, -1] *= -1
    if np.linalg.det(vt) < 0:
        vt[-1, :] *= -1
    r1, r2 = u @ _W @ vt, u @ _W.T @ vt
    t = u[:, 2]
    return [(r1, t), (r1, -t), (r2, t), (r2, -t)]


def _sampson(e: Array, xa: Array, xb: Array) -> Array:
    ha = np.column_stack([xa, np.ones(len(xa))])
    hb = np.column_stack([xb, np.ones(len(xb))])
    ea = ha @ e.T
    etb = hb @ e
    num = np.einsum("ni,ni->n", hb, ea) ** 2
    den = ea[:, 0] ** 2 + ea[:, 1] ** 2 + etb[:, 0] ** 2 + etb[:, 1] ** 2
    return num / np.maximum(den, 1e-300)


def _triangulate_normalized(xa: Array, xb: Array, rotation: Array, translation: Array) -> Array:
    """Midpoint triangulation in camera-a coordinates for a relative pose ``x_b = R x_a + t``."""
    d_a = np.column_stack([xa, np.ones(len(xa))])
    d_b = np.column_stack([xb, np.ones(len(xb))]) @ rotation  # R^T d_b
    c_b = -rotation.T @ translation
    d_a = d_a / np.linalg.norm(d_a, axis=1, keepdims=True)
    d_b = d_b / np.linalg.norm(d_b, axis=1, keepdims=True)
    w0 = -c_b
    b = np.einsum("ni,ni->n", d_a, d_b)
    d = d_a @ w0
    e = d_b @ w0
    denom = np.maximum(1.0 - b * b, 1e-300)
    s = (b * e - d) / denom
    t = (e - b * d) / denom
    return 0.5 * (s[:, None] * d_a + (c_b + t[:, None] * d_b))


@dataclass
class TwoViewResult:
    pose_b: RigidPose  # relative to the first camera, unit baseline
    points: Array  # (N, 3) in the first camera frame
    inliers: NDArray[np.bool_]


def two_view_initialize(
    pixels_a: ArrayLike,
    pixels_b: ArrayLike,
    camera: PinholeCamera,
    rng: np.random.Generator,
    threshold_px: float = 2.0,
    iterations: int = 200,
) -> TwoViewResult:
    """Relative pose and structure from two views (8-point essential matrix in RANSAC, cheirality)."""
    pa = np.asarray(pixels_a, dtype=np.float64).reshape(-1, 2)
    pb = np.asarray(pixels_b, dtype=np.float64).reshape(-1, 2)
    if len(pa) < 8:
        raise InsufficientObservationsError(f"two-view initialization needs 8 matches, got {len(pa)}")
    xa, xb = _normalized(camera, pa), _normalized(camera, pb)
    threshold = (threshold_px / camera.fx) ** 2

    best_inliers = np.ones(len(xa), dtype=bool)
    best_count = -1
    for _ in range(iterations):
        sample = rng.choice(len(xa), size=8, replace=False)
        e = _eight_point(xa[sample], xb[sample])
        inliers = _sampson(e, xa, xb) < threshold
        if inliers.sum() > best_count:
            best_count, best_inliers = int(inliers.sum()), inliers
        if best_count == len(xa):
            break
    if best_count < 8:
        raise DegenerateParallaxError("no essential matrix with 8 consistent matches")

    e = _eight_point(xa[best_inliers], xb[best_inliers])
    best: Optional[Tuple[int, Array, Array, Array]] = None
    for rotation, t in _decompose_essential(e):
        pts = _triangulate_normalized(xa, xb, rotation, t)
        in_front = (pts[:, 2] > 0) & ((pts @ rotation.T + t)[:, 2] > 0) & best_inliers
        count = int(in_front.sum())
        if best is None or count > best[0]:
            best = (count, rotation, t, pts)
    assert best is not None
    count, rotation, t, pts = best
    inliers = best_inliers & (pts[:, 2] > 0) & ((pts @ rotation.T + t)[:, 2] > 0)
    logger.info(f"Two-view initialization: {count}/{len(xa)} matches in front of both cameras")
    return TwoViewResult(RigidPose(rotation, t / np.linalg.norm(t)), pts, inliers)
