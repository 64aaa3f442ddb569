"""Global bundle adjustment over keyframe poses and map points."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, MutableMapping, Optional, Tuple

import numpy as np
from loguru import logger
from scipy import sparse
from scipy.sparse.linalg import spsolve

from fgo_slam.errors import InsufficientObservationsError
from fgo_slam.geometry import Array, RigidPose, SimilarityTransform
from fgo_slam.models import TrackingConfig
from fgo_slam.tracking import Evaluation, Keyframe, MapPoint, ReprojectionProblem


@dataclass
class BAResult:
    converged: bool
    iterations: int
    initial_cost: float
    final_cost: float
    n_observations: int


@dataclass
class _State:
    poses: List[RigidPose]
    positions: Array

    def arrays(self) -> Tuple[Array, Array, Array]:
        rotations = np.stack([p.rotation for p in self.poses])
        translations = np.stack([p.translation for p in self.poses])
        return rotations, translations, self.positions


def _jacobian(
    ev: Evaluation, problem: ReprojectionProblem, pose_column: Array, n_pose_vars: int, n_points: int
) -> Tuple[sparse.csr_matrix, Array]:
    """Robustly weighted sparse Jacobian and residual vector.

    ``pose_column[k]`` is the first column of pose ``k`` or -1 when it is held fixed.
    """
    rows, cols, vals = [], [], []
    residual = []
    row = 0

    def add_block(j_pose: Array, j_point: Array, r: Array, w: Array, mask: Array) -> None:
        nonlocal row
        idx = np.nonzero(mask)[0]
        if len(idx) == 0:
            return
        sw = np.sqrt(w[idx])
        k = j_pose.shape[1] if j_pose.ndim == 3 else 1
        jp = (j_pose[idx] if j_pose.ndim == 3 else j_pose[idx][:, None, :]) * sw[:, None, None]
        jx = (j_point[idx] if j_point.ndim == 3 else j_point[idx][:, None, :]) * sw[:, None, None]
        rr = (r[idx] if r.ndim == 2 else r[idx][:, None]) * sw[:, None]
        row_ids = row + np.arange(len(idx) * k).reshape(len(idx), k)

        pc = pose_column[problem.pose_index[idx]]
        free = pc >= 0
        if np.any(free):
            r_ids = np.repeat(row_ids[free][:, :, None], 6, axis=2)
            c_ids = np.broadcast_to(pc[free][:, None, None] + np.arange(6), r_ids.shape)
            rows.append(r_ids.ravel())
            cols.append(c_ids.ravel())
            vals.append(jp[free].ravel())
        r_ids = np.repeat(row_ids[:, :, None], 3, axis=2)
        c_ids = np.broadcast_to(
            n_pose_vars + 3 * problem.point_index[idx][:, None, None] + np.arange(3), r_ids.shape
        )
        rows.append(r_ids.ravel())
        cols.append(c_ids.ravel())
        vals.append(jx.ravel())
        residual.append(rr.ravel())
        row += len(idx) * k

    add_block(ev.j_pose_px, ev.j_point_px, ev.r_px, ev.w_px, ev.valid)
    add_block(ev.j_pose_d, ev.j_point_d, ev.r_d, ev.w_d, ev.use_d)
    n_vars = n_pose_vars + 3 * n_points
    if row == 0:
        return sparse.csr_matrix((0, n_vars)), np.zeros(0)
    jac = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(row, n_vars)
    ).tocsr()
    return jac, np.concatenate(residual)


def _apply_step(state: _State, step: Array, pose_column: Array, n_pose_vars: int) -> _State:
    poses = [
        pose if col < 0 else pose.retract(step[col : col + 6])
        for pose, col in zip(state.poses, pose_column)
    ]
    positions = state.positions + step[n_pose_vars:].reshape(-1, 3)
    return _State(poses, positions)


def _fix_baseline(state: _State, anchor: int, second: int, baseline: float, frozen: Array) -> _State:
    """Rescale the reconstruction about the anchor camera so the anchor-second baseline is kept."""
    c0 = state.poses[anchor].camera_center()
    current = np.linalg.norm(state.poses[second].camera_center() - c0)
    if current < 1e-15:
        return state
    s = baseline / current
    sim = SimilarityTransform(s, np.eye(3), (1.0 - s) * c0)
    poses = [p if frozen[i] else sim.transform_pose(p) for i, p in enumerate(state.poses)]
    return _State(poses, sim.apply(state.positions))


def global_ba(
    keyframes: MutableMapping[int, Keyframe],
    points: MutableMapping[int, MapPoint],
    config: Optional[TrackingConfig] = None,
    fixed_keyframes: Optional[Iterable[int]] = None,
    fix_scale: bool = False,
) -> BAResult:
    """Joint Levenberg-Marquardt over all keyframe poses and map points, updated in place.

    The first keyframe is held fixed unless ``fixed_keyframes`` says otherwise.
    With ``fix_scale`` (monocular) the distance between the first two
    keyframes is restored after each accepted step.
    """
    config = config or TrackingConfig()
    kf_order = sorted(keyframes)
    pt_order = sorted(pid for pid, p in points.items() if p.observations)
    if len(kf_order) < 1 or not pt_order:
        raise InsufficientObservationsError("bundle adjustment needs keyframes and observed points")
    fixed = set(fixed_keyframes) if fixed_keyframes is not None else {kf_order[0]}

    problem = ReprojectionProblem.from_map(
        keyframes, points, kf_order, pt_order, config.depth_sigma, config.huber_delta
    )
    pose_column = np.full(len(kf_order), -1, dtype=np.int64)
    n_free = 0
    for i, k in enumerate(kf_order):
        if k not in fixed:
            pose_column[i] = 6 * n_free
            n_free += 1
    n_pose_vars = 6 * n_free
    n_vars = n_pose_vars + 3 * len(pt_order)

    state = _State([keyframes[k].pose for k in kf_order], np.stack([points[p].position for p in pt_order]))
    baseline = 0.0
    if fix_scale and len(kf_order) >= 2:
        baseline = float(np.linalg.norm(state.poses[1].camera_center() - state.poses[0].camera_center()))

    ev = problem.evaluate(*state.arrays(), jacobians=True)
    initial_cost = ev.cost
    mu: Optional[float] = None
    nu = 2.0
    converged = False
    iterations = 0
    for iterations in range(1, config.ba_max_iterations + 1):
        if ev.cost <= 1e-30:
            converged = True
            break
        jac, r = _jacobian(ev, problem, pose_column, n_pose_vars, len(pt_order))
        h = (jac.T @ jac).tocsc()
        g = jac.T @ r
        diag = h.diagonal()
        if mu is None:
            mu = 1e-4 * max(float(diag.max()), 1e-12)
        step = spsolve(h + mu * sparse.identity(n_vars, format="csc"), -g)
        candidate = _apply_step(state, step, pose_column, n_pose_vars)
        if baseline > 0.0:
            candidate = _fix_baseline(candidate, 0, 1, baseline, pose_column < 0)
        ev_c = problem.evaluate(*candidate.arrays(), jacobians=True)
        if ev_c.n_valid >= ev.n_valid and ev_c.cost < ev.cost:
            predicted = 0.5 * float(step @ (mu * step - g))
            gain = (ev.cost - ev_c.cost) / max(predicted, 1e-300)
            relative = (ev.cost - ev_c.cost) / ev.cost
            state, ev = candidate, ev_c
            mu *= max(1.0 / 3.0, 1.0 - (2.0 * gain - 1.0) ** 3)
            nu = 2.0
            logger.debug(f"BA iteration {iterations}: cost {ev.cost:.6g}")
            if relative < config.ba_relative_tolerance:
                converged = True
                break
        else:
            mu *= nu
            nu *= 2.0
            if mu > 1e30:
                converged = True
                break

    if not converged:
        logger.warning(f"Bundle adjustment hit {config.ba_max_iterations} iterations (cost {ev.cost:.4g})")
    for k, pose in zip(kf_order, state.poses):
        keyframes[k].pose = pose
    for p, position in zip(pt_order, state.positions):
        points[p].position = position.copy()
    logger.info(
        f"Global BA over {len(kf_order)} keyframes / {len(pt_order)} points: "
        f"cost {initial_cost:.4g} -> {ev.cost:.4g}"
    )
    return BAResult(converged, iterations, initial_cost, ev.cost, len(problem))
