"""Frame-by-frame tracking: initialization, pose tracking, keyframing, point creation and loops."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from fgo_slam.bundle_adjustment import global_ba
from fgo_slam.errors import DegenerateParallaxError, InsufficientObservationsError
from fgo_slam.geometry import PinholeCamera, RigidPose, SimilarityTransform, so3_exp
from fgo_slam.loop_closure import correct_loop, detect_loop
from fgo_slam.models import TrackingConfig
from fgo_slam.tracking import (
    FeatureObservation,
    Keyframe,
    LoopConstraint,
    MapPoint,
    MapSnapshot,
    Observation,
    estimate_pose,
    parallax_deg,
    triangulate,
    two_view_initialize,
)

# Squared whitened residual above which an observation is not attached to its point.
GATE_FACTOR = 4.0


@dataclass
class TrackingFrame:
    index: int
    timestamp: float
    observations: List[FeatureObservation]
    image: Optional[np.ndarray] = None
    depth: Optional[np.ndarray] = None


@dataclass
class FrameResult:
    frame_index: int
    pose: RigidPose
    keyframe_id: Optional[int] = None
    loop: Optional[LoopConstraint] = None
    initialized: bool = True


@dataclass
class _FrameRecord:
    timestamp: float
    keyframe_id: int
    relative: RigidPose  # frame pose = relative ∘ keyframe pose


@dataclass
class LoopEvent:
    constraint: LoopConstraint
    frame_index: int
    trajectory_before: List[RigidPose] = field(default_factory=list)


class Tracker:
    """Owns keyframes and map points; publishes snapshots for mapping."""

    def __init__(
        self,
        camera: PinholeCamera,
        config: Optional[TrackingConfig] = None,
        mode: str = "rgbd",
        seed: int = 0,
    ) -> None:
        if mode not in ("mono", "rgbd"):
            raise ValueError(f"unknown mode {mode!r}")
        self.camera = camera
        self.config = config or TrackingConfig()
        self.mode = mode
        self.rng = np.random.default_rng(seed)
        self.keyframes: Dict[int, Keyframe] = {}
        self.points: Dict[int, MapPoint] = {}
        self.aliases: Dict[int, int] = {}
        self.loops: List[LoopEvent] = []
        self.scene_extent = 1.0
        self.version = 0
        self._frames: List[_FrameRecord] = []
        self._pending: Dict[int, Dict[int, FeatureObservation]] = {}
        self._reference: Optional[TrackingFrame] = None
        self._waiting: List[int] = []
        self._buffered: Dict[int, TrackingFrame] = {}
        self._new_keyframes: List[int] = []
        self._loop_corrected = False
        self._last_poses: List[RigidPose] = []

    @property
    def initialized(self) -> bool:
        return bool(self.keyframes)

    @property
    def monocular(self) -> bool:
        return self.mode == "mono"

    def _strip(self, frame: TrackingFrame) -> TrackingFrame:
        if not self.monocular:
            return frame
        obs = [FeatureObservation(o.track_id, o.pixel, o.sigma2, None, o.landmark) for o in frame.observations]
        return TrackingFrame(frame.index, frame.timestamp, obs, frame.image, None)

    def point_id(self, track_id: int) -> int:
        return self.aliases.get(track_id, track_id)

    # -- initialization -------------------------------------------------

    def _initialize_rgbd(self, frame: TrackingFrame) -> FrameResult:
        pose = RigidPose.identity()
        with_depth = [o for o in frame.observations if o.depth is not None and o.depth > 0]
        if len(with_depth) < self.config.min_observations:
            raise InsufficientObservationsError(f"only {len(with_depth)} observations with depth in the first frame")
        kf = self._add_keyframe(frame, pose)
        for obs in with_depth:
            position = pose.inverse().apply(self.camera.back_project(obs.pixel, obs.depth))
            self._create_point(obs, position, [Observation(kf.id, obs.pixel, obs.sigma2, obs.depth)])
        self._update_extent()
        logger.info(f"Initialized from frame {frame.index} with {len(self.points)} points (rgbd)")
        return FrameResult(frame.index, pose, kf.id)

    def _try_initialize_mono(self, frame: TrackingFrame) -> Optional[FrameResult]:
        ref = self._reference
        assert ref is not None
        ref_obs = {o.track_id: o for o in ref.observations}
        pairs = [(ref_obs[o.track_id], o) for o in frame.observations if o.track_id in ref_obs]
        if len(pairs) < max(8, self.config.min_observations):
            return None
        pa = np.stack([a.pixel for a, _ in pairs])
        pb = np.stack([b.pixel for _, b in pairs])
        try:
            result = two_view_initialize(pa, pb, self.camera, self.rng)
        except (DegenerateParallaxError, InsufficientObservationsError, np.linalg.LinAlgError):
            return None
        pose_a = RigidPose.identity()
        good = result.inliers & np.array(
            [parallax_deg(p, pose_a, result.pose_b) >= self.config.min_parallax_deg for p in result.points]
        )
        if good.sum() < self.config.min_observations:
            return None

        kf_a = self._add_keyframe(ref, pose_a, record=False)
        kf_b = self._add_keyframe(frame, result.pose_b)
        for (oa, ob), position, ok in zip(pairs, result.points, good):
            if ok:
                self._create_point(
                    oa, position,
                    [Observation(kf_a.id, oa.pixel, oa.sigma2), Observation(kf_b.id, ob.pixel, ob.sigma2)],
                )
        global_ba(self.keyframes, self.points, self.config, fix_scale=True)
        self._update_extent()

        # frames seen while waiting for parallax are tracked against the new map
        for index in self._waiting:
            buffered = self._buffered.pop(index)
            try:
                est = estimate_pose(buffered.observations, self.points, RigidPose.identity(), self.camera,
                                    self.config, self.aliases)
                self._frames[index] = _FrameRecord(buffered.timestamp, kf_a.id, est.pose @ kf_a.pose.inverse())
            except InsufficientObservationsError:
                logger.warning(f"Frame {index} could not be tracked after initialization")
        self._waiting.clear()
        logger.info(
            f"Initialized from frames {ref.index} and {frame.index} with {len(self.points)} points (mono)"
        )
        return FrameResult(frame.index, self.keyframes[kf_b.id].pose, kf_b.id)

    def _update_extent(self) -> None:
        if not self.points:
            return
        positions = np.stack([p.position for p in self.points.values()])
        extent = float(np.linalg.norm(np.ptp(positions, axis=0)))
        self.scene_extent = max(extent, 1e-6)

    # -- bookkeeping ----------------------------------------------------

    def _add_keyframe(self, frame: TrackingFrame, pose: RigidPose, record: bool = True) -> Keyframe:
        kf_id = len(self.keyframes)
        kf = Keyframe(kf_id, pose, self.camera, frame.image, frame.depth, set(), frame.index, frame.timestamp)
        self.keyframes[kf_id] = kf
        self._pending[kf_id] = {}
        self._new_keyframes.append(kf_id)
        if record:
            self._record(frame, kf_id, RigidPose.identity())
        else:
            self._frames[frame.index] = _FrameRecord(frame.timestamp, kf_id, RigidPose.identity())
        logger.info(f"Keyframe {kf_id} inserted at frame {frame.index}")
        return kf

    def _record(self, frame: TrackingFrame, kf_id: int, relative: RigidPose) -> None:
        record = _FrameRecord(frame.timestamp, kf_id, relative)
        if frame.index < len(self._frames):
            self._frames[frame.index] = record
        else:
            while len(self._frames) < frame.index:
                self._frames.append(_FrameRecord(frame.timestamp, kf_id, RigidPose.identity()))
            self._frames.append(record)

    def _create_point(self, obs: FeatureObservation, position: np.ndarray, observations: List[Observation]) -> None:
        pid = self.point_id(obs.track_id)
        self.points[pid] = MapPoint(pid, position, observations, obs.landmark)
        for o in observations:
            self.keyframes[o.keyframe_id].point_ids.add(pid)

    def _gate(self, pose: RigidPose, position: np.ndarray, obs: FeatureObservation) -> bool:
        pc = pose.apply(position)
        if pc[2] <= 0:
            return False
        err = self.camera.project_camera(pc) - obs.pixel
        return float(err @ err) / obs.sigma2 <= GATE_FACTOR * self.config.huber_delta**2

    def _inject_drift(self, pose: RigidPose) -> RigidPose:
        cfg = self.config
        if not (any(cfg.drift_translation) or cfg.drift_yaw_deg or cfg.drift_scale != 1.0):
            return pose
        last = self.keyframes[max(self.keyframes)]
        c = last.pose.camera_center()
        rotation = so3_exp([0.0, 0.0, np.radians(cfg.drift_yaw_deg)])
        s = cfg.drift_scale if self.monocular else 1.0
        drift = SimilarityTransform(s, rotation, c - s * rotation @ c + np.asarray(cfg.drift_translation))
        return drift.transform_pose(pose)

    # -- tracking -------------------------------------------------------

    def _predict(self) -> RigidPose:
        if len(self._last_poses) >= 2:
            velocity = self._last_poses[-1] @ self._last_poses[-2].inverse()
            return velocity @ self._last_poses[-1]
        return self._last_poses[-1]

    def _is_keyframe(self, pose: RigidPose, tracked: Sequence[int]) -> bool:
        last = self.keyframes[max(self.keyframes)]
        if not last.point_ids:
            return True
        overlap = len(set(tracked) & last.point_ids) / len(last.point_ids)
        moved = float(np.linalg.norm(pose.camera_center() - last.pose.camera_center()))
        return overlap < self.config.keyframe_overlap or moved > self.config.keyframe_translation * self.scene_extent

    def _extend_map(self, kf: Keyframe, frame: TrackingFrame) -> None:
        """Attach observations of known points and create points for new tracks."""
        for obs in frame.observations:
            pid = self.point_id(obs.track_id)
            point = self.points.get(pid)
            if point is not None:
                if self._gate(kf.pose, point.position, obs):
                    point.observations.append(Observation(kf.id, obs.pixel, obs.sigma2, obs.depth))
                    kf.point_ids.add(pid)
                continue
            if not self.monocular:
                if obs.depth is not None and obs.depth > 0:
                    position = kf.pose.inverse().apply(self.camera.back_project(obs.pixel, obs.depth))
                    self._create_point(obs, position, [Observation(kf.id, obs.pixel, obs.sigma2, obs.depth)])
                continue
            if not self._triangulate_track(kf, obs):
                self._pending[kf.id][obs.track_id] = obs

    def _triangulate_track(self, kf: Keyframe, obs: FeatureObservation) -> bool:
        for other_id in sorted(self._pending, reverse=True):
            if other_id == kf.id:
                continue
            first = self._pending[other_id].get(obs.track_id)
            if first is None:
                continue
            other = self.keyframes[other_id]
            try:
                position = triangulate(first.pixel, obs.pixel, other.pose, kf.pose, self.camera)
            except DegenerateParallaxError:
                return False
            if parallax_deg(position, other.pose, kf.pose) < self.config.min_parallax_deg:
                return False
            if not (self._gate(other.pose, position, first) and self._gate(kf.pose, position, obs)):
                return False
            del self._pending[other_id][obs.track_id]
            self._create_point(
                obs, position,
                [Observation(other_id, first.pixel, first.sigma2), Observation(kf.id, obs.pixel, obs.sigma2)],
            )
            return True
        return False

    def process(self, frame: TrackingFrame) -> FrameResult:
        """Track one frame; frames must arrive in index order."""
        frame = self._strip(frame)
        if not self.initialized:
            if not self.monocular:
                result = self._initialize_rgbd(frame)
                self._last_poses = [result.pose]
                return result
            if self._reference is None:
                self._reference = frame
                self._record(frame, 0, RigidPose.identity())
                return FrameResult(frame.index, RigidPose.identity(), initialized=False)
            init = self._try_initialize_mono(frame)
            if init is None:
                self._record(frame, 0, RigidPose.identity())
                self._waiting.append(frame.index)
                self._buffered[frame.index] = frame
                return FrameResult(frame.index, RigidPose.identity(), initialized=False)
            self._last_poses = [init.pose]
            return init

        estimate = estimate_pose(frame.observations, self.points, self._predict(), self.camera,
                                 self.config, self.aliases)
        pose = estimate.pose
        tracked = [self.point_id(o.track_id) for o in frame.observations if self.point_id(o.track_id) in self.points]

        result = FrameResult(frame.index, pose)
        if self._is_keyframe(pose, tracked):
            pose = self._inject_drift(pose)
            kf = self._add_keyframe(frame, pose)
            self._extend_map(kf, frame)
            result = FrameResult(frame.index, pose, kf.id)
            n = self.config.ba_every_n_keyframes
            if n and len(self.keyframes) % n == 0:
                global_ba(self.keyframes, self.points, self.config, fix_scale=self.monocular)
            result.loop = self._close_loops(kf.id, frame.index)
            result.pose = self.keyframes[kf.id].pose
        else:
            ref_id = max(self.keyframes)
            self._record(frame, ref_id, pose @ self.keyframes[ref_id].pose.inverse())
        self._last_poses = (self._last_poses + [result.pose])[-2:]
        return result

    def _close_loops(self, kf_id: int, frame_index: int) -> Optional[LoopConstraint]:
        constraint = detect_loop(self.keyframes, self.points, kf_id, self.config, with_scale=self.monocular)
        if constraint is None:
            return None
        event = LoopEvent(constraint, frame_index, self.trajectory())
        correction = correct_loop(self.keyframes, self.points, constraint, self.config, fix_scale=self.monocular)
        for drop, keep in correction.fused.items():
            self.aliases[drop] = keep
            for track, target in list(self.aliases.items()):
                if target == drop:
                    self.aliases[track] = keep
        self.loops.append(event)
        self._loop_corrected = True
        return constraint

    # -- outputs --------------------------------------------------------

    def trajectory(self) -> List[RigidPose]:
        """World-to-camera pose of every processed frame, following keyframe corrections."""
        out = []
        for record in self._frames:
            kf = self.keyframes.get(record.keyframe_id)
            out.append(record.relative if kf is None else record.relative @ kf.pose)
        return out

    def timestamps(self) -> List[float]:
        return [r.timestamp for r in self._frames]

    def publish(self) -> Optional[MapSnapshot]:
        """Snapshot for mapping when keyframes were added or corrected since the last call."""
        if not self._new_keyframes and not self._loop_corrected:
            return None
        self.version += 1
        snapshot = MapSnapshot.capture(
            self.version, self.keyframes, self.points, self._new_keyframes, self._loop_corrected
        )
        self._new_keyframes = []
        self._loop_corrected = False
        return snapshot

    def keyframe_poses(self) -> Dict[int, Tuple[RigidPose, PinholeCamera]]:
        return {k: kf.view() for k, kf in self.keyframes.items()}
