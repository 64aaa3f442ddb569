"""Main orchestration: tracking and mapping over a sequence, then mesh extraction and evaluation."""

from __future__ import annotations

import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
import pandas as pd
import sentry_sdk
import torch
from loguru import logger

from fgo_slam.checkpoint import Checkpoint, KeyframeView, load_checkpoint, save_checkpoint
from fgo_slam.datasets import Dataset, load_dataset
from fgo_slam.errors import AllInvalidDepthError, FgoError, MissingFileError, PipelineStageError
from fgo_slam.formats import Trajectory, read_tum, write_ply, write_tum
from fgo_slam.frontend import SyntheticFrontend, TrackingFrontend, landmarks_from_depth, landmarks_in_frustum
from fgo_slam.geometry import PinholeCamera, RigidPose
from fgo_slam.map_optimizer import MapOptimizer, points_extent, seed_gaussians
from fgo_slam.metrics import associate_trajectories, ate_rmse, depth_l1, psnr, ssim
from fgo_slam.models import ExtractionConfig, FrameMetrics, MetricsReport, RunArtifacts, RunConfig
from fgo_slam.renderer import GaussianMap, render
from fgo_slam.surface_extraction import TriangleMesh, extract_mesh
from fgo_slam.synthetic import SyntheticScene, generate_synthetic_scene
from fgo_slam.tracker import Tracker, TrackingFrame
from fgo_slam.tracking import Keyframe, MapPoint, MapSnapshot
from fgo_slam.utils import parse_synthetic_source, save_color_png

# Every n-th dataset frame contributes landmarks for the correspondence stand-in.
LANDMARK_FRAME_STRIDE = 10


def initialize_sentry(dsn: Optional[str]) -> None:
    """Initialize Sentry for error tracking."""
    if dsn:
        sentry_sdk.init(
            dsn=dsn,
            traces_sample_rate=0.1,
            profiles_sample_rate=0.1,
        )
        logger.info("Sentry initialized for error tracking")


def _report_failure(error: Exception) -> None:
    if sentry_sdk.Hub.current.client:
        sentry_sdk.capture_exception(error)


@dataclass
class SequenceInput:
    """What the pipeline needs from a sequence, whatever its origin."""

    camera: PinholeCamera
    timestamps: List[float]
    ground_truth: Optional[List[RigidPose]]
    load_color: Callable[[int], np.ndarray]
    load_depth: Optional[Callable[[int], np.ndarray]]
    frontend: TrackingFrontend
    name: str = ""

    def __len__(self) -> int:
        return len(self.timestamps)


def sequence_from_scene(scene: SyntheticScene, config: RunConfig) -> SequenceInput:
    rgbd = config.mode == "rgbd"
    frontend = SyntheticFrontend.from_scene(scene, config.frontend, config.seed, with_depth=rgbd)
    return SequenceInput(
        camera=scene.camera,
        timestamps=[float(t) for t in scene.timestamps],
        ground_truth=list(scene.poses),
        load_color=lambda i: scene.images[i],
        load_depth=(lambda i: scene.depths[i]) if rgbd else None,
        frontend=frontend,
        name=f"synthetic-{scene.shape}",
    )


def sequence_from_dataset(dataset: Dataset, config: RunConfig) -> SequenceInput:
    """Real sequences have no feature front-end; correspondences come from
    landmarks placed with the ground-truth trajectory (back-projected sensor
    depth in rgbd mode, random points in the view frusta in mono mode)."""
    if dataset.ground_truth is None:
        raise MissingFileError(f"sequence {dataset.name} has no ground-truth trajectory")
    dataset = dataset.resized(config.width, config.height)
    camera = dataset.output_camera
    rgbd = config.mode == "rgbd"
    rng = np.random.default_rng(config.seed)
    stride = list(range(0, len(dataset), LANDMARK_FRAME_STRIDE))
    poses = [dataset.ground_truth[i] for i in stride]
    n = config.frontend.n_landmarks
    if rgbd:
        landmarks = landmarks_from_depth([dataset.load_depth(i) for i in stride], poses, camera, n, rng)
    else:
        landmarks = landmarks_in_frustum(poses, camera, n, rng)
    frontend = SyntheticFrontend(landmarks, dataset.ground_truth, camera, config.frontend, config.seed, rgbd)
    return SequenceInput(
        camera=camera,
        timestamps=dataset.timestamps,
        ground_truth=dataset.ground_truth,
        load_color=dataset.load_color,
        load_depth=dataset.load_depth if rgbd else None,
        frontend=frontend,
        name=dataset.name,
    )


def open_source(source: Union[str, Path, SyntheticScene, Dataset], config: RunConfig) -> SequenceInput:
    """Turn ``synthetic:SHAPE``, a dataset directory or an in-memory scene into a sequence."""
    if isinstance(source, SyntheticScene):
        return sequence_from_scene(source, config)
    if isinstance(source, Dataset):
        return sequence_from_dataset(source, config)
    synthetic = parse_synthetic_source(str(source))
    if synthetic is not None:
        synthetic.setdefault("seed", config.seed)
        synthetic.setdefault("n_landmarks", config.frontend.n_landmarks)
        scene = generate_synthetic_scene(width=config.width, height=config.height, **synthetic)
        return sequence_from_scene(scene, config)
    dataset = load_dataset(
        Path(source), config.association_tolerance, with_depth=config.mode == "rgbd",
        depth_scale=config.depth_scale,
    )
    return sequence_from_dataset(dataset, config)


class MappingWorker:
    """Consumes tracking snapshots: seeds Gaussians for new points, follows pose
    corrections and optimizes the map over the keyframe window."""

    def __init__(self, config: RunConfig) -> None:
        self.config = config
        self.optimizer = MapOptimizer(
            None, config.optimizer, extent=1.0, seed=config.seed, use_depth=config.mode == "rgbd"
        )
        self.keyframes: Dict[int, Keyframe] = {}
        self.poses: Dict[int, RigidPose] = {}
        self.seeded: Set[int] = set()
        self.extent: Optional[float] = None

    @property
    def gmap(self) -> GaussianMap:
        return self.optimizer.gmap

    def consume(self, snapshot: MapSnapshot) -> None:
        if self.poses:
            self.optimizer.sync(snapshot.keyframes, self.poses)
        self.keyframes = snapshot.keyframes
        self.poses = {k: kf.pose for k, kf in snapshot.keyframes.items()}

        fresh = [p for pid, p in sorted(snapshot.points.items()) if pid not in self.seeded and p.observations]
        if self.extent is None and snapshot.points:
            self.extent = max(points_extent(np.stack([p.position for p in snapshot.points.values()])), 1e-6)
            self.optimizer.extent = self.extent
        by_anchor: Dict[int, List[MapPoint]] = {}
        for point in fresh:
            by_anchor.setdefault(point.first_keyframe(), []).append(point)
            self.seeded.add(point.id)
        for anchor, points in sorted(by_anchor.items()):
            self.optimizer.add_gaussians(
                seed_gaussians(points, self.keyframes, self.config.optimizer, self.extent), anchor
            )

        rounds = max(len(snapshot.new_keyframes), 1 if snapshot.loop_corrected else 0)
        iterations = self.config.optimizer.iterations_per_keyframe * rounds
        if iterations and len(self.gmap):
            self.optimizer.optimize(self.keyframes, iterations)
        logger.debug(
            f"Mapping consumed snapshot v{snapshot.version}: {len(self.gmap)} Gaussians, "
            f"{len(self.keyframes)} keyframes"
        )


@dataclass
class StageOneResult:
    tracker: Tracker
    mapper: MappingWorker
    frame_rows: List[FrameMetrics] = field(default_factory=list)
    tracking_s: float = 0.0
    mapping_s: float = 0.0


def _tracking_frame(seq: SequenceInput, index: int) -> TrackingFrame:
    image = seq.load_color(index)
    depth = seq.load_depth(index) if seq.load_depth is not None else None
    observations = seq.frontend.observe(index, image, depth)
    return TrackingFrame(index, seq.timestamps[index], observations, image, depth)


def _track(tracker: Tracker, seq: SequenceInput, index: int) -> Tuple[Optional[MapSnapshot], bool, float]:
    start = time.perf_counter()
    try:
        result = tracker.process(_tracking_frame(seq, index))
    except Exception as exc:
        raise PipelineStageError("tracking", index, exc) from exc
    snapshot = tracker.publish()
    return snapshot, result.keyframe_id is not None, time.perf_counter() - start


def _map(mapper: MappingWorker, snapshot: MapSnapshot, index: int) -> float:
    start = time.perf_counter()
    try:
        mapper.consume(snapshot)
    except Exception as exc:
        raise PipelineStageError("mapping", index, exc) from exc
    return time.perf_counter() - start


def run_stage_one(seq: SequenceInput, config: RunConfig) -> StageOneResult:
    """Tracking and mapping over every frame, sequentially or as two workers."""
    tracker = Tracker(seq.camera, config.tracking, config.mode, config.seed)
    mapper = MappingWorker(config)
    rows = [FrameMetrics(frame=i, timestamp=seq.timestamps[i], keyframe=False) for i in range(len(seq))]
    result = StageOneResult(tracker, mapper, rows)

    if config.workers == "sequential":
        for i in range(len(seq)):
            snapshot, is_kf, dt = _track(tracker, seq, i)
            rows[i].keyframe, rows[i].tracking_s = is_kf, dt
            if snapshot is not None:
                rows[i].mapping_s = _map(mapper, snapshot, i)
    else:
        hand_off: "queue.Queue[Optional[Tuple[int, MapSnapshot]]]" = queue.Queue(maxsize=4)
        failures: List[BaseException] = []

        def mapping_loop() -> None:
            while True:
                item = hand_off.get()
                if item is None:
                    return
                if failures:
                    continue
                index, snapshot = item
                try:
                    rows[index].mapping_s = _map(mapper, snapshot, index)
                except BaseException as exc:  # re-raised on the tracking side
                    failures.append(exc)

        worker = threading.Thread(target=mapping_loop, name="fgo-mapping", daemon=True)
        worker.start()
        try:
            for i in range(len(seq)):
                if failures:
                    break
                snapshot, is_kf, dt = _track(tracker, seq, i)
                rows[i].keyframe, rows[i].tracking_s = is_kf, dt
                if snapshot is not None:
                    hand_off.put((i, snapshot))
        finally:
            hand_off.put(None)
            worker.join()
        if failures:
            raise failures[0]

    result.tracking_s = float(sum(r.tracking_s for r in rows))
    result.mapping_s = float(sum(r.mapping_s for r in rows))
    logger.info(
        f"Stage 1 done: {len(tracker.keyframes)} keyframes, {len(tracker.points)} points, "
        f"{len(mapper.gmap)} Gaussians, {len(tracker.loops)} loops"
    )
    return result


def _evaluate_frames(
    seq: SequenceInput, gmap: GaussianMap, trajectory: Sequence[RigidPose], rows: List[FrameMetrics],
    config: RunConfig, render_dir: Optional[Path],
) -> List[str]:
    renders: List[str] = []
    if len(gmap) == 0:
        return renders
    for i in range(0, len(seq), config.eval_every):
        with torch.no_grad():
            frame = render(seq.camera, trajectory[i], gmap).to_numpy()
        color = np.clip(frame["color"], 0.0, 1.0)
        target = seq.load_color(i)
        rows[i].psnr_db = psnr(color, target)
        rows[i].ssim = ssim(color, target)
        if seq.load_depth is not None:
            try:
                rows[i].depth_l1_m = depth_l1(frame["depth"], seq.load_depth(i))
            except AllInvalidDepthError:
                logger.warning(f"Frame {i}: no valid depth to compare")
        if render_dir is not None:
            renders.append(str(save_color_png(render_dir / f"frame_{i:06d}.png", color)))
    return renders


def _mean(values: Sequence[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


def _write_frames_csv(path: Path, rows: Sequence[FrameMetrics]) -> Path:
    df = pd.DataFrame([r.model_dump() for r in rows])
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, encoding="utf-8")
    logger.info(f"Exported {len(rows)} frame rows to {path}")
    return path


def run_pipeline(
    source: Union[str, Path, SyntheticScene, Dataset],
    config: Optional[RunConfig] = None,
    out_dir: Union[str, Path] = "out",
) -> RunArtifacts:
    """Run tracking and mapping, extract the mesh and write every artifact to ``out_dir``.

    Stage failures are raised as :class:`PipelineStageError` carrying the
    frame index.
    """
    config = config or RunConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    initialize_sentry(config.sentry_dsn)
    logger.info(f"Starting {config.mode} run ({config.workers}) writing to {out}")

    try:
        seq = open_source(source, config)
        stage_one = run_stage_one(seq, config)
    except PipelineStageError as exc:
        logger.error(f"Pipeline failed: {exc}")
        _report_failure(exc)
        raise

    tracker, mapper = stage_one.tracker, stage_one.mapper
    trajectory = tracker.trajectory()
    timestamps = tracker.timestamps()
    traj_path = write_tum(out / "trajectory.txt", Trajectory.from_poses(timestamps, trajectory))

    alignment = "similarity" if config.mode == "mono" else "rigid"
    ate = float("nan")
    ate_before: Optional[float] = None
    if seq.ground_truth is not None:
        gt = seq.ground_truth[: len(trajectory)]
        ate = ate_rmse(trajectory, gt, alignment)
        if tracker.loops:
            before = tracker.loops[0].trajectory_before
            ate_before = ate_rmse(before, seq.ground_truth[: len(before)], alignment)

    gmap = mapper.gmap
    views = [KeyframeView(k, kf.pose, kf.camera) for k, kf in sorted(tracker.keyframes.items())]
    ckpt_path = save_checkpoint(out / "map.ckpt", Checkpoint(gmap, config, mapper.optimizer.iteration, views))

    start = time.perf_counter()
    try:
        mesh = extract_mesh(gmap, [(v.pose, v.camera) for v in views], config.extraction)
    except FgoError as exc:
        error = PipelineStageError("extraction", None, exc)
        logger.error(f"Pipeline failed: {error}")
        _report_failure(error)
        raise error from exc
    mesh_path = write_ply(out / "mesh.ply", mesh, binary=config.extraction.binary_ply)
    extraction_s = time.perf_counter() - start

    rows = stage_one.frame_rows
    renders = _evaluate_frames(seq, gmap, trajectory, rows, config, out / "renders")
    n_frames = max(len(seq), 1)
    report = MetricsReport(
        ate_rmse_m=ate,
        ate_rmse_before_loop_m=ate_before,
        psnr_db=_mean([r.psnr_db for r in rows]),
        ssim=_mean([r.ssim for r in rows]),
        depth_l1_m=_mean([r.depth_l1_m for r in rows]),
        n_gaussians=len(gmap),
        n_keyframes=len(tracker.keyframes),
        n_loops=len(tracker.loops),
        n_mesh_vertices=mesh.num_vertices,
        n_mesh_triangles=mesh.num_triangles,
        wall_time_tracking_s=stage_one.tracking_s / n_frames,
        wall_time_mapping_s=stage_one.mapping_s / n_frames,
        wall_time_extraction_s=extraction_s,
    )
    metrics_path = out / "metrics.json"
    metrics_path.write_text(report.model_dump_json(indent=2), encoding="utf-8")
    csv_path = _write_frames_csv(out / "frames.csv", rows)

    logger.info(
        f"Run complete: ATE {report.ate_rmse_m:.4f} m, {report.image_summary()}, "
        f"{report.n_gaussians} Gaussians, mesh {report.n_mesh_triangles} triangles"
    )
    return RunArtifacts(
        trajectory=str(traj_path),
        checkpoint=str(ckpt_path),
        mesh=str(mesh_path),
        metrics=str(metrics_path),
        frames_csv=str(csv_path),
        renders=renders,
        report=report,
    )


def extract_mesh_from_checkpoint(
    checkpoint_path: Union[str, Path],
    out_path: Union[str, Path],
    tau: Optional[float] = None,
    iterations: Optional[int] = None,
    binary: Optional[bool] = None,
) -> TriangleMesh:
    """Extract the level-set mesh of a saved map with its keyframe views."""
    checkpoint = load_checkpoint(checkpoint_path)
    overrides = {k: v for k, v in {"tau": tau, "iterations": iterations, "binary_ply": binary}.items() if v is not None}
    extraction = ExtractionConfig(**{**checkpoint.config.extraction.model_dump(), **overrides})
    if not checkpoint.views:
        raise MissingFileError(f"checkpoint {checkpoint_path} has no keyframe views to evaluate opacity from")
    mesh = extract_mesh(checkpoint.gmap, checkpoint.view_tuples(), extraction)
    write_ply(out_path, mesh, binary=extraction.binary_ply)
    return mesh


def render_from_checkpoint(
    checkpoint_path: Union[str, Path], pose: Union[int, str, Path], out_path: Union[str, Path]
) -> Path:
    """Render a saved map from a keyframe (by index) or the first pose of a TUM file."""
    checkpoint = load_checkpoint(checkpoint_path)
    if isinstance(pose, int) or (isinstance(pose, str) and pose.lstrip("-").isdigit()):
        index = int(pose)
        if not -len(checkpoint.views) <= index < len(checkpoint.views):
            raise IndexError(f"checkpoint has {len(checkpoint.views)} keyframe views, no index {index}")
        view_pose, camera = checkpoint.view_tuples()[index]
    else:
        poses = read_tum(pose).poses()
        if not poses:
            raise MissingFileError(f"no poses in {pose}")
        view_pose = poses[0]
        camera = (
            checkpoint.views[0].camera if checkpoint.views
            else PinholeCamera.from_fov(checkpoint.config.width, checkpoint.config.height)
        )
    with torch.no_grad():
        frame = render(camera, view_pose, checkpoint.gmap).to_numpy()
    return save_color_png(Path(out_path), np.clip(frame["color"], 0.0, 1.0))


def evaluate_trajectories(
    estimated_path: Union[str, Path], ground_truth_path: Union[str, Path], similarity: bool = False,
    tolerance: float = 0.02,
) -> float:
    """ATE RMSE between two TUM trajectory files associated by timestamp."""
    est, gt = associate_trajectories(read_tum(estimated_path), read_tum(ground_truth_path), tolerance)
    return ate_rmse(est, gt, "similarity" if similarity else "rigid")
