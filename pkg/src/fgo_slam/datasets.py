"""TUM RGB-D and Replica-style dataset ingestion."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
import pandas as pd
from loguru import logger
from PIL import Image

from fgo_slam.errors import MissingFileError, NoAssociationsError
from fgo_slam.formats import read_tum
from fgo_slam.geometry import PinholeCamera, RigidPose

TUM_DEPTH_SCALE = 5000.0
REPLICA_DEPTH_SCALE = 6553.5
REPLICA_FRAME_RATE = 30.0

# Published intrinsics of the TUM RGB-D sensors, keyed by sequence family.
TUM_INTRINSICS = {
    "freiburg1": (517.3, 516.5, 318.6, 255.3),
    "freiburg2": (520.9, 521.0, 325.1, 249.7),
    "freiburg3": (535.4, 539.2, 320.1, 247.6),
}
TUM_DEFAULT_INTRINSICS = (525.0, 525.0, 319.5, 239.5)
REPLICA_INTRINSICS = (600.0, 600.0, 599.5, 339.5)


@dataclass(frozen=True)
class DatasetFrame:
    timestamp: float
    color_path: Path
    depth_path: Optional[Path] = None


@dataclass
class Dataset:
    """Ordered frames with a camera, optional ground truth and the raw depth scale."""

    frames: List[DatasetFrame]
    camera: PinholeCamera
    ground_truth: Optional[List[RigidPose]] = None
    depth_scale: float = TUM_DEPTH_SCALE
    name: str = ""
    target_camera: Optional[PinholeCamera] = field(default=None)

    def __post_init__(self) -> None:
        stamps = np.array([f.timestamp for f in self.frames])
        if len(stamps) > 1 and np.any(np.diff(stamps) <= 0):
            raise ValueError("dataset timestamps must be strictly increasing")
        if self.ground_truth is not None and len(self.ground_truth) != len(self.frames):
            raise ValueError(f"{len(self.ground_truth)} ground-truth poses for {len(self.frames)} frames")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def timestamps(self) -> List[float]:
        return [f.timestamp for f in self.frames]

    def resized(self, width: int, height: int) -> Dataset:
        """Same frames, loaded at a different resolution."""
        return Dataset(self.frames, self.camera, self.ground_truth, self.depth_scale, self.name,
                       self.camera.scaled(width, height))

    @property
    def output_camera(self) -> PinholeCamera:
        return self.target_camera or self.camera

    def load_color(self, index: int) -> np.ndarray:
        """(H, W, 3) float image in [0, 1]."""
        cam = self.output_camera
        with Image.open(self.frames[index].color_path) as img:
            rgb = img.convert("RGB")
            if rgb.size != (cam.width, cam.height):
                rgb = rgb.resize((cam.width, cam.height), Image.Resampling.BILINEAR)
            return np.asarray(rgb, dtype=np.float64) / 255.0

    def load_depth(self, index: int) -> np.ndarray:
        """(H, W) depth in meters, 0 where invalid."""
        path = self.frames[index].depth_path
        if path is None:
            raise MissingFileError(f"frame {index} has no depth image")
        cam = self.output_camera
        with Image.open(path) as img:
            if img.size != (cam.width, cam.height):
                img = img.resize((cam.width, cam.height), Image.Resampling.NEAREST)
            raw = np.asarray(img, dtype=np.float64)
        return raw / self.depth_scale


def _read_list(path: Path, columns: List[str]) -> pd.DataFrame:
    if not path.is_file():
        raise MissingFileError(f"missing list file: {path}")
    df = pd.read_csv(path, sep=r"\s+", comment="#", header=None, names=columns, usecols=range(len(columns)),
                     dtype={columns[0]: np.float64, columns[1]: str}, float_precision="round_trip")
    return df.sort_values(columns[0]).drop_duplicates(columns[0]).reset_index(drop=True)


def _associate(left: pd.DataFrame, right: pd.DataFrame, tolerance: float) -> pd.DataFrame:
    """Nearest-timestamp match of ``right`` rows onto ``left`` within ``tolerance``; unmatched rows dropped."""
    right = right.rename(columns={"timestamp": "timestamp_right"})
    right["timestamp"] = right["timestamp_right"]
    merged = pd.merge_asof(left, right, on="timestamp", direction="nearest", tolerance=tolerance)
    return merged.dropna().reset_index(drop=True)


def _tum_camera(root: Path) -> PinholeCamera:
    intrinsics = root / "intrinsics.txt"
    if intrinsics.is_file():
        fx, fy, cx, cy = (float(v) for v in intrinsics.read_text().split()[:4])
    else:
        match = re.search(r"freiburg[123]", root.resolve().name)
        fx, fy, cx, cy = TUM_INTRINSICS.get(match.group(0), TUM_DEFAULT_INTRINSICS) if match else TUM_DEFAULT_INTRINSICS
    return PinholeCamera(fx=fx, fy=fy, cx=cx, cy=cy, width=640, height=480)


def load_tum_dataset(
    root: Union[str, Path], tolerance: float = 0.02, with_depth: bool = True, depth_scale: float = TUM_DEPTH_SCALE
) -> Dataset:
    """Load a TUM RGB-D sequence directory.

    Color frames are associated with depth (when ``with_depth``) and ground
    truth (when ``groundtruth.txt`` exists) by nearest timestamp.
    """
    root = Path(root)
    if not root.is_dir():
        raise MissingFileError(f"dataset directory not found: {root}")
    frames = _read_list(root / "rgb.txt", ["timestamp", "color"])
    if with_depth:
        depth = _read_list(root / "depth.txt", ["timestamp", "depth"])
        frames = _associate(frames, depth, tolerance).drop(columns=["timestamp_right"])

    ground_truth = None
    gt_path = root / "groundtruth.txt"
    if gt_path.is_file():
        gt = read_tum(gt_path)
        gt_df = pd.DataFrame({"timestamp": gt.timestamps, "gt_index": np.arange(len(gt))}).sort_values("timestamp")
        frames = _associate(frames, gt_df, tolerance)
        poses = gt.poses()
        ground_truth = [poses[int(i)] for i in frames["gt_index"]]

    if frames.empty:
        raise NoAssociationsError(f"no frames in {root} could be associated within {tolerance} s")

    out: List[DatasetFrame] = []
    for row in frames.itertuples(index=False):
        color = root / str(row.color)
        depth_path = root / str(row.depth) if with_depth else None
        for p in (color, depth_path):
            if p is not None and not p.is_file():
                raise MissingFileError(f"referenced image not found: {p}")
        out.append(DatasetFrame(float(row.timestamp), color, depth_path))

    logger.info(f"Loaded TUM sequence {root.name}: {len(out)} frames (depth={'yes' if with_depth else 'no'})")
    return Dataset(out, _tum_camera(root), ground_truth, depth_scale, root.name)


def load_replica_dataset(
    root: Union[str, Path], with_depth: bool = True, depth_scale: float = REPLICA_DEPTH_SCALE
) -> Dataset:
    """Load ``results/frameNNNNNN.jpg`` + ``results/depthNNNNNN.png`` + ``traj.txt``.

    Each ``traj.txt`` line is a flattened row-major 4x4 camera-to-world matrix.
    """
    root = Path(root)
    results = root / "results"
    if not results.is_dir():
        raise MissingFileError(f"missing results directory: {results}")
    colors = sorted(results.glob("frame*.jpg"))
    if not colors:
        raise NoAssociationsError(f"no color frames in {results}")

    ground_truth = None
    traj = root / "traj.txt"
    if traj.is_file():
        matrices = np.loadtxt(traj, dtype=np.float64).reshape(-1, 4, 4)
        ground_truth = [RigidPose.from_matrix(m).inverse() for m in matrices[: len(colors)]]

    frames = []
    for i, color in enumerate(colors):
        depth_path = None
        if with_depth:
            depth_path = results / color.name.replace("frame", "depth").replace(".jpg", ".png")
            if not depth_path.is_file():
                raise MissingFileError(f"referenced image not found: {depth_path}")
        frames.append(DatasetFrame(i / REPLICA_FRAME_RATE, color, depth_path))
    if ground_truth is not None and len(ground_truth) < len(frames):
        frames = frames[: len(ground_truth)]

    fx, fy, cx, cy = REPLICA_INTRINSICS
    camera = PinholeCamera(fx=fx, fy=fy, cx=cx, cy=cy, width=1200, height=680)
    logger.info(f"Loaded Replica sequence {root.name}: {len(frames)} frames")
    return Dataset(frames, camera, ground_truth, depth_scale, root.name)


def load_dataset(root: Union[str, Path], tolerance: float = 0.02, with_depth: bool = True,
                 depth_scale: Optional[float] = None) -> Dataset:
    """Pick the loader from the directory layout."""
    root = Path(root)
    if (root / "rgb.txt").is_file():
        return load_tum_dataset(root, tolerance, with_depth, depth_scale or TUM_DEPTH_SCALE)
    if (root / "results").is_dir():
        return load_replica_dataset(root, with_depth, depth_scale or REPLICA_DEPTH_SCALE)
    raise MissingFileError(f"{root} is neither a TUM nor a Replica-style sequence")
