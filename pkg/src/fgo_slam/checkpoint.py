"""Binary checkpoints of the Gaussian map, the run configuration and keyframe views."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, List, Tuple, Union

import numpy as np
import torch
import yaml
from loguru import logger
from pydantic import ValidationError

from fgo_slam.errors import CheckpointFormatError, MissingFileError
from fgo_slam.geometry import PinholeCamera, RigidPose
from fgo_slam.models import RunConfig
from fgo_slam.renderer import GaussianMap

MAGIC = b"FGOMAP\0"
FORMAT_VERSION = 1
PARAMS_PER_GAUSSIAN = 14  # mean 3, quaternion 4, log-scale 3, opacity logit 1, color 3


@dataclass
class KeyframeView:
    id: int
    pose: RigidPose
    camera: PinholeCamera


@dataclass
class Checkpoint:
    gmap: GaussianMap
    config: RunConfig
    iteration: int = 0
    views: List[KeyframeView] = field(default_factory=list)

    def view_tuples(self) -> List[Tuple[RigidPose, PinholeCamera]]:
        return [(v.pose, v.camera) for v in self.views]


def _pack_params(gmap: GaussianMap) -> bytes:
    with torch.no_grad():
        block = torch.cat(
            [gmap.means, gmap.quats, gmap.log_scales, gmap.opacity_logits[:, None], gmap.colors], dim=1
        )
    return block.numpy().astype("<f8").tobytes()


def save_checkpoint(path: Union[str, Path], checkpoint: Checkpoint) -> Path:
    """Write ``FGOMAP\\0`` + u32 version + YAML config + iteration + parameters + keyframe views."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    config_dict = checkpoint.config.model_dump(mode="json", exclude={"sentry_dsn"})
    config_bytes = yaml.safe_dump(config_dict, sort_keys=True).encode("utf-8")
    gmap = checkpoint.gmap
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(config_bytes)))
        fh.write(config_bytes)
        fh.write(struct.pack("<Q", checkpoint.iteration))
        fh.write(struct.pack("<I", len(gmap)))
        fh.write(_pack_params(gmap))
        fh.write(np.asarray(gmap.anchors, dtype="<i8").tobytes())
        fh.write(struct.pack("<I", len(checkpoint.views)))
        for view in checkpoint.views:
            cam = view.camera
            fh.write(struct.pack("<q", view.id))
            fh.write(np.concatenate([view.pose.rotation.ravel(), view.pose.translation]).astype("<f8").tobytes())
            fh.write(struct.pack("<4d2I", cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height))
    logger.info(f"Checkpoint written to {path} ({len(gmap)} Gaussians, {len(checkpoint.views)} views)")
    return path


def _read(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointFormatError(f"truncated checkpoint: wanted {n} bytes, got {len(data)}")
    return data


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"checkpoint not found: {path}")
    with path.open("rb") as fh:
        if _read(fh, len(MAGIC)) != MAGIC:
            raise CheckpointFormatError(f"{path} is not a map checkpoint")
        (version,) = struct.unpack("<I", _read(fh, 4))
        if version != FORMAT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        (n_config,) = struct.unpack("<I", _read(fh, 4))
        try:
            config = RunConfig(**(yaml.safe_load(_read(fh, n_config).decode("utf-8")) or {}))
        except (yaml.YAMLError, ValidationError) as exc:
            raise CheckpointFormatError(f"invalid embedded config: {exc}") from exc
        (iteration,) = struct.unpack("<Q", _read(fh, 8))
        (n,) = struct.unpack("<I", _read(fh, 4))
        block = np.frombuffer(_read(fh, 8 * PARAMS_PER_GAUSSIAN * n), dtype="<f8").reshape(n, PARAMS_PER_GAUSSIAN)
        anchors = np.frombuffer(_read(fh, 8 * n), dtype="<i8").astype(np.int64)
        (n_views,) = struct.unpack("<I", _read(fh, 4))
        views = []
        for _ in range(n_views):
            (kf_id,) = struct.unpack("<q", _read(fh, 8))
            pose = np.frombuffer(_read(fh, 8 * 12), dtype="<f8")
            fx, fy, cx, cy, w, h = struct.unpack("<4d2I", _read(fh, struct.calcsize("<4d2I")))
            views.append(
                KeyframeView(
                    kf_id,
                    RigidPose(pose[:9].reshape(3, 3), pose[9:]),
                    PinholeCamera(fx=fx, fy=fy, cx=cx, cy=cy, width=w, height=h),
                )
            )
        if fh.read(1):
            raise CheckpointFormatError("trailing bytes after checkpoint payload")

    t = torch.as_tensor(block.astype(np.float64))
    gmap = GaussianMap(t[:, 0:3], t[:, 3:7], t[:, 7:10], t[:, 10], t[:, 11:14], anchors)
    logger.debug(f"Loaded checkpoint {path}: {n} Gaussians, {n_views} views, iteration {iteration}")
    return Checkpoint(gmap, config, iteration, views)
