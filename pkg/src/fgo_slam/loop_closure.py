"""Loop detection by landmark overlap and similarity-based loop correction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, MutableMapping, Optional, Tuple

import numpy as np
from loguru import logger

from fgo_slam.bundle_adjustment import BAResult, global_ba
from fgo_slam.errors import DegenerateConfigurationError
from fgo_slam.geometry import SimilarityTransform, umeyama_align
from fgo_slam.models import TrackingConfig
from fgo_slam.tracking import Keyframe, LoopConstraint, MapPoint, Observation


def _landmark_points(keyframe: Keyframe, points: MutableMapping[int, MapPoint]) -> Dict[int, int]:
    """Landmark label -> point id for the points a keyframe observes."""
    out: Dict[int, int] = {}
    for pid in sorted(keyframe.point_ids):
        point = points.get(pid)
        if point is not None and point.landmark is not None:
            out.setdefault(point.landmark, pid)
    return out


def detect_loop(
    keyframes: MutableMapping[int, Keyframe],
    points: MutableMapping[int, MapPoint],
    current_id: int,
    config: Optional[TrackingConfig] = None,
    with_scale: bool = False,
) -> Optional[LoopConstraint]:
    """Find an old keyframe that sees the same landmarks through different map points.

    A candidate must be at least ``loop_min_gap`` keyframe ids older than the
    current one, and more than ``loop_overlap`` of the current keyframe's
    landmarks must be matched to distinct points of the candidate.
    """
    config = config or TrackingConfig()
    current = keyframes[current_id]
    current_marks = _landmark_points(current, points)
    if not current_marks:
        return None

    best: Optional[Tuple[float, int, List[Tuple[int, int]]]] = None
    for cand_id in sorted(keyframes):
        if current_id - cand_id < config.loop_min_gap:
            continue
        cand_marks = _landmark_points(keyframes[cand_id], points)
        matches = [
            (cand_marks[mark], pid)
            for mark, pid in sorted(current_marks.items())
            if mark in cand_marks and cand_marks[mark] != pid
        ]
        overlap = len(matches) / len(current_marks)
        if overlap > config.loop_overlap and len(matches) >= 3 and (best is None or overlap > best[0]):
            best = (overlap, cand_id, matches)
    if best is None:
        return None

    overlap, cand_id, matches = best
    source = np.stack([points[b].position for _, b in matches])
    target = np.stack([points[a].position for a, _ in matches])
    try:
        similarity = umeyama_align(source, target, with_scale=with_scale)
    except DegenerateConfigurationError as exc:
        logger.warning(f"Loop candidate {cand_id} -> {current_id} rejected: {exc}")
        return None
    logger.info(
        f"Loop detected between keyframes {cand_id} and {current_id}: "
        f"{len(matches)} matches, overlap {overlap:.2f}, scale {similarity.scale:.4f}"
    )
    return LoopConstraint(cand_id, current_id, similarity, tuple(matches))


@dataclass
class LoopCorrection:
    corrections: Dict[int, SimilarityTransform] = field(default_factory=dict)
    fused: Dict[int, int] = field(default_factory=dict)
    ba: Optional[BAResult] = None


def _blend_weight(keyframe_id: int, a: int, b: int) -> float:
    return float(np.clip((keyframe_id - a) / (b - a), 0.0, 1.0))


def fuse_points(
    keyframes: MutableMapping[int, Keyframe],
    points: MutableMapping[int, MapPoint],
    keep: int,
    drop: int,
) -> None:
    """Merge point ``drop`` into ``keep`` and remove it from the map."""
    if keep == drop or drop not in points or keep not in points:
        return
    kept = points[keep]
    seen = set(kept.keyframe_ids())
    for obs in points[drop].observations:
        kf = keyframes.get(obs.keyframe_id)
        if kf is not None:
            kf.point_ids.discard(drop)
        if obs.keyframe_id in seen:
            continue
        kept.observations.append(Observation(obs.keyframe_id, obs.pixel, obs.sigma2, obs.depth))
        seen.add(obs.keyframe_id)
        if kf is not None:
            kf.point_ids.add(keep)
    kept.observations.sort(key=lambda o: o.keyframe_id)
    del points[drop]


def correct_loop(
    keyframes: MutableMapping[int, Keyframe],
    points: MutableMapping[int, MapPoint],
    constraint: LoopConstraint,
    config: Optional[TrackingConfig] = None,
    run_ba: bool = True,
    fix_scale: bool = False,
) -> LoopCorrection:
    """Spread the loop similarity over the keyframes after ``a``, fuse matched points and run global BA.

    Keyframe ``k > a`` is moved by the similarity raised to ``(k - a) / (b - a)``
    (capped at 1). Map points follow the keyframe that last observed them.
    Keyframes up to ``a`` are not touched before BA.
    """
    config = config or TrackingConfig()
    a, b = constraint.a, constraint.b
    result = LoopCorrection()
    for k in sorted(keyframes):
        if k <= a:
            continue
        s_k = constraint.similarity.power(_blend_weight(k, a, b))
        result.corrections[k] = s_k
        keyframes[k].pose = s_k.transform_pose(keyframes[k].pose)

    for point in points.values():
        if not point.observations:
            continue
        ref = point.last_keyframe()
        if ref in result.corrections:
            point.position = result.corrections[ref].apply(point.position)

    for keep, drop in constraint.matches:
        fuse_points(keyframes, points, keep, drop)
        result.fused[drop] = keep

    logger.info(f"Loop correction moved {len(result.corrections)} keyframes, fused {len(result.fused)} points")
    if run_ba and len(keyframes) >= 2:
        result.ba = global_ba(keyframes, points, config, fix_scale=fix_scale)
    return result
