"""Temporal OKS refinement of per-frame detections.

Boxes of the previous frame's poses are enlarged and handed to a pose
estimator on the current frame. The re-estimated poses join the detector's
poses, and overlapping candidates are reduced to the most confident one.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Optional, Protocol, Sequence

import numpy as np

from .dataio import jitter_keypoints
from .domain import Box, Frame, Pose, clamp_box, dilate_box, mutual_oks

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ToksConfig:
    alpha: float = 1.25
    oks_threshold: float = 0.35
    keypoint_conf_min: float = 0.1
    box_conf_min: float = 0.2
    # also propagate from the next frame (offline use only)
    use_next_frame: bool = False

    def __post_init__(self):
        if self.alpha < 1.0:
            raise ValueError(f"alpha must be >= 1, got {self.alpha}")
        for name in ("oks_threshold", "keypoint_conf_min", "box_conf_min"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    def to_dict(self) -> dict:
        from dataclasses import asdict

        return asdict(self)


class EstimationError(RuntimeError):
    pass


class PoseEstimator(Protocol):
    def estimate(self, frame_ref: Any, box: Box) -> Pose:
        """A 15-keypoint pose inside ``box`` of the referenced frame."""


@dataclass
class OracleJitterEstimator:
    """Stand-in estimator that returns a noisy copy of the ground truth.

    The ground-truth person with most visible keypoints inside the box is
    chosen (at least half of theirs must fall inside). Keypoints are
    jittered, randomly dropped, and hidden when they land outside the box.
    ``frame_ref`` is the frame index. Noise is seeded by (seed, frame, box)
    so results do not depend on call order.
    """

    ground_truth: Mapping[int, Frame]
    sigma: float = 0.0
    dropout_p: float = 0.0
    seed: int = 0
    calls: int = field(default=0, compare=False)

    def estimate(self, frame_ref: int, box: Box) -> Pose:
        self.calls += 1
        frame = self.ground_truth.get(frame_ref)
        if frame is None:
            raise EstimationError(f"no frame {frame_ref}")
        x, y, w, h = box
        best, best_count = None, 0
        for pose in frame.poses:
            xy, vis = pose.xy, pose.visible
            inside = vis & (xy[:, 0] >= x) & (xy[:, 0] <= x + w) & (xy[:, 1] >= y) & (xy[:, 1] <= y + h)
            n = int(inside.sum())
            if n > best_count and 2 * n >= int(vis.sum()):
                best, best_count = pose, n
        if best is None:
            raise EstimationError(f"no person in box {tuple(round(v, 1) for v in box)} of frame {frame_ref}")
        key = [self.seed, int(frame_ref)] + [int(round(v * 8)) & 0xFFFFFFFF for v in box]
        rng = np.random.default_rng(key)
        xy, conf, vis = jitter_keypoints(best.xy, best.visible, self.sigma, self.dropout_p, rng)
        vis &= (xy[:, 0] >= x) & (xy[:, 0] <= x + w) & (xy[:, 1] >= y) & (xy[:, 1] <= y + h)
        if not vis.any():
            raise EstimationError(f"estimate in frame {frame_ref} has no visible keypoints")
        return Pose.from_arrays(xy, conf, vis, frame_index=frame.index)


def threshold_pose(pose: Pose, config: ToksConfig) -> Optional[Pose]:
    """Hide low-confidence keypoints; None if the box score or every keypoint fails."""
    if pose.score < config.box_conf_min:
        return None
    vis = pose.visible & (pose.confidence >= config.keypoint_conf_min)
    if not vis.any():
        return None
    return pose if np.array_equal(vis, pose.visible) else pose.with_visibility(vis)


def suppress_duplicates(candidates: Sequence[Pose], oks_threshold: float) -> list[Pose]:
    """Greedy suppression, most confident first; ties keep candidate order.

    A candidate survives when its mutual OKS with every survivor so far is
    below the threshold.
    """
    order = sorted(range(len(candidates)), key=lambda i: -candidates[i].mean_confidence())
    kept: list[int] = []
    for i in order:
        if all(mutual_oks(candidates[i], candidates[k]) < oks_threshold for k in kept):
            kept.append(i)
    return [candidates[i] for i in sorted(kept)]


@dataclass
class ToksStats:
    propagated: int = 0
    failed: int = 0
    suppressed: int = 0


def _propagate(source: Sequence[Pose], estimator, frame_ref, width, height, config, stats) -> list[Pose]:
    out = []
    for src in source:
        box = src.box
        if box is None:
            continue
        region = clamp_box(dilate_box(box, config.alpha), width, height)
        if region is None:
            continue
        try:
            est = estimator.estimate(frame_ref, region)
        except Exception as exc:  # estimator failures only cost this candidate
            stats.failed += 1
            logger.debug("toks: estimate failed for box %s: %s", region, exc)
            continue
        stats.propagated += 1
        out.append(replace(est, score=src.score, track_id=None, bbox=None))
    return out


def toks_refine(
    prev_poses: Sequence[Pose],
    detections: Sequence[Pose],
    estimator: Optional[PoseEstimator],
    config: ToksConfig = ToksConfig(),
    frame_ref: Any = None,
    width: float = 1.0,
    height: float = 1.0,
    next_poses: Sequence[Pose] = (),
    stats: Optional[ToksStats] = None,
) -> list[Pose]:
    """Refined pose list for the current frame.

    Candidates are the thresholded detections followed by poses re-estimated
    inside each previous pose's dilated box (which inherit that pose's
    score). Returned poses carry no track ids.
    """
    stats = stats if stats is not None else ToksStats()
    candidates = [cand for cand in (threshold_pose(det.with_track(None), config) for det in detections) if cand is not None]
    sources = list(prev_poses)
    if config.use_next_frame:
        sources += list(next_poses)
    if estimator is not None and sources:
        for est in _propagate(sources, estimator, frame_ref, width, height, config, stats):
            q = threshold_pose(est, config)
            if q is not None:
                candidates.append(q)
    kept = suppress_duplicates(candidates, config.oks_threshold)
    stats.suppressed += len(candidates) - len(kept)
    return kept
