from __future__ import annotations

import numpy as np

from kptrack.dataio import SequenceFile, skeleton
from kptrack.domain import NUM_JOINTS, Frame, Pose
from kptrack.tokenizer import TokenizedPair


def standing_pose(x: float = 200.0, y: float = 200.0, height: float = 150.0, **kwargs) -> Pose:
    """A stick figure with hips at ``(x, y)``."""
    xy = skeleton(np.array([x, y]), height, 1.0, 0.0)
    return Pose.from_arrays(xy, **kwargs)


def pose_at(xy, **kwargs) -> Pose:
    return Pose.from_arrays(np.asarray(xy, dtype=float), **kwargs)


def flat_pose(x: float, y: float, **kwargs) -> Pose:
    """Every keypoint at the same spot (handy for metric fixtures)."""
    return Pose.from_arrays(np.tile([x, y], (NUM_JOINTS, 1)), **kwargs)


def head_pose(x: float, y: float, head: float = 20.0, **kwargs) -> Pose:
    """All joints at ``(x, y)`` except head_top, placed ``head`` pixels above,
    which fixes the evaluation gate at ``head / 2``."""
    xy = np.tile([x, y], (NUM_JOINTS, 1)).astype(float)
    xy[2, 1] -= head
    return Pose.from_arrays(xy, **kwargs)


def sequence(frames_poses, width=640, height=480, video_id="v") -> SequenceFile:
    frames = []
    for i, poses in enumerate(frames_poses):
        fixed = tuple(Pose(pose.keypoints, pose.bbox, pose.track_id, i, pose.score) for pose in poses)
        frames.append(Frame(i, width, height, fixed))
    return SequenceFile(video_id, width, height, tuple(frames))


def random_pairs(n: int, seed: int = 0, all_visible: bool = False, vocab: int = 432, delta: int = 4):
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        mask = np.ones(30, bool) if all_visible else rng.random(30) < 0.7
        mask[0] = True
        pos = rng.integers(1, vocab + 1, 30)
        pos[~mask] = 1
        seg = np.concatenate([np.ones(15, np.int64), np.full(15, rng.integers(1, delta + 1))])
        pairs.append(TokenizedPair(pos, np.tile(np.arange(1, 16), 2), seg, mask, bool(rng.random() < 0.5)))
    return pairs
