"""Core pose types and the similarity math shared by every other module."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

NUM_JOINTS = 15

# Canonical joint order; type ids are 1-based positions in this tuple.
JOINT_NAMES: tuple[str, ...] = (
    "nose",
    "head_bottom",
    "head_top",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
)

# Report columns: name -> 0-based joint indices averaged into that column.
JOINT_GROUPS: dict[str, tuple[int, ...]] = {
    "Head": (0, 1, 2),
    "Shou": (3, 4),
    "Elb": (5, 6),
    "Wri": (7, 8),
    "Hip": (9, 10),
    "Knee": (11, 12),
    "Ankl": (13, 14),
}

# Per-joint OKS constants. These are the COCO per-keypoint constants as used by
# COCOeval (2 * sigma); head joints take the mean of COCO nose and eye.
_COCO_HEAD = (0.026 + 0.025) / 2
DEFAULT_SIGMAS: np.ndarray = 2.0 * np.array(
    [
        _COCO_HEAD, _COCO_HEAD, _COCO_HEAD,
        0.079, 0.079,
        0.072, 0.072,
        0.062, 0.062,
        0.107, 0.107,
        0.087, 0.087,
        0.089, 0.089,
    ]
)
DEFAULT_SIGMAS.setflags(write=False)

Box = tuple[float, float, float, float]


@dataclass(frozen=True)
class Keypoint:
    type_id: int
    x: float
    y: float
    confidence: float = 1.0
    visible: bool = True

    def __post_init__(self):
        if not 1 <= self.type_id <= NUM_JOINTS:
            raise ValueError(f"keypoint type_id {self.type_id} outside [1, {NUM_JOINTS}]")
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"keypoint {self.type_id} has non-finite coordinates ({self.x}, {self.y})")


@dataclass(frozen=True)
class Pose:
    """One person in one frame: 15 keypoints in canonical joint order.

    ``track_id`` is None until the tracker assigns one. ``bbox`` is
    ``(x_min, y_min, width, height)``; when absent, :attr:`box` falls back to
    the tight box around the visible keypoints. ``score`` is the detector's
    box confidence.
    """

    keypoints: tuple[Keypoint, ...]
    bbox: Optional[Box] = None
    track_id: Optional[int] = None
    frame_index: int = 0
    score: float = 1.0

    def __post_init__(self):
        if len(self.keypoints) != NUM_JOINTS:
            raise ValueError(f"pose needs {NUM_JOINTS} keypoints, got {len(self.keypoints)}")
        for j, kp in enumerate(self.keypoints, start=1):
            if kp.type_id != j:
                raise ValueError(f"keypoint at slot {j} has type_id {kp.type_id}")
        if self.bbox is not None and (self.bbox[2] <= 0 or self.bbox[3] <= 0):
            raise ValueError(f"bbox {self.bbox} must have positive width and height")
        if self.track_id is not None and self.track_id < 0:
            raise ValueError(f"track_id must be non-negative, got {self.track_id}")
        if self.frame_index < 0:
            raise ValueError(f"frame_index must be >= 0, got {self.frame_index}")

    @classmethod
    def from_arrays(
        cls,
        xy: np.ndarray,
        confidence: Optional[np.ndarray] = None,
        visible: Optional[np.ndarray] = None,
        **kwargs,
    ) -> "Pose":
        xy = np.asarray(xy, dtype=float)
        conf = np.ones(NUM_JOINTS) if confidence is None else np.asarray(confidence, dtype=float)
        vis = np.ones(NUM_JOINTS, dtype=bool) if visible is None else np.asarray(visible, dtype=bool)
        kps = tuple(
            Keypoint(j + 1, float(xy[j, 0]), float(xy[j, 1]), float(conf[j]), bool(vis[j]))
            for j in range(NUM_JOINTS)
        )
        return cls(kps, **kwargs)

    @cached_property
    def xy(self) -> np.ndarray:
        return np.array([(k.x, k.y) for k in self.keypoints], dtype=float)

    @cached_property
    def confidence(self) -> np.ndarray:
        return np.array([k.confidence for k in self.keypoints], dtype=float)

    @cached_property
    def visible(self) -> np.ndarray:
        return np.array([k.visible for k in self.keypoints], dtype=bool)

    @property
    def num_visible(self) -> int:
        return int(self.visible.sum())

    @cached_property
    def box(self) -> Optional[Box]:
        if self.bbox is not None:
            return self.bbox
        return keypoint_box(self.xy, self.visible)

    @property
    def center(self) -> np.ndarray:
        b = self.box
        if b is None:
            return np.array([np.nan, np.nan])
        return np.array([b[0] + b[2] / 2.0, b[1] + b[3] / 2.0])

    def mean_confidence(self) -> float:
        """Mean confidence over visible keypoints (0 when none are visible)."""
        vis = self.visible
        return float(self.confidence[vis].mean()) if vis.any() else 0.0

    def with_track(self, track_id: Optional[int]) -> "Pose":
        return replace(self, track_id=track_id)

    def with_visibility(self, visible: np.ndarray) -> "Pose":
        kps = tuple(replace(k, visible=bool(v)) for k, v in zip(self.keypoints, visible))
        return replace(self, keypoints=kps)


@dataclass(frozen=True)
class Frame:
    index: int
    width: int
    height: int
    poses: tuple[Pose, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"frame {self.index}: dimensions must be positive")
        for pose in self.poses:
            if pose.frame_index != self.index:
                raise ValueError(
                    f"frame {self.index} holds a pose with frame_index {pose.frame_index}"
                )
            xy, vis = pose.xy, pose.visible
            inside = (
                (xy[:, 0] >= 0) & (xy[:, 0] <= self.width) & (xy[:, 1] >= 0) & (xy[:, 1] <= self.height)
            )
            if np.any(vis & ~inside):
                raise ValueError(f"frame {self.index}: visible keypoint outside the frame")


def keypoint_box(xy: np.ndarray, visible: np.ndarray) -> Optional[Box]:
    """Tight box around visible keypoints; None when fewer than one is visible.

    Degenerate extents are widened to one pixel so the box stays valid.
    """
    if not np.any(visible):
        return None
    pts = xy[visible]
    x0, y0 = pts.min(axis=0)
    x1, y1 = pts.max(axis=0)
    return (float(x0), float(y0), float(max(x1 - x0, 1.0)), float(max(y1 - y0, 1.0)))


def load_sigmas(path: str | Path) -> np.ndarray:
    """Read a sigma table: 15 whitespace-separated positive reals in joint order."""
    values = Path(path).read_text().split()
    if len(values) != NUM_JOINTS:
        raise ValueError(f"{path}: expected {NUM_JOINTS} sigmas, found {len(values)}")
    sig = np.array([float(v) for v in values])
    if np.any(sig <= 0) or not np.all(np.isfinite(sig)):
        raise ValueError(f"{path}: sigmas must be finite and positive")
    return sig


def _scale_sq(reference: Pose) -> float:
    b = reference.box
    if b is None:
        return 0.0
    return float(b[2] * b[3])


def oks_with_flag(
    candidate: Pose, reference: Pose, sigmas: Optional[Sequence[float]] = None
) -> tuple[float, bool]:
    """OKS plus a flag that is False when the poses share no visible joint.

    Similarity is the mean over mutually visible joints of
    ``exp(-d^2 / (2 s^2 k^2))`` with ``s^2`` the reference box area.
    """
    k = DEFAULT_SIGMAS if sigmas is None else np.asarray(sigmas, dtype=float)
    both = candidate.visible & reference.visible
    if not both.any():
        return 0.0, False
    s2 = _scale_sq(reference)
    d2 = np.sum((candidate.xy[both] - reference.xy[both]) ** 2, axis=1)
    if s2 <= 0:
        return float(np.mean(d2 == 0)), True
    e = d2 / (2.0 * s2 * k[both] ** 2)
    return float(np.mean(np.exp(-e))), True


def oks(candidate: Pose, reference: Pose, sigmas: Optional[Sequence[float]] = None) -> float:
    value, ok = oks_with_flag(candidate, reference, sigmas)
    if not ok:
        logger.debug("oks: no mutually visible keypoints, returning 0.0")
    return value


def mutual_oks(a: Pose, b: Pose, sigmas: Optional[Sequence[float]] = None) -> float:
    """Larger of the two OKS values obtained with either pose as reference."""
    return max(oks(a, b, sigmas), oks(b, a, sigmas))


def dilate_box(box: Box, factor: float) -> Box:
    if factor < 1:
        raise ValueError(f"dilation factor must be >= 1, got {factor}")
    x, y, w, h = box
    if w <= 0 or h <= 0:
        raise ValueError(f"box {box} must have positive width and height")
    cx, cy = x + w / 2.0, y + h / 2.0
    nw, nh = w * factor, h * factor
    return (cx - nw / 2.0, cy - nh / 2.0, nw, nh)


def clamp_box(box: Box, width: float, height: float) -> Optional[Box]:
    """Intersect ``box`` with the frame; None if nothing is left."""
    x0 = min(max(box[0], 0.0), width)
    y0 = min(max(box[1], 0.0), height)
    x1 = min(max(box[0] + box[2], 0.0), width)
    y1 = min(max(box[1] + box[3], 0.0), height)
    if x1 <= x0 or y1 <= y0:
        return None
    return (x0, y0, x1 - x0, y1 - y0)


def box_iou(a: Box, b: Box) -> float:
    ix = max(0.0, min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def nearest_poses(query: Pose, pool: Iterable[Pose], n: int) -> list[Pose]:
    """The ``n`` pool members closest to ``query`` by box-centre distance.

    Stable sort, so equidistant poses keep their pool order.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    pool = list(pool)
    if not pool:
        return []
    q = query.center
    dist = [float(np.hypot(*(cand.center - q))) for cand in pool]
    order = sorted(range(len(pool)), key=lambda i: dist[i])
    return [pool[i] for i in order[:n]]
