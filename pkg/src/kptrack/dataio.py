"""Sequence files, a PoseTrack import shim and the synthetic video generator."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Union

import numpy as np

from .domain import JOINT_NAMES, NUM_JOINTS, Frame, Keypoint, Pose, keypoint_box

SCHEMA = "kptrack.sequence"
SCHEMA_VERSION = 1

PathLike = Union[str, Path]


class SequenceFormatError(ValueError):
    """Schema violation; the message starts with the offending field path."""


@dataclass(frozen=True)
class SequenceFile:
    video_id: str
    width: int
    height: int
    frames: tuple[Frame, ...]
    joints: tuple[str, ...] = JOINT_NAMES
    version: int = SCHEMA_VERSION

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        if tuple(self.joints) != JOINT_NAMES:
            raise ValueError("joint map must list the 15 canonical joints in order")
        for i, f in enumerate(self.frames):
            if f.width != self.width or f.height != self.height:
                raise ValueError(f"frame {f.index} dimensions differ from the sequence")
            if i and f.index != self.frames[i - 1].index + 1:
                raise ValueError(f"frame indices not contiguous at {f.index}")

    def __len__(self) -> int:
        return len(self.frames)

    def frame(self, index: int) -> Frame:
        start = self.frames[0].index if self.frames else 0
        return self.frames[index - start]

    def with_frames(self, frames: Iterable[Frame]) -> "SequenceFile":
        return replace(self, frames=tuple(frames))

    def track_ids(self) -> list[int]:
        return sorted({pose.track_id for f in self.frames for pose in f.poses if pose.track_id is not None})


# -- serialisation -------------------------------------------------------------

def _pose_to_json(pose: Pose) -> dict:
    return {
        "track_id": pose.track_id,
        "bbox": None if pose.bbox is None else list(pose.bbox),
        "score": pose.score,
        "keypoints": [[k.x, k.y, k.confidence, int(k.visible)] for k in pose.keypoints],
    }


def sequence_to_json(seq: SequenceFile) -> dict:
    return {
        "schema": SCHEMA,
        "version": seq.version,
        "video_id": seq.video_id,
        "width": seq.width,
        "height": seq.height,
        "joints": list(seq.joints),
        "frames": [{"index": f.index, "poses": [_pose_to_json(pose) for pose in f.poses]} for f in seq.frames],
    }


def save_sequence(seq: SequenceFile, path: PathLike):
    text = json.dumps(sequence_to_json(seq), indent=1, sort_keys=True)
    Path(path).write_text(text + "\n")


def _need(obj: Any, key: str, where: str, kind=None):
    if not isinstance(obj, dict) or key not in obj:
        raise SequenceFormatError(f"{where}.{key}: missing")
    value = obj[key]
    if kind is not None and (not isinstance(value, kind) or isinstance(value, bool)):
        raise SequenceFormatError(f"{where}.{key}: expected {getattr(kind, '__name__', kind)}")
    return value


def _number(v: Any, where: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise SequenceFormatError(f"{where}: expected a finite number, got {v!r}")
    return float(v)


def _parse_pose(d: dict, frame_index: int, where: str) -> Pose:
    kps_raw = _need(d, "keypoints", where, list)
    if len(kps_raw) != NUM_JOINTS:
        missing = JOINT_NAMES[len(kps_raw)] if len(kps_raw) < NUM_JOINTS else None
        hint = f" (missing joint '{missing}')" if missing else ""
        raise SequenceFormatError(f"{where}.keypoints: expected {NUM_JOINTS} entries, got {len(kps_raw)}{hint}")
    kps = []
    for j, kp in enumerate(kps_raw):
        kw = f"{where}.keypoints[{j}] ({JOINT_NAMES[j]})"
        if not isinstance(kp, list) or len(kp) != 4:
            raise SequenceFormatError(f"{kw}: expected [x, y, confidence, visible]")
        x, y, c = (_number(v, kw) for v in kp[:3])
        if kp[3] not in (0, 1):
            raise SequenceFormatError(f"{kw}: visible flag must be 0 or 1")
        kps.append(Keypoint(j + 1, x, y, c, bool(kp[3])))
    track = d.get("track_id")
    if track is not None and (isinstance(track, bool) or not isinstance(track, int) or track < 0):
        raise SequenceFormatError(f"{where}.track_id: expected a non-negative integer or null")
    bbox = d.get("bbox")
    if bbox is not None:
        if not isinstance(bbox, list) or len(bbox) != 4:
            raise SequenceFormatError(f"{where}.bbox: expected [x, y, w, h] or null")
        bbox = tuple(_number(v, f"{where}.bbox") for v in bbox)
        if bbox[2] <= 0 or bbox[3] <= 0:
            raise SequenceFormatError(f"{where}.bbox: width and height must be positive")
    score = _number(d.get("score", 1.0), f"{where}.score")
    return Pose(tuple(kps), bbox, track, frame_index, score)


def sequence_from_json(doc: Any, source: str = "<sequence>") -> SequenceFile:
    if not isinstance(doc, dict) or doc.get("schema") != SCHEMA:
        raise SequenceFormatError(f"{source}: schema: expected '{SCHEMA}'")
    version = _need(doc, "version", source, int)
    if version != SCHEMA_VERSION:
        raise SequenceFormatError(f"{source}.version: unsupported version {version}")
    video_id = _need(doc, "video_id", source, str)
    width = _need(doc, "width", source, int)
    height = _need(doc, "height", source, int)
    if width <= 0 or height <= 0:
        raise SequenceFormatError(f"{source}: width and height must be positive")
    joints = _need(doc, "joints", source, list)
    missing = [n for n in JOINT_NAMES if n not in joints]
    if missing:
        raise SequenceFormatError(f"{source}.joints: missing joint '{missing[0]}'")
    if len(joints) != NUM_JOINTS:
        raise SequenceFormatError(f"{source}.joints: expected {NUM_JOINTS} names, got {len(joints)}")
    # Files may declare their own joint order; keypoints are permuted into ours.
    order = [joints.index(n) for n in JOINT_NAMES]
    frames = []
    for i, fd in enumerate(_need(doc, "frames", source, list)):
        where = f"{source}.frames[{i}]"
        index = _need(fd, "index", where, int)
        if frames and index != frames[-1].index + 1:
            raise SequenceFormatError(f"{where}.index: {index} breaks contiguity")
        poses = []
        for k, pd in enumerate(_need(fd, "poses", where, list)):
            pw = f"{where}.poses[{k}]"
            if isinstance(pd, dict) and isinstance(pd.get("keypoints"), list) and len(pd["keypoints"]) == NUM_JOINTS:
                pd = dict(pd, keypoints=[pd["keypoints"][o] for o in order])
            poses.append(_parse_pose(pd, index, pw))
        try:
            frames.append(Frame(index, width, height, tuple(poses)))
        except ValueError as exc:
            raise SequenceFormatError(f"{where}: {exc}") from None
    return SequenceFile(video_id, width, height, tuple(frames))


def load_sequence(path: PathLike) -> SequenceFile:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SequenceFormatError(f"{path}: line {exc.lineno}: invalid JSON ({exc.msg})") from None
    return sequence_from_json(doc, str(path))


def load_sequences(path: PathLike) -> list[SequenceFile]:
    """One file, or every ``*.json`` in a directory (sorted by name)."""
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.json"))
        if not files:
            raise SequenceFormatError(f"{path}: no sequence files")
        return [load_sequence(f) for f in files]
    return [load_sequence(path)]


# -- PoseTrack import ----------------------------------------------------------

POSETRACK_JOINTS = (
    "nose", "head_bottom", "head_top", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
)


def from_posetrack(doc: dict, width: int, height: int, video_id: str = "posetrack") -> SequenceFile:
    """Convert a PoseTrack-style ``images``/``annotations`` document (17 joints, ears dropped)."""
    keep = [POSETRACK_JOINTS.index(n) for n in JOINT_NAMES]
    images = sorted(doc.get("images", []), key=lambda im: im.get("frame_id", im["id"]))
    index_of = {im["id"]: i for i, im in enumerate(images)}
    per_frame: dict[int, list[Pose]] = {i: [] for i in range(len(images))}
    for n, ann in enumerate(doc.get("annotations", [])):
        where = f"annotations[{n}]"
        if ann.get("image_id") not in index_of:
            raise SequenceFormatError(f"{where}.image_id: unknown image {ann.get('image_id')!r}")
        raw = ann.get("keypoints")
        if not isinstance(raw, list) or len(raw) != 3 * len(POSETRACK_JOINTS):
            raise SequenceFormatError(f"{where}.keypoints: expected {3 * len(POSETRACK_JOINTS)} values")
        arr = np.asarray(raw, dtype=float).reshape(-1, 3)[keep]
        vis = arr[:, 2] > 0
        inside = (arr[:, 0] >= 0) & (arr[:, 0] <= width) & (arr[:, 1] >= 0) & (arr[:, 1] <= height)
        vis &= inside
        fi = index_of[ann["image_id"]]
        bbox = ann.get("bbox")
        bbox = tuple(float(v) for v in bbox) if bbox and bbox[2] > 0 and bbox[3] > 0 else None
        per_frame[fi].append(
            Pose.from_arrays(arr[:, :2], np.where(vis, 1.0, 0.0), vis, bbox=bbox, track_id=ann.get("track_id"), frame_index=fi)
        )
    frames = tuple(Frame(i, width, height, tuple(per_frame[i])) for i in range(len(images)))
    return SequenceFile(video_id, width, height, frames)


# -- synthetic generator -------------------------------------------------------

@dataclass(frozen=True)
class NoiseModel:
    jitter_px: float = 0.0
    keypoint_dropout: float = 0.0
    missed_pose: float = 0.0
    duplicate_pose: float = 0.0

    def __post_init__(self):
        for name in ("keypoint_dropout", "missed_pose", "duplicate_pose"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")
        if self.jitter_px < 0:
            raise ValueError("jitter_px must be non-negative")


@dataclass(frozen=True)
class SynthConfig:
    num_persons: int = 4
    num_frames: int = 60
    width: int = 960
    height: int = 540
    # person height in pixels, sampled uniformly
    person_height: tuple[float, float] = (130.0, 190.0)
    # speed in pixels per frame, sampled uniformly
    speed: tuple[float, float] = (3.0, 12.0)
    # everyone shares one velocity, walking in a single file
    uniform_motion: bool = False
    # spacing between neighbours in a single file, in multiples of the speed
    file_spacing: float = 2.0
    # expected number of occlusions per person, each hiding them for occlusion_frames
    occlusions_per_person: float = 0.0
    occlusion_frames: int = 2
    noise: NoiseModel = field(default_factory=NoiseModel)
    seed: int = 0

    def __post_init__(self):
        if self.num_persons < 1 or self.num_frames < 1:
            raise ValueError("num_persons and num_frames must be positive")
        if self.occlusion_frames < 1 or self.occlusions_per_person < 0:
            raise ValueError("occlusion settings must be positive")

    def to_dict(self) -> dict:
        from dataclasses import asdict

        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if "noise" in d and isinstance(d["noise"], dict):
            d["noise"] = NoiseModel(**d["noise"])
        for key in ("person_height", "speed"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


# Stick figure in units of body height; hip centre at the origin, y down.
# Limbs hang from their parent joint; swing angles rotate them about it.
_UPPER_ARM, _FOREARM, _THIGH, _SHIN = 0.17, 0.15, 0.24, 0.24


def skeleton(center: np.ndarray, height: float, facing: float, phase: float, swing: float = 0.45) -> np.ndarray:
    """Joint coordinates ``(15, 2)`` for a walking stick figure.

    ``facing`` is +1 or -1 (horizontal direction the nose points) and
    ``phase`` the gait phase in radians.
    """
    h, f = height, facing
    s = math.sin(phase)
    xy = np.zeros((NUM_JOINTS, 2))
    xy[0] = (0.05 * f * h, -0.45 * h)  # nose
    xy[1] = (0.0, -0.37 * h)  # head bottom
    xy[2] = (0.0, -0.53 * h)  # head top
    xy[3] = (-0.09 * h, -0.34 * h)
    xy[4] = (0.09 * h, -0.34 * h)
    xy[9] = (-0.06 * h, 0.0)
    xy[10] = (0.06 * h, 0.0)

    def hang(origin, length, angle):
        return origin + np.array([f * length * h * math.sin(angle), length * h * math.cos(angle)])

    leg = swing * s
    arm = -0.8 * swing * s
    for side, sign in ((0, 1.0), (1, -1.0)):
        sh, hip = xy[3 + side], xy[9 + side]
        elbow = hang(sh, _UPPER_ARM, sign * arm)
        xy[5 + side] = elbow
        xy[7 + side] = hang(elbow, _FOREARM, sign * arm + 0.35)
        knee = hang(hip, _THIGH, sign * leg)
        xy[11 + side] = knee
        xy[13 + side] = hang(knee, _SHIN, sign * leg - 0.25 * max(0.0, sign * s))
    return xy + center


def _reflect(pos: float, lo: float, hi: float) -> tuple[float, float]:
    """Fold ``pos`` into ``[lo, hi]``; returns (position, direction sign)."""
    span = hi - lo
    if span <= 0:
        return lo, 1.0
    u = (pos - lo) % (2 * span)
    return (lo + u, 1.0) if u <= span else (lo + 2 * span - u, -1.0)


def _body_margins(height: float) -> tuple[float, float, float]:
    # horizontal half-extent, extent above and below the hip centre
    return 0.25 * height, 0.56 * height, 0.52 * height


def jitter_keypoints(
    xy: np.ndarray, visible: np.ndarray, sigma: float, dropout: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gaussian keypoint noise with confidences that fall as the noise grows.

    Each keypoint draws its own noise scale in [0.5, 2]; its confidence is
    ``1 - 0.3 * scale`` plus a little noise, so poorly placed keypoints tend
    to carry low confidence. Returns ``(xy, confidence, visible)``.
    """
    n = xy.shape[0]
    scale = rng.uniform(0.5, 2.0, size=n)
    noisy = xy + rng.normal(0.0, 1.0, size=(n, 2)) * (sigma * scale)[:, None]
    conf = np.clip(1.0 - 0.3 * scale + rng.normal(0.0, 0.05, size=n), 0.05, 1.0)
    if sigma == 0:
        conf = np.ones(n)
    keep = rng.random(n) >= dropout
    return noisy, conf, visible & keep


def _person_tracks(cfg: SynthConfig, rng: np.random.Generator) -> list[dict]:
    """Per-person arrays of centres, facings, phases and heights over time."""
    n_frames = cfg.num_frames
    lo_h, hi_h = cfg.person_height
    people = []
    if cfg.uniform_motion:
        speed = rng.uniform(*cfg.speed)
        angle = rng.uniform(-0.35, 0.35) + (math.pi if rng.random() < 0.5 else 0.0)
        direction = np.array([math.cos(angle), math.sin(angle)])
        spacing = cfg.file_spacing * speed
        n = cfg.num_persons
        offsets = (np.arange(n) - (n - 1) / 2.0)[:, None] * spacing * direction[None, :]
        heights = rng.uniform(lo_h, hi_h, size=n)
        mx, up, down = _body_margins(heights.max())
        ext = np.abs(offsets).max(axis=0)
        lo = np.array([mx + ext[0], up + ext[1]])
        hi = np.array([cfg.width - mx - ext[0], cfg.height - down - ext[1]])
        start = rng.uniform(lo, np.maximum(hi, lo))
        phase0 = rng.uniform(0, 2 * math.pi, size=n)
        omega = 0.12 * speed / (heights / 160.0) ** 0.5 / 2.0
        for i in range(n):
            centers, facings = np.zeros((n_frames, 2)), np.zeros(n_frames)
            for step in range(n_frames):
                raw = start + direction * speed * step
                gx, sx = _reflect(raw[0], lo[0], hi[0])
                gy, _ = _reflect(raw[1], lo[1], hi[1])
                # the file turns around as one; the leader becomes the last
                centers[step] = (gx + offsets[i, 0], gy + offsets[i, 1])
                facings[step] = 1.0 if direction[0] * sx >= 0 else -1.0
            people.append(dict(centers=centers, facings=facings, phases=phase0[i] + omega[i] * np.arange(n_frames), height=heights[i]))
        return people
    for _ in range(cfg.num_persons):
        height = rng.uniform(lo_h, hi_h)
        speed = rng.uniform(*cfg.speed)
        angle = rng.uniform(0, 2 * math.pi)
        v = speed * np.array([math.cos(angle), 0.5 * math.sin(angle)])
        mx, up, down = _body_margins(height)
        lo = np.array([mx, up])
        hi = np.array([cfg.width - mx, cfg.height - down])
        start = rng.uniform(lo, hi)
        centers, facings = np.zeros((n_frames, 2)), np.zeros(n_frames)
        for step in range(n_frames):
            raw = start + v * step
            gx, sx = _reflect(raw[0], lo[0], hi[0])
            gy, _ = _reflect(raw[1], lo[1], hi[1])
            centers[step] = (gx, gy)
            facings[step] = 1.0 if v[0] * sx >= 0 else -1.0
        omega = 0.12 * max(speed, 2.0) / (height / 160.0) ** 0.5 / 2.0
        phases = rng.uniform(0, 2 * math.pi) + omega * np.arange(n_frames)
        people.append(dict(centers=centers, facings=facings, phases=phases, height=height))
    return people


def _occlusion_mask(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """``(persons, frames)`` bool, True where the person is hidden."""
    hidden = np.zeros((cfg.num_persons, cfg.num_frames), dtype=bool)
    k = cfg.occlusion_frames
    if cfg.occlusions_per_person <= 0 or cfg.num_frames < k + 2:
        return hidden
    for i in range(cfg.num_persons):
        for _ in range(rng.poisson(cfg.occlusions_per_person)):
            # visible on both sides of the span so its length is exactly k
            start = int(rng.integers(1, cfg.num_frames - k))
            lo, hi = max(start - 1, 0), min(start + k + 1, cfg.num_frames)
            if hidden[i, lo:hi].any():
                continue
            hidden[i, start : start + k] = True
    return hidden


def _padded_box(xy: np.ndarray, vis: np.ndarray, width: int, height: int, pad: float = 0.1):
    box = keypoint_box(xy, vis)
    if box is None:
        return None
    x, y, w, h = box
    x0, y0 = max(x - pad * w, 0.0), max(y - pad * h, 0.0)
    x1, y1 = min(x + w * (1 + pad), float(width)), min(y + h * (1 + pad), float(height))
    if x1 <= x0 or y1 <= y0:
        return None
    return (x0, y0, x1 - x0, y1 - y0)


def _in_frame(xy: np.ndarray, width: int, height: int) -> np.ndarray:
    return (xy[:, 0] >= 0) & (xy[:, 0] <= width) & (xy[:, 1] >= 0) & (xy[:, 1] <= height)


def generate_synthetic(
    cfg: SynthConfig, video_index: int = 0, keep_ids: bool = False
) -> tuple[SequenceFile, SequenceFile]:
    """Ground truth (with track ids) and noisy detections for one video.

    Detections carry no track ids unless ``keep_ids`` is set, which labels
    each with the person it was generated from (useful as training data).
    """
    rng = np.random.default_rng([cfg.seed, video_index])
    noise_rng = np.random.default_rng([cfg.seed, video_index, 1])
    people = _person_tracks(cfg, rng)
    hidden = _occlusion_mask(cfg, rng)
    nz = cfg.noise
    gt_frames, det_frames = [], []
    for fi in range(cfg.num_frames):
        gt_poses, det_poses = [], []
        for i, person in enumerate(people):
            if hidden[i, fi]:
                continue
            xy = skeleton(person["centers"][fi], person["height"], person["facings"][fi], person["phases"][fi])
            vis = _in_frame(xy, cfg.width, cfg.height)
            if not vis.any():
                continue
            gt_poses.append(
                Pose.from_arrays(xy, np.ones(NUM_JOINTS), vis, bbox=_padded_box(xy, vis, cfg.width, cfg.height),
                                 track_id=i, frame_index=fi)
            )
            if noise_rng.random() < nz.missed_pose:
                continue
            copies = 2 if noise_rng.random() < nz.duplicate_pose else 1
            for c in range(copies):
                sigma = nz.jitter_px * (2.0 if c else 1.0)
                dxy, conf, dvis = jitter_keypoints(xy, vis, sigma, nz.keypoint_dropout, noise_rng)
                dvis &= _in_frame(dxy, cfg.width, cfg.height)
                if c:
                    conf = conf * 0.7
                if not dvis.any():
                    continue
                score = float(noise_rng.uniform(0.5, 1.0))
                det_poses.append(
                    Pose.from_arrays(dxy, conf, dvis, bbox=_padded_box(dxy, dvis, cfg.width, cfg.height),
                                     track_id=i if keep_ids else None, frame_index=fi, score=score)
                )
        gt_frames.append(Frame(fi, cfg.width, cfg.height, tuple(gt_poses)))
        det_frames.append(Frame(fi, cfg.width, cfg.height, tuple(det_poses)))
    vid = f"synth-{cfg.seed}-{video_index:03d}"
    return SequenceFile(vid, cfg.width, cfg.height, tuple(gt_frames)), SequenceFile(vid, cfg.width, cfg.height, tuple(det_frames))


def generate_corpus(
    cfg: SynthConfig, num_videos: int, first_index: int = 0, keep_ids: bool = False
) -> list[tuple[SequenceFile, SequenceFile]]:
    return [generate_synthetic(cfg, first_index + i, keep_ids) for i in range(num_videos)]


def strip_tracks(seq: SequenceFile) -> SequenceFile:
    return seq.with_frames(
        Frame(f.index, f.width, f.height, tuple(pose.with_track(None) for pose in f.poses)) for f in seq.frames
    )


def hidden_spans(gt: SequenceFile) -> dict[int, list[tuple[int, int]]]:
    """Per track: (first hidden frame, length) for every gap between appearances."""
    seen: dict[int, list[int]] = {}
    for f in gt.frames:
        for pose in f.poses:
            seen.setdefault(pose.track_id, []).append(f.index)
    spans = {}
    for tid, idx in seen.items():
        spans[tid] = [(a + 1, b - a - 1) for a, b in zip(idx, idx[1:]) if b - a > 1]
    return spans
