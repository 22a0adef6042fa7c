"""Online track-id assignment from pairwise match scores."""
from __future__ import annotations

import csv
import itertools
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .dataio import SequenceFile
from .domain import Frame, Pose, box_iou, nearest_poses
from .toks import PoseEstimator, ToksConfig, ToksStats, toks_refine

ASSIGNMENT_MODES = ("greedy", "hungarian")


@dataclass(frozen=True)
class TrackerConfig:
    delta: int = 4
    n_nearest: int = 6
    assignment: str = "greedy"
    min_match_score: float = 0.5

    def __post_init__(self):
        if self.delta < 1 or self.n_nearest < 1:
            raise ValueError("delta and n_nearest must be >= 1")
        if self.assignment not in ASSIGNMENT_MODES:
            raise ValueError(f"assignment must be one of {ASSIGNMENT_MODES}")
        if not 0.0 <= self.min_match_score <= 1.0:
            raise ValueError("min_match_score must lie in [0, 1]")

    def to_dict(self) -> dict:
        from dataclasses import asdict

        return asdict(self)


class PairScorer(Protocol):
    def score_poses(self, items: Sequence[tuple[Pose, Pose, int]], width: float, height: float) -> np.ndarray:
        """Match probability for each ``(current, past, gap)`` triple."""


@dataclass(frozen=True)
class Candidate:
    track_id: int
    score: float
    gap: int


@dataclass(frozen=True)
class AssignmentRecord:
    frame: int
    pose_index: int
    track_id: int
    best_score: float  # nan when the pose had no candidates
    gap_used: int  # 0 when a new track was spawned
    spawned: bool


@dataclass
class TrackState:
    delta: int
    buffer: deque = field(init=False)
    next_track_id: int = 0
    log: list[AssignmentRecord] = field(default_factory=list)

    def __post_init__(self):
        self.buffer = deque(maxlen=self.delta)

    def push(self, frame_index: int, poses: Sequence[Pose]):
        self.buffer.append((frame_index, tuple(poses)))

    def new_id(self) -> int:
        tid = self.next_track_id
        self.next_track_id += 1
        return tid


# -- assignment on score matrices ---------------------------------------------

def greedy_assign(scores: np.ndarray, valid: Optional[np.ndarray] = None, min_score: float = 0.0,
                  tiebreak: Optional[np.ndarray] = None) -> list[tuple[int, int]]:
    """Repeatedly take the best remaining (row, column) entry.

    Ties are broken by ``tiebreak`` (ascending), then column, then row.
    """
    scores = np.asarray(scores, dtype=float)
    valid = np.ones(scores.shape, bool) if valid is None else np.asarray(valid, bool)
    tb = np.zeros(scores.shape) if tiebreak is None else np.asarray(tiebreak)
    rows, cols = np.nonzero(valid & (scores >= min_score))
    order = sorted(range(len(rows)), key=lambda k: (-scores[rows[k], cols[k]], tb[rows[k], cols[k]], cols[k], rows[k]))
    used_r, used_c, out = set(), set(), []
    for k in order:
        r, c = int(rows[k]), int(cols[k])
        if r in used_r or c in used_c:
            continue
        used_r.add(r)
        used_c.add(c)
        out.append((r, c))
    return sorted(out)


def hungarian_assign(scores: np.ndarray, valid: Optional[np.ndarray] = None, min_score: float = 0.0) -> list[tuple[int, int]]:
    """Maximum-total one-to-one assignment; entries that are invalid or below ``min_score`` are never used."""
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        return []
    valid = np.ones(scores.shape, bool) if valid is None else np.asarray(valid, bool)
    usable = valid & (scores >= min_score)
    # unusable entries weigh nothing, so dropping them afterwards loses nothing
    w = np.where(usable, np.maximum(scores, 0.0), 0.0)
    r, c = linear_sum_assignment(w, maximize=True)
    return sorted((int(i), int(j)) for i, j in zip(r, c) if usable[i, j])


def assignment_total(scores: np.ndarray, pairs: Sequence[tuple[int, int]]) -> float:
    return float(sum(scores[r, c] for r, c in pairs))


def brute_force_assign(scores: np.ndarray) -> float:
    """Best total over all one-to-one partial assignments (for small matrices)."""
    n, m = scores.shape
    best = 0.0
    if n <= m:
        for perm in itertools.permutations(range(m), n):
            best = max(best, sum(max(scores[i, perm[i]], 0.0) for i in range(n)))
    else:
        for perm in itertools.permutations(range(n), m):
            best = max(best, sum(max(scores[perm[j], j], 0.0) for j in range(m)))
    return float(best)


# -- scoring -------------------------------------------------------------------

def _candidate_items(pose: Pose, frame_index: int, state: TrackState, config: TrackerConfig):
    items = []
    for past_index, past_poses in state.buffer:
        gap = frame_index - past_index
        if not 1 <= gap <= config.delta:
            continue
        pool = [pose for pose in past_poses if pose.track_id is not None]
        for q in nearest_poses(pose, pool, config.n_nearest) if pool else []:
            items.append((q.track_id, gap, q))
    return items


def _score_all(poses, frame_index, state, matcher: PairScorer, config, width, height) -> list[list[Candidate]]:
    per_pose, triples = [], []
    for pose in poses:
        items = _candidate_items(pose, frame_index, state, config) if pose.num_visible else []
        per_pose.append(items)
        triples += [(pose, q, gap) for _, gap, q in items]
    scores = matcher.score_poses(triples, width, height) if triples else np.zeros(0)
    out, k = [], 0
    for items in per_pose:
        cands = []
        for tid, gap, _ in items:
            cands.append(Candidate(tid, float(scores[k]), gap))
            k += 1
        cands.sort(key=lambda c: (-c.score, c.gap, c.track_id))
        out.append(cands)
    return out


def score_candidates(pose: Pose, state: TrackState, matcher: PairScorer, config: TrackerConfig,
                     frame_index: int, width: float, height: float) -> list[Candidate]:
    """Scores against the nearest identified poses of each buffered frame, best first."""
    return _score_all([pose], frame_index, state, matcher, config, width, height)[0]


def best_per_track(cands: Sequence[Candidate]) -> dict[int, Candidate]:
    """Highest-scoring candidate for each track (input is already best-first)."""
    best: dict[int, Candidate] = {}
    for c in cands:
        best.setdefault(c.track_id, c)
    return best


def assign_frame(poses: Sequence[Pose], state: TrackState, matcher: PairScorer, config: TrackerConfig,
                 frame_index: int, width: float, height: float) -> list[Pose]:
    """Give every pose a track id, push the frame into the buffer and log the decisions."""
    cands = _score_all(poses, frame_index, state, matcher, config, width, height)
    bests = [best_per_track(c) for c in cands]
    tracks = sorted({tid for b in bests for tid in b})
    col = {tid: j for j, tid in enumerate(tracks)}
    scores = np.zeros((len(poses), len(tracks)))
    gaps = np.zeros_like(scores)
    valid = np.zeros(scores.shape, bool)
    for i, b in enumerate(bests):
        for tid, c in b.items():
            scores[i, col[tid]], gaps[i, col[tid]], valid[i, col[tid]] = c.score, c.gap, True
    if config.assignment == "greedy":
        pairs = greedy_assign(scores, valid, config.min_match_score, tiebreak=gaps)
    else:
        pairs = hungarian_assign(scores, valid, config.min_match_score)
    match = dict(pairs)
    out = []
    for i, pose in enumerate(poses):
        best = cands[i][0] if cands[i] else None
        if i in match:
            tid = tracks[match[i]]
            c = bests[i][tid]
            rec = AssignmentRecord(frame_index, i, tid, c.score, c.gap, False)
        else:
            tid = state.new_id()
            rec = AssignmentRecord(frame_index, i, tid, best.score if best else float("nan"), 0, True)
        state.log.append(rec)
        out.append(pose.with_track(tid))
    state.push(frame_index, out)
    return out


# -- whole videos --------------------------------------------------------------

@dataclass
class TrackResult:
    sequence: SequenceFile
    log: list[AssignmentRecord]
    toks: Optional[ToksStats] = None


def track_video(
    detections: SequenceFile,
    matcher: PairScorer,
    config: TrackerConfig = TrackerConfig(),
    toks: Optional[ToksConfig] = None,
    estimator: Optional[PoseEstimator] = None,
) -> TrackResult:
    """Refine (optionally) and track a detected sequence frame by frame.

    Each frame uses only frames up to itself, so truncating the video never
    changes earlier output.
    """
    state = TrackState(config.delta)
    stats = ToksStats() if toks is not None else None
    frames, prev = [], []
    for f in detections.frames:
        poses = list(f.poses)
        if toks is not None:
            poses = toks_refine(prev, poses, estimator, toks, f.index, f.width, f.height, stats=stats)
        tracked = assign_frame(poses, state, matcher, config, f.index, f.width, f.height)
        frames.append(Frame(f.index, f.width, f.height, tuple(tracked)))
        prev = tracked
    return TrackResult(detections.with_frames(frames), state.log, stats)


def track_iou_baseline(detections: SequenceFile, min_iou: float = 0.3) -> SequenceFile:
    """Greedy box-IoU association against the previous frame only."""
    next_id = 0
    prev: list[Pose] = []
    frames = []
    for f in detections.frames:
        poses = list(f.poses)
        iou = np.zeros((len(poses), len(prev)))
        for i, cur in enumerate(poses):
            for j, old in enumerate(prev):
                if cur.box is not None and old.box is not None:
                    iou[i, j] = box_iou(cur.box, old.box)
        match = dict(greedy_assign(iou, None, min_iou)) if prev and poses else {}
        out = []
        for i, pose in enumerate(poses):
            if i in match:
                out.append(pose.with_track(prev[match[i]].track_id))
            else:
                out.append(pose.with_track(next_id))
                next_id += 1
        frames.append(Frame(f.index, f.width, f.height, tuple(out)))
        prev = out
    return detections.with_frames(frames)


LOG_COLUMNS = ("frame", "pose_index", "track_id", "best_score", "gap_used", "spawned_flag")


def write_assignment_log(records: Sequence[AssignmentRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in records:
            w.writerow([r.frame, r.pose_index, r.track_id, f"{r.best_score:.6f}", r.gap_used, int(r.spawned)])
