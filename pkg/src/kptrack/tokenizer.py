"""Turn a (current, past) pose pair into parallel Position/Type/Segment tokens.

Sequence layout is the 15 keypoints of the current pose followed by the 15
of the past pose. Position tokens are 1-based, row-major cells of a
downsampled grid over the frame.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .domain import NUM_JOINTS, Pose

SEQ_LEN = 2 * NUM_JOINTS
PLACEHOLDER_TOKEN = 1


@dataclass(frozen=True)
class TokenGrid:
    grid_w: int = 24
    grid_h: int = 18

    def __post_init__(self):
        if self.grid_w <= 0 or self.grid_h <= 0:
            raise ValueError("grid dimensions must be positive")

    @property
    def vocab(self) -> int:
        return self.grid_w * self.grid_h


@dataclass(frozen=True, eq=False)
class TokenizedPair:
    position: np.ndarray  # (30,) int, in [1, vocab]
    type: np.ndarray  # (30,) int, in [1, 15]
    segment: np.ndarray  # (30,) int, in [1, delta]
    attn_mask: np.ndarray  # (30,) bool, True where the keypoint may be attended
    label: Optional[bool] = None
    clamped: int = 0

    def __eq__(self, other):
        if not isinstance(other, TokenizedPair):
            return NotImplemented
        return (
            np.array_equal(self.position, other.position)
            and np.array_equal(self.type, other.type)
            and np.array_equal(self.segment, other.segment)
            and np.array_equal(self.attn_mask, other.attn_mask)
            and self.label == other.label
        )

    def with_label(self, label: bool) -> "TokenizedPair":
        return TokenizedPair(self.position, self.type, self.segment, self.attn_mask, label, self.clamped)


@dataclass(frozen=True)
class TokenBatch:
    """Stacked token arrays for a batch of pairs, shape ``(batch, 30)`` each."""

    position: np.ndarray
    type: np.ndarray
    segment: np.ndarray
    attn_mask: np.ndarray
    labels: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.position.shape[0]

    def take(self, idx) -> "TokenBatch":
        labels = None if self.labels is None else self.labels[idx]
        return TokenBatch(self.position[idx], self.type[idx], self.segment[idx], self.attn_mask[idx], labels)


def stack_pairs(pairs: Sequence[TokenizedPair]) -> TokenBatch:
    labels = None
    if pairs and all(pair.label is not None for pair in pairs):
        labels = np.array([int(pair.label) for pair in pairs], dtype=np.int64)
    if not pairs:
        empty = np.zeros((0, SEQ_LEN), dtype=np.int64)
        return TokenBatch(empty, empty.copy(), empty.copy(), np.zeros((0, SEQ_LEN), dtype=bool), labels)
    return TokenBatch(
        np.stack([pair.position for pair in pairs]),
        np.stack([pair.type for pair in pairs]),
        np.stack([pair.segment for pair in pairs]),
        np.stack([pair.attn_mask for pair in pairs]),
        labels,
    )


def _cells(fx: np.ndarray, fy: np.ndarray, grid: TokenGrid) -> tuple[np.ndarray, np.ndarray]:
    """Map fractional frame coordinates to (token, clamped) arrays."""
    col = np.floor(fx * grid.grid_w)
    row = np.floor(fy * grid.grid_h)
    ccol = np.clip(col, 0, grid.grid_w - 1)
    crow = np.clip(row, 0, grid.grid_h - 1)
    # the right/bottom edge itself is in-frame and belongs to the last cell
    clamped = (fx < 0) | (fx > 1) | (fy < 0) | (fy > 1)
    tokens = (crow * grid.grid_w + ccol + 1).astype(np.int64)
    return tokens, clamped


def position_tokens(
    xy: np.ndarray, frame_w: float, frame_h: float, grid: TokenGrid = TokenGrid()
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`position_token` over an ``(N, 2)`` array; also returns clamp flags."""
    xy = np.asarray(xy, dtype=float)
    return _cells(xy[:, 0] / frame_w, xy[:, 1] / frame_h, grid)


def position_token(x: float, y: float, frame_w: float, frame_h: float, grid: TokenGrid = TokenGrid()) -> int:
    tokens, _ = position_tokens(np.array([[x, y]]), frame_w, frame_h, grid)
    return int(tokens[0])


def _check_gap(gap: int, delta: Optional[int]):
    if gap < 1 or (delta is not None and gap > delta):
        raise ValueError(f"temporal gap {gap} outside [1, {delta}]")


def _assemble(cur_tok, past_tok, current: Pose, past: Pose, gap: int, clamped: int, label) -> TokenizedPair:
    vis = np.concatenate([current.visible, past.visible])
    position = np.concatenate([cur_tok, past_tok])
    position[~vis] = PLACEHOLDER_TOKEN
    types = np.tile(np.arange(1, NUM_JOINTS + 1, dtype=np.int64), 2)
    segment = np.concatenate(
        [np.ones(NUM_JOINTS, dtype=np.int64), np.full(NUM_JOINTS, gap, dtype=np.int64)]
    )
    return TokenizedPair(position, types, segment, vis.copy(), label, clamped)


def tokenize_pair(
    current: Pose,
    past: Pose,
    gap: int,
    frame_w: float,
    frame_h: float,
    grid: TokenGrid = TokenGrid(),
    delta: Optional[int] = 4,
    label: Optional[bool] = None,
) -> TokenizedPair:
    """Absolute-position tokenization of a pose pair separated by ``gap`` frames."""
    _check_gap(gap, delta)
    cur, c1 = position_tokens(current.xy, frame_w, frame_h, grid)
    past_t, c2 = position_tokens(past.xy, frame_w, frame_h, grid)
    vis = np.concatenate([current.visible, past.visible])
    clamped = int(np.sum(np.concatenate([c1, c2]) & vis))
    return _assemble(cur, past_t, current, past, gap, clamped, label)


def _relative_tokens(pose: Pose, frame_w: float, frame_h: float, grid: TokenGrid):
    vis = pose.visible
    centroid = pose.xy[vis].mean(axis=0) if vis.any() else np.zeros(2)
    off = pose.xy - centroid
    return _cells(off[:, 0] / frame_w + 0.5, off[:, 1] / frame_h + 0.5, grid)


def tokenize_pair_relative(
    current: Pose,
    past: Pose,
    gap: int,
    frame_w: float,
    frame_h: float,
    grid: TokenGrid = TokenGrid(),
    delta: Optional[int] = 4,
    label: Optional[bool] = None,
) -> TokenizedPair:
    """Like :func:`tokenize_pair` but positions are offsets from each pose's keypoint centroid.

    Offsets are quantised on the same grid, with zero offset at the grid
    centre cell.
    """
    _check_gap(gap, delta)
    cur, c1 = _relative_tokens(current, frame_w, frame_h, grid)
    past_t, c2 = _relative_tokens(past, frame_w, frame_h, grid)
    vis = np.concatenate([current.visible, past.visible])
    clamped = int(np.sum(np.concatenate([c1, c2]) & vis))
    return _assemble(cur, past_t, current, past, gap, clamped, label)
