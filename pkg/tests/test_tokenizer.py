from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kptrack.tokenizer import (
    PLACEHOLDER_TOKEN,
    SEQ_LEN,
    TokenGrid,
    position_token,
    position_tokens,
    stack_pairs,
    tokenize_pair,
    tokenize_pair_relative,
)

from helpers import pose_at, standing_pose

WIDTH, HEIGHT = 960, 540


def test_default_grid_vocab():
    g = TokenGrid()
    assert (g.grid_w, g.grid_h, g.vocab) == (24, 18, 432)
    with pytest.raises(ValueError):
        TokenGrid(0, 4)


def test_position_token_examples():
    assert position_token(0, 0, WIDTH, HEIGHT) == 1
    assert position_token(0, 0, 17, 3) == 1
    eps = 1e-6
    assert position_token(WIDTH - eps, HEIGHT - eps, WIDTH, HEIGHT) == 432
    assert position_token(960, 540, 1920, 1080) == 229


def test_right_and_bottom_edges_fall_in_last_cell():
    assert position_token(WIDTH, HEIGHT, WIDTH, HEIGHT) == 432
    tokens, clamped = position_tokens(np.array([[WIDTH, HEIGHT]]), WIDTH, HEIGHT)
    assert not clamped[0]


def test_out_of_frame_clamps_with_flag():
    tokens, clamped = position_tokens(np.array([[-5.0, 10.0], [WIDTH + 30, HEIGHT + 1], [10.0, 10.0]]), WIDTH, HEIGHT)
    assert tokens[0] == 1
    assert tokens[1] == 432
    assert clamped.tolist() == [True, True, False]


@given(st.floats(0, 1), st.floats(0, 1), st.integers(1, 40), st.integers(1, 40))
def test_position_token_flattening_rule(fx, fy, gw, gh):
    grid = TokenGrid(gw, gh)
    x, y = fx * 100.0, fy * 50.0
    col = min(int(np.floor(x / 100.0 * gw)), gw - 1)
    row = min(int(np.floor(y / 50.0 * gh)), gh - 1)
    assert position_token(x, y, 100.0, 50.0, grid) == row * gw + col + 1


def test_identical_poses_gap_one():
    pose = standing_pose(300, 300)
    pair = tokenize_pair(pose, pose, 1, WIDTH, HEIGHT)
    assert pair.position.shape == (SEQ_LEN,)
    assert np.array_equal(pair.position[:15], pair.position[15:])
    assert pair.segment.tolist() == [1] * 30
    assert pair.type.tolist() == list(range(1, 16)) * 2
    assert pair.attn_mask.all()


def test_invisible_past_keypoint_is_masked_and_placeholder():
    cur = standing_pose(300, 300)
    vis = np.ones(15, bool)
    vis[7] = False  # left wrist
    past = standing_pose(310, 300, visible=vis)
    pair = tokenize_pair(cur, past, 2, WIDTH, HEIGHT)
    assert not pair.attn_mask[15 + 7]
    assert pair.attn_mask.sum() == 29
    assert pair.position[15 + 7] == PLACEHOLDER_TOKEN


def test_gap_four_fills_second_half():
    pose = standing_pose(300, 300)
    pair = tokenize_pair(pose, pose, 4, WIDTH, HEIGHT)
    assert pair.segment[15:].tolist() == [4] * 15
    assert pair.segment[:15].tolist() == [1] * 15


def test_gap_out_of_range_rejected():
    pose = standing_pose(300, 300)
    with pytest.raises(ValueError):
        tokenize_pair(pose, pose, 0, WIDTH, HEIGHT)
    with pytest.raises(ValueError):
        tokenize_pair(pose, pose, 5, WIDTH, HEIGHT, delta=4)
    with pytest.raises(ValueError):
        tokenize_pair_relative(pose, pose, 7, WIDTH, HEIGHT, delta=4)


def test_relative_centroid_is_center_cell():
    xy = np.full((15, 2), 200.0)
    pair = tokenize_pair_relative(pose_at(xy), pose_at(xy), 1, WIDTH, HEIGHT)
    # centre column 12, centre row 9 on the 24x18 grid
    assert np.all(pair.position == 9 * 24 + 12 + 1)


def test_relative_half_frame_offset():
    xy = np.full((15, 2), 400.0)
    vis = np.zeros(15, bool)
    vis[0] = vis[1] = True
    xy[0, 0] = 400.0 - WIDTH / 2
    xy[1, 0] = 400.0 + WIDTH / 2
    # centroid of the two visible joints is (400, 400); joint 2 is exactly
    # half a frame to its right
    pair = tokenize_pair_relative(pose_at(xy, visible=vis), pose_at(xy, visible=vis), 1, WIDTH, HEIGHT)
    assert pair.position[1] == 9 * 24 + min(12 + 12, 23) + 1
    assert pair.position[0] == 9 * 24 + 0 + 1


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_relative_tokens_ignore_translation(seed):
    rng = np.random.default_rng(seed)
    a = standing_pose(rng.uniform(150, 800), rng.uniform(150, 400), rng.uniform(100, 150))
    b = standing_pose(rng.uniform(150, 800), rng.uniform(150, 400), rng.uniform(100, 150))
    shift = rng.uniform(-100, 100, 2)
    moved_a, moved_b = pose_at(a.xy + shift), pose_at(b.xy + shift)
    rel = tokenize_pair_relative(a, b, 2, WIDTH, HEIGHT)
    rel_moved = tokenize_pair_relative(moved_a, moved_b, 2, WIDTH, HEIGHT)
    assert np.array_equal(rel.position, rel_moved.position)


def test_absolute_tokens_change_under_translation():
    a = standing_pose(300, 300)
    moved = pose_at(a.xy + [200, 60])
    assert not np.array_equal(tokenize_pair(a, a, 1, WIDTH, HEIGHT).position, tokenize_pair(moved, moved, 1, WIDTH, HEIGHT).position)


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 4), st.booleans())
def test_tokens_stay_in_vocab(seed, gap, relative):
    rng = np.random.default_rng(seed)
    xy = rng.uniform(-200, 1200, (15, 2))
    vis = rng.random(15) < 0.7
    cur = pose_at(xy, visible=vis)
    past = pose_at(rng.uniform(-200, 1200, (15, 2)), visible=rng.random(15) < 0.7)
    grid = TokenGrid(int(rng.integers(1, 30)), int(rng.integers(1, 30)))
    tok = tokenize_pair_relative if relative else tokenize_pair
    pair = tok(cur, past, gap, WIDTH, HEIGHT, grid)
    assert pair.position.min() >= 1 and pair.position.max() <= grid.vocab
    assert pair.type.min() >= 1 and pair.type.max() <= 15
    assert set(pair.segment.tolist()) <= {1, gap}
    assert np.array_equal(pair.attn_mask, np.concatenate([cur.visible, past.visible]))


def test_tokenization_deterministic():
    a, b = standing_pose(300, 300), standing_pose(330, 310)
    t1, t2 = tokenize_pair(a, b, 3, WIDTH, HEIGHT), tokenize_pair(a, b, 3, WIDTH, HEIGHT)
    for name in ("position", "type", "segment", "attn_mask"):
        assert getattr(t1, name).tobytes() == getattr(t2, name).tobytes()


def test_stack_pairs_and_labels():
    a, b = standing_pose(300, 300), standing_pose(330, 310)
    pairs = [tokenize_pair(a, b, 1, WIDTH, HEIGHT, label=True), tokenize_pair(b, a, 2, WIDTH, HEIGHT, label=False)]
    batch = stack_pairs(pairs)
    assert len(batch) == 2
    assert batch.position.shape == (2, 30)
    assert batch.labels.tolist() == [1, 0]
    assert stack_pairs([tokenize_pair(a, b, 1, WIDTH, HEIGHT)]).labels is None
    assert len(stack_pairs([])) == 0
