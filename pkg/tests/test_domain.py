from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kptrack.domain import (
    DEFAULT_SIGMAS,
    JOINT_NAMES,
    NUM_JOINTS,
    Frame,
    Keypoint,
    Pose,
    box_iou,
    clamp_box,
    dilate_box,
    load_sigmas,
    mutual_oks,
    nearest_poses,
    oks,
    oks_with_flag,
)

from helpers import pose_at, standing_pose
from oracles import oks_loop


def test_joint_table_has_fifteen_names():
    assert len(JOINT_NAMES) == NUM_JOINTS == 15
    assert len(set(JOINT_NAMES)) == 15
    assert DEFAULT_SIGMAS.shape == (15,) and np.all(DEFAULT_SIGMAS > 0)


def test_keypoint_rejects_bad_type_and_nan():
    with pytest.raises(ValueError):
        Keypoint(0, 1.0, 1.0)
    with pytest.raises(ValueError):
        Keypoint(16, 1.0, 1.0)
    with pytest.raises(ValueError):
        Keypoint(3, float("nan"), 1.0)


def test_pose_requires_every_joint_once():
    kps = tuple(Keypoint(j, 0.0, 0.0) for j in range(1, 15))
    with pytest.raises(ValueError, match="15 keypoints"):
        Pose(kps)
    swapped = list(Keypoint(j, 0.0, 0.0) for j in range(1, 16))
    swapped[0], swapped[1] = swapped[1], swapped[0]
    with pytest.raises(ValueError):
        Pose(tuple(swapped))


def test_pose_rejects_empty_box_and_negative_track():
    with pytest.raises(ValueError):
        standing_pose(bbox=(0, 0, 0, 5))
    with pytest.raises(ValueError):
        standing_pose(track_id=-1)


def test_frame_checks_bounds_and_index():
    pose = standing_pose(100, 100)
    Frame(0, 640, 480, (pose,))
    with pytest.raises(ValueError, match="outside"):
        Frame(0, 120, 480, (pose,))
    with pytest.raises(ValueError, match="frame_index"):
        Frame(3, 640, 480, (pose,))
    # invisible keypoints may lie anywhere
    hidden = pose.with_visibility(pose.xy[:, 0] <= 100)
    Frame(0, 101, 480, (hidden,))


def test_box_falls_back_to_keypoint_extent():
    pose = pose_at(np.column_stack([np.arange(15.0), np.arange(15.0) * 2]))
    assert pose.box == (0.0, 0.0, 14.0, 28.0)
    assert standing_pose(bbox=(1, 2, 3, 4)).box == (1, 2, 3, 4)


def test_oks_identical_is_one():
    pose = standing_pose()
    assert oks(pose, pose) == 1.0


def test_oks_single_joint_closed_form():
    sig = np.full(15, 0.1)
    area = 100.0 * 100.0
    s = math.sqrt(area)
    vis = np.zeros(15, bool)
    vis[5] = True
    ref_xy = np.full((15, 2), 50.0)
    ref = pose_at(ref_xy, visible=vis, bbox=(0, 0, 100, 100))
    cand_xy = ref_xy.copy()
    cand_xy[5, 0] += s * 0.1 * math.sqrt(2)
    cand = pose_at(cand_xy, visible=vis)
    assert oks(cand, ref, sig) == pytest.approx(math.exp(-1), abs=1e-12)
    assert oks(cand, ref, sig) == pytest.approx(0.36787944117, abs=1e-10)


def test_oks_uniform_displacement_matches_loop_and_closed_form():
    sig = np.full(15, 0.08)
    ref = standing_pose(bbox=(100, 100, 80, 160))
    d = 7.0
    cand = pose_at(ref.xy + np.array([d, 0.0]))
    closed = math.exp(-(d**2) / (2 * 80 * 160 * 0.08**2))
    assert oks(cand, ref, sig) == pytest.approx(closed, rel=1e-12)
    assert oks(cand, ref, sig) == pytest.approx(oks_loop(cand, ref, sig), rel=1e-12)


def test_oks_without_shared_joints_is_flagged_zero():
    vis_a = np.zeros(15, bool)
    vis_a[:5] = True
    a = standing_pose(visible=vis_a)
    b = standing_pose(visible=~vis_a)
    value, ok = oks_with_flag(a, b)
    assert value == 0.0 and not ok
    assert oks(a, b) == 0.0


def test_mutual_oks_is_symmetric_max():
    a = standing_pose(bbox=(0, 0, 50, 100))
    b = pose_at(a.xy + 5, bbox=(0, 0, 100, 200))
    assert mutual_oks(a, b) == mutual_oks(b, a) == max(oks(a, b), oks(b, a))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_oks_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    ref = pose_at(rng.uniform(0, 300, (15, 2)), visible=rng.random(15) < 0.8, bbox=(0, 0, 120, 240))
    cand = pose_at(ref.xy + rng.normal(0, 10, (15, 2)), visible=rng.random(15) < 0.8)
    assert oks(cand, ref) == pytest.approx(oks_loop(cand, ref, DEFAULT_SIGMAS), rel=1e-12, abs=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-500, 500), st.floats(-500, 500))
def test_oks_translation_invariant(seed, tx, ty):
    rng = np.random.default_rng(seed)
    a_xy = rng.uniform(0, 300, (15, 2))
    b_xy = a_xy + rng.normal(0, 8, (15, 2))
    a, b = pose_at(a_xy), pose_at(b_xy)
    a2, b2 = pose_at(a_xy + [tx, ty]), pose_at(b_xy + [tx, ty])
    assert oks(a2, b2) == pytest.approx(oks(a, b), rel=1e-9, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 14))
def test_oks_non_increasing_in_displacement(seed, joint):
    rng = np.random.default_rng(seed)
    ref = pose_at(rng.uniform(0, 300, (15, 2)), bbox=(0, 0, 100, 150))
    direction = rng.normal(size=2)
    direction /= np.linalg.norm(direction)
    prev = 1.0
    for step in np.linspace(0, 60, 13):
        xy = ref.xy.copy()
        xy[joint] += step * direction
        v = oks(pose_at(xy), ref)
        assert v <= prev + 1e-15
        prev = v


def test_dilate_box_examples():
    assert dilate_box((0, 0, 10, 10), 1.25) == pytest.approx((-1.25, -1.25, 12.5, 12.5))
    assert dilate_box((4, 4, 2, 2), 2) == pytest.approx((3, 3, 4, 4))
    box = (3.5, -2.0, 7.0, 11.0)
    assert dilate_box(box, 1) == box


def test_dilate_box_rejects_shrinking_and_empty():
    with pytest.raises(ValueError):
        dilate_box((0, 0, 10, 10), 0.9)
    with pytest.raises(ValueError):
        dilate_box((0, 0, 0, 10), 1.5)


@given(
    st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(0.1, 1e3), st.floats(0.1, 1e3)),
    st.floats(1, 4),
    st.floats(1, 4),
)
def test_dilate_box_composes_multiplicatively(box, a, b):
    twice = dilate_box(dilate_box(box, a), b)
    once = dilate_box(box, a * b)
    assert twice == pytest.approx(once, abs=1e-9, rel=1e-12)
    c0 = (box[0] + box[2] / 2, box[1] + box[3] / 2)
    c1 = (once[0] + once[2] / 2, once[1] + once[3] / 2)
    assert c1 == pytest.approx(c0, abs=1e-9)


def test_clamp_box_and_iou():
    assert clamp_box((-5, -5, 20, 20), 10, 10) == (0, 0, 10, 10)
    assert clamp_box((20, 20, 5, 5), 10, 10) is None
    assert box_iou((0, 0, 2, 2), (1, 0, 2, 2)) == pytest.approx(2 / 6)
    assert box_iou((0, 0, 1, 1), (5, 5, 1, 1)) == 0.0


def _at_center(cx: float, cy: float = 0.0) -> Pose:
    return standing_pose(bbox=(cx - 1, cy - 1, 2, 2))


def test_nearest_poses_examples():
    q = _at_center(0)
    only = _at_center(4)
    assert nearest_poses(q, [only], 3) == [only]
    pool = [_at_center(5), _at_center(2), _at_center(9)]
    assert nearest_poses(q, pool, 2) == [pool[1], pool[0]]
    left, right = _at_center(-3), _at_center(3)
    assert nearest_poses(q, [right, left], 1) == [right]
    assert nearest_poses(q, [], 4) == []
    with pytest.raises(ValueError):
        nearest_poses(q, pool, 0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-50, 50), min_size=1, max_size=10), st.integers(1, 12))
def test_nearest_poses_is_prefix_of_full_sort(xs, n):
    q = _at_center(0)
    pool = [_at_center(float(x)) for x in xs]
    full = nearest_poses(q, pool, len(pool))
    assert nearest_poses(q, pool, n) == full[:n]
    dist = [abs(pose.center[0]) for pose in full]
    assert dist == sorted(dist)


def test_load_sigmas(tmp_path):
    path = tmp_path / "sig.txt"
    path.write_text(" ".join(["0.05"] * 15))
    assert np.allclose(load_sigmas(path), 0.05)
    path.write_text(" ".join(["0.05"] * 14))
    with pytest.raises(ValueError, match="expected 15"):
        load_sigmas(path)
    path.write_text(" ".join(["0.05"] * 14 + ["-1"]))
    with pytest.raises(ValueError):
        load_sigmas(path)
