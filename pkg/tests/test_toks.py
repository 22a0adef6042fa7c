from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kptrack.dataio import NoiseModel, SynthConfig, generate_synthetic
from kptrack.domain import Frame, mutual_oks, oks
from kptrack.metrics import mean_oks_to_gt
from kptrack.toks import (
    EstimationError,
    OracleJitterEstimator,
    ToksConfig,
    ToksStats,
    suppress_duplicates,
    threshold_pose,
    toks_refine,
)

from helpers import pose_at, standing_pose

WIDTH, HEIGHT = 960, 540


def with_conf(pose, value):
    return replace(pose, keypoints=tuple(replace(k, confidence=value) for k in pose.keypoints))


class EchoEstimator:
    """Returns the pose whose box was handed in (identity re-estimation)."""

    def __init__(self, poses):
        self.by_box = {pose.box: pose for pose in poses}

    def estimate(self, frame_ref, box):
        return self.by_box[tuple(box)]


class BrokenEstimator:
    def estimate(self, frame_ref, box):
        raise EstimationError("boom")


def test_config_validation():
    with pytest.raises(ValueError):
        ToksConfig(alpha=0.9)
    with pytest.raises(ValueError):
        ToksConfig(oks_threshold=1.5)


def test_empty_previous_frame_returns_thresholded_detections():
    dets = [standing_pose(200, 300, bbox=(150, 200, 100, 150)), standing_pose(600, 300, bbox=(550, 200, 100, 150))]
    out = toks_refine([], dets, OracleJitterEstimator({}), ToksConfig())
    assert out == [threshold_pose(d, ToksConfig()) for d in dets] == dets


def test_thresholds_drop_low_box_and_keypoint_confidence():
    cfg = ToksConfig()
    weak_box = replace(standing_pose(), score=0.1)
    assert threshold_pose(weak_box, cfg) is None
    conf = np.ones(15)
    conf[:4] = 0.05
    pose = standing_pose(confidence=conf)
    kept = threshold_pose(pose, cfg)
    assert kept.num_visible == 11 and not kept.visible[:4].any()
    assert threshold_pose(standing_pose(confidence=np.full(15, 0.01)), cfg) is None


def test_missed_person_recovered_by_oracle():
    gt_prev = standing_pose(400, 300, track_id=0, frame_index=0)
    gt_cur = standing_pose(406, 301, track_id=0, frame_index=1)
    other = standing_pose(800, 300, track_id=1, frame_index=1)
    truth = {1: Frame(1, WIDTH, HEIGHT, (gt_cur, other))}
    est = OracleJitterEstimator(truth, sigma=2.0, dropout_p=0.0, seed=3)
    detections = [replace(other, track_id=None)]
    out = toks_refine([gt_prev], detections, est, ToksConfig(), frame_ref=1, width=WIDTH, height=HEIGHT)
    recovered = [pose for pose in out if oks(pose, gt_cur) >= 0.9]
    assert len(recovered) == 1
    assert all(pose.track_id is None for pose in out)
    assert len(out) == 2


def displaced_to_oks(pose, target):
    lo, hi = 0.0, 200.0
    for _ in range(100):
        mid = (lo + hi) / 2
        if mutual_oks(pose_at(pose.xy + [mid, 0.0]), pose) > target:
            lo = mid
        else:
            hi = mid
    return pose_at(pose.xy + [lo, 0.0])


def test_duplicate_candidates_keep_most_confident():
    base = standing_pose(400, 300)
    shifted = displaced_to_oks(base, 0.8)
    a = with_conf(base, 0.6)
    b = with_conf(shifted, 0.9)
    assert mutual_oks(a, b) == pytest.approx(0.8, abs=1e-6)
    stats = ToksStats()
    out = toks_refine([], [a, b], None, ToksConfig(), stats=stats)
    assert out == [b]
    assert stats.suppressed == 1


def test_suppression_keeps_order_and_is_greedy():
    base = standing_pose(400, 300)
    near = displaced_to_oks(base, 0.5)
    far = standing_pose(800, 300)
    kept = suppress_duplicates([with_conf(near, 0.5), with_conf(far, 0.2), with_conf(base, 0.7)], 0.35)
    assert [k.mean_confidence() for k in kept] == pytest.approx([0.2, 0.7])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.05, 0.95))
def test_output_has_no_overlapping_pair(seed, threshold):
    rng = np.random.default_rng(seed)
    cands = []
    for _ in range(int(rng.integers(1, 9))):
        pose = standing_pose(rng.uniform(150, 450), rng.uniform(250, 350), confidence=rng.uniform(0.2, 1, 15))
        cands.append(pose)
    out = toks_refine([], cands, None, ToksConfig(oks_threshold=threshold))
    for i in range(len(out)):
        for j in range(i + 1, len(out)):
            assert mutual_oks(out[i], out[j]) < threshold


def test_identity_estimator_with_unit_alpha_is_dedup_threshold():
    cfg = ToksConfig(alpha=1.0)
    prev = [standing_pose(300, 300, bbox=(240, 200, 120, 160)), standing_pose(700, 300, bbox=(640, 200, 120, 160))]
    dets = [with_conf(standing_pose(302, 300), 0.5), with_conf(standing_pose(500, 300), 0.8)]
    out = toks_refine(prev, dets, EchoEstimator(prev), cfg, width=WIDTH, height=HEIGHT)
    expected = suppress_duplicates(
        [threshold_pose(pose, cfg) for pose in dets] + [replace(threshold_pose(pose, cfg), bbox=None) for pose in prev],
        cfg.oks_threshold,
    )
    assert [pose.xy.tolist() for pose in out] == [pose.xy.tolist() for pose in expected]


def test_estimator_failures_are_counted_not_fatal():
    stats = ToksStats()
    det = standing_pose(300, 300)
    out = toks_refine([standing_pose(600, 300)], [det], BrokenEstimator(), ToksConfig(), width=WIDTH, height=HEIGHT, stats=stats)
    assert out == [det]
    assert stats.failed == 1 and stats.propagated == 0


def test_oracle_estimator_is_order_independent_and_box_bounded():
    gt = standing_pose(400, 300, frame_index=2)
    est = OracleJitterEstimator({2: Frame(2, WIDTH, HEIGHT, (gt,))}, sigma=5.0, dropout_p=0.2, seed=1)
    box = (300.0, 150.0, 200.0, 250.0)
    a = est.estimate(2, box)
    est.estimate(2, (0.0, 0.0, 900.0, 500.0))
    b = est.estimate(2, box)
    assert a == b
    xy = a.xy[a.visible]
    assert np.all((xy[:, 0] >= 300) & (xy[:, 0] <= 500) & (xy[:, 1] >= 150) & (xy[:, 1] <= 400))
    with pytest.raises(EstimationError):
        est.estimate(2, (800.0, 0.0, 50.0, 50.0))
    with pytest.raises(EstimationError):
        est.estimate(9, box)


def test_next_frame_flag_adds_sources():
    gt_cur = standing_pose(400, 300, frame_index=1)
    est = OracleJitterEstimator({1: Frame(1, WIDTH, HEIGHT, (gt_cur,))})
    nxt = [standing_pose(404, 300)]
    off = toks_refine([], [], est, ToksConfig(), frame_ref=1, width=WIDTH, height=HEIGHT, next_poses=nxt)
    on = toks_refine([], [], est, ToksConfig(use_next_frame=True), frame_ref=1, width=WIDTH, height=HEIGHT, next_poses=nxt)
    assert off == [] and len(on) == 1


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_perfect_oracle_never_lowers_mean_oks(seed):
    cfg = SynthConfig(num_persons=3, num_frames=20, seed=seed, noise=NoiseModel(3.0, 0.05, 0.3, 0.0))
    gt, det = generate_synthetic(cfg)
    truth = {f.index: f for f in gt.frames}
    est = OracleJitterEstimator(truth, sigma=0.0)
    refined, prev = [], []
    for f in det.frames:
        out = toks_refine(prev, f.poses, est, ToksConfig(), f.index, WIDTH, HEIGHT)
        refined.append(Frame(f.index, WIDTH, HEIGHT, tuple(out)))
        prev = out
    assert mean_oks_to_gt(det.with_frames(refined), gt) >= mean_oks_to_gt(det, gt)
