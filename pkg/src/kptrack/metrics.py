"""Keypoint tracking metrics: per-joint MOTA with identity switches, per-joint AP,
and a confidence-threshold sweep.

Predicted and ground-truth keypoints of one joint are matched per frame
within a head-size normalised distance gate. Each keypoint inherits the
track id of its pose.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from scipy.optimize import linear_sum_assignment

from .dataio import SequenceFile
from .domain import JOINT_GROUPS, JOINT_NAMES, NUM_JOINTS, Frame, Pose, oks

HEAD_BOTTOM, HEAD_TOP = 1, 2
REPORT_COLUMNS = tuple(JOINT_GROUPS) + ("Total",)


@dataclass(frozen=True)
class MatchConfig:
    # gate radius as a fraction of the ground-truth head size
    threshold: float = 0.5
    # head size used when the ground truth head segment is degenerate, as a
    # fraction of the pose box height
    fallback_head_fraction: float = 0.2

    def __post_init__(self):
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")


def head_size(gt: Pose, config: MatchConfig = MatchConfig()) -> float:
    d = float(np.hypot(*(gt.xy[HEAD_TOP] - gt.xy[HEAD_BOTTOM])))
    if d > 0:
        return d
    box = gt.box
    return config.fallback_head_fraction * (box[3] if box is not None else 0.0)


class EvaluationError(ValueError):
    pass


Videos = Union[SequenceFile, Sequence[SequenceFile]]


def _as_videos(x: Videos) -> list[SequenceFile]:
    return [x] if isinstance(x, SequenceFile) else list(x)


def _paired(pred: Videos, gt: Videos) -> list[tuple[SequenceFile, SequenceFile]]:
    pv, gv = _as_videos(pred), _as_videos(gt)
    gt_by_id = {g.video_id: g for g in gv}
    if len(gt_by_id) != len(gv):
        raise EvaluationError("duplicate ground-truth video ids")
    out = []
    for pseq in pv:
        g = gt_by_id.get(pseq.video_id)
        if g is None:
            raise EvaluationError(f"no ground truth for video {pseq.video_id}")
        missing = sorted({f.index for f in pseq.frames} - {f.index for f in g.frames})
        if missing:
            raise EvaluationError(f"video {pseq.video_id}: ground truth lacks frame {missing[0]}")
        out.append((pseq, g))
    return out


def _joint_points(poses: Sequence[Pose], j: int):
    """Visible keypoints of joint ``j``: (xy, track ids, confidences, pose indices)."""
    idx = [i for i, pose in enumerate(poses) if pose.visible[j]]
    xy = np.array([poses[i].xy[j] for i in idx]).reshape(-1, 2)
    tids = [poses[i].track_id for i in idx]
    conf = np.array([poses[i].confidence[j] for i in idx])
    return xy, tids, conf, idx


def match_joint(pred: Sequence[Pose], gt: Sequence[Pose], j: int, config: MatchConfig = MatchConfig()):
    """Gated one-to-one matching of joint ``j``.

    The most pairs possible are matched, and among those the smallest total
    distance. Returns ``(pairs of (pred pose index, gt pose index), n_pred, n_gt)``.
    """
    pxy, _, _, pidx = _joint_points(pred, j)
    gxy, _, _, gidx = _joint_points(gt, j)
    if not len(pidx) or not len(gidx):
        return [], len(pidx), len(gidx)
    radius = np.array([config.threshold * head_size(gt[i], config) for i in gidx])
    dist = np.linalg.norm(pxy[:, None, :] - gxy[None, :, :], axis=2)
    ok = dist <= radius[None, :]
    if not ok.any():
        return [], len(pidx), len(gidx)
    # a gated-out pair costs more than any set of valid ones, so cardinality wins first
    big = 1.0 + float(dist[ok].sum())
    cost = np.where(ok, dist, big * (len(pidx) + len(gidx)))
    r, c = linear_sum_assignment(cost)
    pairs = [(pidx[a], gidx[b]) for a, b in zip(r, c) if ok[a, b]]
    return sorted(pairs), len(pidx), len(gidx)


@dataclass(frozen=True)
class MotaReport:
    fn: np.ndarray
    fp: np.ndarray
    idsw: np.ndarray
    gt: np.ndarray

    @property
    def mota(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.gt > 0, 1.0 - (self.fn + self.fp + self.idsw) / np.maximum(self.gt, 1), np.nan)

    @property
    def idsw_pct(self) -> np.ndarray:
        return np.where(self.gt > 0, 100.0 * self.idsw / np.maximum(self.gt, 1), np.nan)

    @property
    def total_mota(self) -> float:
        return _nanmean(self.mota)

    @property
    def total_idsw_pct(self) -> float:
        return _nanmean(self.idsw_pct)

    def __add__(self, other: "MotaReport") -> "MotaReport":
        return MotaReport(self.fn + other.fn, self.fp + other.fp, self.idsw + other.idsw, self.gt + other.gt)

    def grouped(self, values: np.ndarray) -> dict[str, float]:
        out = {name: _nanmean(values[list(js)]) for name, js in JOINT_GROUPS.items()}
        out["Total"] = _nanmean(values)
        return out


def _nanmean(v: np.ndarray) -> float:
    v = np.asarray(v, dtype=float)
    return float(np.mean(v[~np.isnan(v)])) if np.any(~np.isnan(v)) else float("nan")


def _zeros() -> np.ndarray:
    return np.zeros(NUM_JOINTS, dtype=np.int64)


def evaluate_mota(pred: Videos, gt: Videos, config: MatchConfig = MatchConfig()) -> MotaReport:
    """Per-joint FN/FP/IDSW counts summed over frames and videos.

    An identity switch is counted when a ground-truth track is matched to a
    different predicted id than at its previous match on that joint.
    """
    fn, fp, idsw, total = _zeros(), _zeros(), _zeros(), _zeros()
    for pseq, gseq in _paired(pred, gt):
        last: dict[tuple[int, int], int] = {}
        for f in pseq.frames:
            g = gseq.frame(f.index)
            for j in range(NUM_JOINTS):
                pairs, n_pred, n_gt = match_joint(f.poses, g.poses, j, config)
                fn[j] += n_gt - len(pairs)
                fp[j] += n_pred - len(pairs)
                total[j] += n_gt
                for pi, gi in pairs:
                    key = (g.poses[gi].track_id, j)
                    pid = f.poses[pi].track_id
                    if key in last and last[key] != pid:
                        idsw[j] += 1
                    last[key] = pid
        # ground-truth frames with no prediction frame still count as misses
        predicted = {f.index for f in pseq.frames}
        for g in gseq.frames:
            if g.index not in predicted:
                for j in range(NUM_JOINTS):
                    n = sum(int(pose.visible[j]) for pose in g.poses)
                    fn[j] += n
                    total[j] += n
    return MotaReport(fn, fp, idsw, total)


def average_precision(confidences: np.ndarray, is_tp: np.ndarray, num_gt: int) -> float:
    """Area under the interpolated precision-recall curve (all-point)."""
    if num_gt == 0:
        return float("nan")
    if len(confidences) == 0:
        return 0.0
    order = np.argsort(-np.asarray(confidences), kind="stable")
    tp = np.asarray(is_tp, dtype=float)[order]
    ctp, cfp = np.cumsum(tp), np.cumsum(1.0 - tp)
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    r = np.concatenate([[0.0], recall, [recall[-1]]])
    prec = np.concatenate([[1.0], precision, [0.0]])
    prec = np.maximum.accumulate(prec[::-1])[::-1]
    return float(np.sum((r[1:] - r[:-1]) * prec[1:]))


@dataclass(frozen=True)
class APReport:
    ap: np.ndarray  # (15,) per joint

    @property
    def total(self) -> float:
        return _nanmean(self.ap)

    def grouped(self) -> dict[str, float]:
        out = {name: _nanmean(self.ap[list(js)]) for name, js in JOINT_GROUPS.items()}
        out["Total"] = self.total
        return out


def evaluate_ap(pred: Videos, gt: Videos, config: MatchConfig = MatchConfig()) -> APReport:
    """Per-joint AP: predictions in descending confidence claim the nearest
    unclaimed ground truth inside the gate."""
    ap = np.zeros(NUM_JOINTS)
    pairs = _paired(pred, gt)
    for j in range(NUM_JOINTS):
        confs, tps, num_gt = [], [], 0
        for pseq, gseq in pairs:
            for f in pseq.frames:
                g = gseq.frame(f.index)
                pxy, _, pconf, _ = _joint_points(f.poses, j)
                gxy, _, _, gidx = _joint_points(g.poses, j)
                num_gt += len(gidx)
                radius = np.array([config.threshold * head_size(g.poses[i], config) for i in gidx])
                taken = np.zeros(len(gidx), bool)
                for k in np.argsort(-pconf, kind="stable"):
                    hit = False
                    if len(gidx):
                        d = np.linalg.norm(gxy - pxy[k], axis=1)
                        d[taken | (d > radius)] = np.inf
                        m = int(np.argmin(d))
                        if np.isfinite(d[m]):
                            taken[m] = hit = True
                    confs.append(pconf[k])
                    tps.append(hit)
            num_gt += sum(
                sum(int(pose.visible[j]) for pose in g.poses)
                for g in gseq.frames
                if g.index not in {f.index for f in pseq.frames}
            )
        ap[j] = average_precision(np.array(confs), np.array(tps, bool), num_gt)
    return APReport(ap)


def mean_oks_to_gt(pred: Videos, gt: Videos, sigmas: Optional[Sequence[float]] = None) -> float:
    """Mean over ground-truth poses of the best OKS any prediction in the same
    frame reaches against it (0 for a pose nobody covers)."""
    values = []
    for pseq, gseq in _paired(pred, gt):
        predicted = {f.index: f.poses for f in pseq.frames}
        for g in gseq.frames:
            cands = predicted.get(g.index, ())
            for ref in g.poses:
                values.append(max((oks(c, ref, sigmas) for c in cands), default=0.0))
    return float(np.mean(values)) if values else float("nan")


def apply_confidence_threshold(seq: SequenceFile, threshold: float) -> SequenceFile:
    """Hide keypoints below ``threshold``; poses left with nothing visible are dropped."""
    frames = []
    for f in seq.frames:
        poses = []
        for pose in f.poses:
            vis = pose.visible & (pose.confidence >= threshold)
            if vis.any():
                poses.append(pose if np.array_equal(vis, pose.visible) else pose.with_visibility(vis))
        frames.append(Frame(f.index, f.width, f.height, tuple(poses)))
    return seq.with_frames(frames)


@dataclass(frozen=True)
class SweepRow:
    threshold: float
    ap: float
    idsw_pct: float
    mota: float


def sweep_confidence_threshold(pred: Videos, gt: Videos, thresholds: Iterable[float],
                               config: MatchConfig = MatchConfig()) -> list[SweepRow]:
    rows = []
    for thr in thresholds:
        filtered = [apply_confidence_threshold(seq, thr) for seq in _as_videos(pred)]
        m = evaluate_mota(filtered, gt, config)
        a = evaluate_ap(filtered, gt, config)
        rows.append(SweepRow(float(thr), a.total, m.total_idsw_pct, m.total_mota))
    return rows


# -- reports -------------------------------------------------------------------

def _fmt(v: float) -> str:
    return "nan" if np.isnan(v) else f"{v:.4f}"


def report_rows(mota: MotaReport, ap: APReport) -> list[tuple[str, dict[str, float]]]:
    return [
        ("AP", {k: 100 * v for k, v in ap.grouped().items()}),
        ("MOTA", {k: 100 * v for k, v in mota.grouped(mota.mota).items()}),
        ("%IDSW", mota.grouped(mota.idsw_pct)),
    ]


def write_report_csv(mota: MotaReport, ap: APReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("metric",) + REPORT_COLUMNS)
        for name, vals in report_rows(mota, ap):
            w.writerow([name] + [_fmt(vals[c]) for c in REPORT_COLUMNS])


def write_joint_counts_csv(mota: MotaReport, ap: APReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("joint", "gt", "fn", "fp", "idsw", "mota", "ap"))
        for j, name in enumerate(JOINT_NAMES):
            w.writerow([name, mota.gt[j], mota.fn[j], mota.fp[j], mota.idsw[j], _fmt(mota.mota[j]), _fmt(ap.ap[j])])


def format_summary(mota: MotaReport, ap: APReport) -> str:
    head = f"{'':8s}" + "".join(f"{c:>8s}" for c in REPORT_COLUMNS)
    lines = [head]
    for name, vals in report_rows(mota, ap):
        lines.append(f"{name:8s}" + "".join(f"{vals[c]:8.1f}" for c in REPORT_COLUMNS))
    return "\n".join(lines) + "\n"


def write_sweep_csv(rows: Sequence[SweepRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("threshold", "ap", "idsw_pct", "mota"))
        for r in rows:
            w.writerow([f"{r.threshold:.4f}", _fmt(r.ap), _fmt(r.idsw_pct), _fmt(r.mota)])
