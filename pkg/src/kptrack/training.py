"""Pair mining, class-balanced sampling, the warmup/decay schedule, Adam and the training loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np

from . import kernels
from . import tensor as ag
from .dataio import SequenceFile
from .matcher import MatcherConfig, forward, match_scores
from .tokenizer import PLACEHOLDER_TOKEN, SEQ_LEN, TokenBatch, TokenGrid, stack_pairs, tokenize_pair, tokenize_pair_relative

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    peak_lr: float = 1e-4
    warmup_fraction: float = 0.01
    epochs: int = 25
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # examples drawn per epoch; None means one pass worth of the dataset size
    samples_per_epoch: Optional[int] = None
    grad_clip: Optional[float] = None
    # random whole-pair grid shifts and left/right mirroring of training batches
    augment: bool = True

    def __post_init__(self):
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in (0, 1)")
        for name in ("batch_size", "peak_lr", "epochs", "adam_eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.samples_per_epoch is not None and self.samples_per_epoch <= 0:
            raise ValueError("samples_per_epoch must be positive")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")

    def steps_per_epoch(self, dataset_size: int) -> int:
        n = self.samples_per_epoch or dataset_size
        return max(1, math.ceil(n / self.batch_size))

    def to_dict(self) -> dict:
        from dataclasses import asdict

        return asdict(self)


@dataclass(frozen=True)
class PairSource:
    video_id: str
    frame: int
    past_frame: int
    gap: int


@dataclass(frozen=True)
class PairDataset:
    """Labelled token pairs plus where each came from."""

    batch: TokenBatch
    sources: tuple[PairSource, ...] = ()

    def __post_init__(self):
        if self.batch.labels is None:
            raise ValueError("pair dataset needs labels")
        if self.sources and len(self.sources) != len(self.batch):
            raise ValueError("one source per pair")

    def __len__(self) -> int:
        return len(self.batch)

    @property
    def labels(self) -> np.ndarray:
        return self.batch.labels

    @property
    def num_positive(self) -> int:
        return int(self.labels.sum())

    @property
    def num_negative(self) -> int:
        return len(self) - self.num_positive

    def counts(self) -> dict[str, int]:
        gaps = np.array([s.gap for s in self.sources]) if self.sources else np.zeros(0, int)
        out = {"pairs": len(self), "positive": self.num_positive, "negative": self.num_negative}
        for d in sorted(set(gaps.tolist())):
            out[f"gap_{d}"] = int((gaps == d).sum())
        return out

    def take(self, idx) -> "PairDataset":
        idx = np.asarray(idx)
        sources = tuple(self.sources[i] for i in idx) if self.sources else ()
        return PairDataset(self.batch.take(idx), sources)

    def balanced_subset(self, seed: int = 0) -> "PairDataset":
        """Equal numbers of each class, sampled without replacement."""
        rng = np.random.default_rng(seed)
        pos = np.flatnonzero(self.labels == 1)
        neg = np.flatnonzero(self.labels == 0)
        n = min(len(pos), len(neg))
        idx = np.sort(np.concatenate([rng.choice(pos, n, replace=False), rng.choice(neg, n, replace=False)]))
        return self.take(idx)

    @staticmethod
    def concat(parts: Sequence["PairDataset"]) -> "PairDataset":
        parts = [part for part in parts if len(part)]
        if not parts:
            return _empty_dataset()
        b = TokenBatch(
            np.concatenate([part.batch.position for part in parts]),
            np.concatenate([part.batch.type for part in parts]),
            np.concatenate([part.batch.segment for part in parts]),
            np.concatenate([part.batch.attn_mask for part in parts]),
            np.concatenate([part.batch.labels for part in parts]),
        )
        return PairDataset(b, tuple(s for part in parts for s in part.sources))


def _empty_dataset() -> PairDataset:
    z = np.zeros((0, SEQ_LEN), dtype=np.int64)
    return PairDataset(TokenBatch(z, z.copy(), z.copy(), np.zeros((0, SEQ_LEN), bool), np.zeros(0, np.int64)))


def mine_pairs(
    sequences: Iterable[SequenceFile],
    delta: int = 4,
    negatives_per_positive: Optional[float] = None,
    seed: int = 0,
    grid: TokenGrid = TokenGrid(),
    relative: bool = False,
) -> PairDataset:
    """Every same-track pair at gaps 1..delta is a positive; different-track
    pairs from the same two frames are negatives.

    ``negatives_per_positive=None`` keeps all negatives; otherwise each frame
    pair contributes ``round(ratio * positives)`` of them, sampled.
    """
    if delta < 1:
        raise ValueError("delta must be >= 1")
    tok = tokenize_pair_relative if relative else tokenize_pair
    rng = np.random.default_rng(seed)
    pairs, sources = [], []
    for seq in sequences:
        frames = {f.index: f for f in seq.frames}
        for f in seq.frames:
            current = [pose for pose in f.poses if pose.track_id is not None and pose.num_visible]
            for d in range(1, delta + 1):
                past_frame = frames.get(f.index - d)
                if past_frame is None:
                    continue
                past = [pose for pose in past_frame.poses if pose.track_id is not None and pose.num_visible]
                pos, neg = [], []
                for a in current:
                    for b in past:
                        (pos if a.track_id == b.track_id else neg).append((a, b))
                if negatives_per_positive is not None:
                    k = min(len(neg), int(round(negatives_per_positive * len(pos))))
                    keep = np.sort(rng.choice(len(neg), size=k, replace=False)) if k else []
                    neg = [neg[i] for i in keep]
                for label, group in ((True, pos), (False, neg)):
                    for a, b in group:
                        pairs.append(tok(a, b, d, seq.width, seq.height, grid, delta=delta, label=label))
                        sources.append(PairSource(seq.video_id, f.index, past_frame.index, d))
    if not pairs:
        return _empty_dataset()
    ds = PairDataset(stack_pairs(pairs), tuple(sources))
    logger.info("mined %s", ds.counts())
    return ds


def balanced_batches(dataset: PairDataset, batch_size: int, seed: int = 0) -> Iterator[TokenBatch]:
    """Endless batches drawn with replacement so both classes are equally likely."""
    labels = dataset.labels
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("balanced sampling needs both classes")
    weights = np.where(labels == 1, 0.5 / n_pos, 0.5 / n_neg)
    cdf = np.cumsum(weights)
    cdf /= cdf[-1]
    rng = np.random.default_rng(seed)
    while True:
        idx = np.searchsorted(cdf, rng.random(batch_size), side="right")
        yield dataset.batch.take(np.minimum(idx, len(labels) - 1))


# joint slot permutation that swaps left and right joints
_MIRROR = np.array([0, 1, 2, 4, 3, 6, 5, 8, 7, 10, 9, 12, 11, 14, 13])
_MIRROR_PAIR = np.concatenate([_MIRROR, _MIRROR + len(_MIRROR)])


def augment_batch(batch: TokenBatch, grid: TokenGrid, rng: np.random.Generator, shift: bool = True) -> TokenBatch:
    """Mirror half the pairs left-right and move each pair by a random whole-cell offset.

    Both poses of a pair move together and every visible keypoint stays on
    the grid, so labels are unchanged.
    """
    gw, gh = grid.grid_w, grid.grid_h
    mask = batch.attn_mask
    cell = batch.position - 1
    row, col = cell // gw, cell % gw
    flip = rng.random(len(cell)) < 0.5
    col = np.where(flip[:, None], gw - 1 - col, col)
    row = np.where(flip[:, None], row[:, _MIRROR_PAIR], row)
    col = np.where(flip[:, None], col[:, _MIRROR_PAIR], col)
    mask = np.where(flip[:, None], mask[:, _MIRROR_PAIR], mask)
    if shift:
        any_vis = mask.any(axis=1)
        lo_r = -np.where(mask, row, gh).min(axis=1)
        hi_r = gh - 1 - np.where(mask, row, -1).max(axis=1)
        lo_c = -np.where(mask, col, gw).min(axis=1)
        hi_c = gw - 1 - np.where(mask, col, -1).max(axis=1)
        dr = lo_r + np.floor(rng.random(len(cell)) * (hi_r - lo_r + 1)).astype(np.int64)
        dc = lo_c + np.floor(rng.random(len(cell)) * (hi_c - lo_c + 1)).astype(np.int64)
        row = row + np.where(any_vis, dr, 0)[:, None]
        col = col + np.where(any_vis, dc, 0)[:, None]
    position = np.where(mask, row * gw + col + 1, PLACEHOLDER_TOKEN)
    return TokenBatch(position, batch.type, batch.segment, mask, batch.labels)


def warmup_steps(total_steps: int, config: TrainConfig) -> int:
    return max(1, math.ceil(config.warmup_fraction * total_steps))


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear ramp from 0 to the peak, then linear decay to 0 at ``total_steps``."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    w = warmup_steps(total_steps, config)
    if step <= 0:
        return 0.0
    if step < w:
        return config.peak_lr * step / w
    if step >= total_steps:
        return 0.0
    return config.peak_lr * (total_steps - step) / (total_steps - w)


class Adam:
    """Adam over a dict of float arrays, updated in place."""

    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step_count = 0

    def step(self, params: dict, grads: dict, lr: float):
        self.step_count += 1
        for name, param in params.items():
            g = grads[name]
            if g is None:
                continue
            kernels.adam_update(
                param.reshape(-1), np.ascontiguousarray(g, dtype=param.dtype).reshape(-1),
                self.m[name].reshape(-1), self.v[name].reshape(-1),
                lr, self.beta1, self.beta2, self.eps, self.step_count,
            )


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step
        self.value = value


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    step: int
    lr: float
    loss: float
    match_accuracy: float


@dataclass
class TrainResult:
    params: dict
    log: list[EpochMetrics] = field(default_factory=list)


def match_accuracy(params: dict, config: MatcherConfig, dataset: PairDataset) -> float:
    """Fraction of pairs whose match decision (score >= 0.5) agrees with the label."""
    if len(dataset) == 0:
        return float("nan")
    scores = match_scores(params, config, dataset.batch)
    return float(np.mean((scores >= 0.5) == (dataset.labels == 1)))


def _clip(grads: dict, max_norm: float):
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values() if g is not None))
    if total > max_norm:
        s = max_norm / total
        for g in grads.values():
            if g is not None:
                g *= s


def train(
    params: dict,
    model_config: MatcherConfig,
    dataset: PairDataset,
    config: TrainConfig = TrainConfig(),
    eval_set: Optional[PairDataset] = None,
    on_epoch: Optional[Callable[[EpochMetrics], None]] = None,
    grid: TokenGrid = TokenGrid(),
    relative: bool = False,
) -> TrainResult:
    """Train a copy of ``params``; the input dict is left untouched.

    The per-epoch ``match_accuracy`` is measured on ``eval_set`` when given,
    otherwise on the training batches seen during that epoch.
    """
    params = {k: np.array(v, dtype=np.float32, copy=True) for k, v in params.items()}
    spe = config.steps_per_epoch(len(dataset))
    total = spe * config.epochs
    opt = Adam(params, config.beta1, config.beta2, config.adam_eps)
    batches = balanced_batches(dataset, config.batch_size, seed=config.seed)
    rng = np.random.default_rng([config.seed, 1])
    aug_rng = np.random.default_rng([config.seed, 2])
    leaves = {k: ag.Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
    result = TrainResult(params)
    step = 0
    for epoch in range(1, config.epochs + 1):
        losses, correct, seen = [], 0, 0
        for _ in range(spe):
            batch = next(batches)
            if config.augment:
                batch = augment_batch(batch, grid, aug_rng, shift=not relative)
            for leaf in leaves.values():
                leaf.grad = None
            with ag.Tape() as tape:
                logits, _ = forward(leaves, model_config, batch, training=True, rng=rng, keep_attention=False)
                loss = ag.cross_entropy(logits, batch.labels)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NonFiniteLossError(step, value)
            tape.backward(loss)
            grads = {k: leaf.grad for k, leaf in leaves.items()}
            if config.grad_clip is not None:
                _clip(grads, config.grad_clip)
            step += 1
            opt.step(params, grads, lr_at(step, total, config))
            losses.append(value)
            correct += int(np.sum((logits.data[:, 1] >= logits.data[:, 0]) == (batch.labels == 1)))
            seen += len(batch)
        acc = match_accuracy(params, model_config, eval_set) if eval_set is not None else correct / seen
        m = EpochMetrics(epoch, step, lr_at(step, total, config), float(np.mean(losses)), acc)
        result.log.append(m)
        logger.info("epoch %d step %d lr %.3g loss %.4f acc %.4f", m.epoch, m.step, m.lr, m.loss, m.match_accuracy)
        if on_epoch is not None:
            on_epoch(m)
    return result


METRICS_COLUMNS = ("epoch", "step", "lr", "loss", "match_accuracy")


def write_metrics_csv(log: Sequence[EpochMetrics], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for m in log:
            w.writerow([m.epoch, m.step, repr(m.lr), repr(m.loss), repr(m.match_accuracy)])
