"""Transformer pair matcher: summed token embeddings, post-LN self-attention
blocks, a first-token pooler and a two-way match classifier.

Parameters live in a plain ``dict[str, np.ndarray]`` whose insertion order
is the declared order (see :func:`param_shapes`); the checkpoint format
preserves it.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import tensor as ag
from .domain import JOINT_NAMES, NUM_JOINTS, Pose
from .tokenizer import (
    SEQ_LEN,
    TokenBatch,
    TokenGrid,
    TokenizedPair,
    stack_pairs,
    tokenize_pair,
    tokenize_pair_relative,
)

MASK_VALUE = -1e4
MATCH = 1  # classifier index of the "same person" class
EMBEDDINGS = ("position", "type", "segment")

ModelParams = dict  # name -> np.ndarray, in declared order


@dataclass(frozen=True)
class MatcherConfig:
    num_layers: int = 4
    hidden: int = 128
    intermediate: int = 128
    heads: int = 4
    dropout_p: float = 0.1
    max_segment: int = 4
    position_vocab: int = 432
    type_vocab: int = NUM_JOINTS
    layer_norm_eps: float = 1e-12
    # projection of the concatenated heads before the residual; off by default
    attn_output_proj: bool = False
    # layer norm over the summed embeddings before the first block
    embedding_norm: bool = True
    # which token embeddings are summed into the input (ablations drop some)
    embeddings: tuple[str, ...] = EMBEDDINGS

    def __post_init__(self):
        for name in ("num_layers", "hidden", "intermediate", "heads", "max_segment", "position_vocab", "type_vocab"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.hidden % self.heads:
            raise ValueError(f"hidden size {self.hidden} not divisible by {self.heads} heads")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        object.__setattr__(self, "embeddings", tuple(self.embeddings))
        unknown = set(self.embeddings) - set(EMBEDDINGS)
        if unknown or not self.embeddings:
            raise ValueError(f"embeddings must be a non-empty subset of {EMBEDDINGS}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def to_dict(self) -> dict:
        d = asdict(self)
        d["embeddings"] = list(self.embeddings)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MatcherConfig":
        d = dict(d)
        if "embeddings" in d:
            d["embeddings"] = tuple(d["embeddings"])
        return cls(**d)


@dataclass
class AttentionMaps:
    """Attention probabilities, shape ``(layers, heads, 30, 30)`` for one pair."""

    maps: np.ndarray
    attn_mask: Optional[np.ndarray] = None

    @property
    def num_layers(self) -> int:
        return self.maps.shape[0]

    @property
    def num_heads(self) -> int:
        return self.maps.shape[1]

    def head(self, layer: int, head: int) -> np.ndarray:
        return self.maps[layer, head]

    def keypoint_mass(self, layer: int, head: int) -> np.ndarray:
        """Attention received per token (column sums over queries), normalised to 1."""
        col = self.maps[layer, head].sum(axis=0)
        return col / col.sum()

    @staticmethod
    def token_labels() -> list[str]:
        return [f"current.{n}" for n in JOINT_NAMES] + [f"past.{n}" for n in JOINT_NAMES]


def param_shapes(config: MatcherConfig) -> list[tuple[str, tuple[int, ...]]]:
    hidden, inter = config.hidden, config.intermediate
    vocab = {"position": config.position_vocab, "type": config.type_vocab, "segment": config.max_segment}
    # ablated embeddings have no table at all
    shapes = [(f"embeddings.{e}", (vocab[e], hidden)) for e in EMBEDDINGS if e in config.embeddings]
    if config.embedding_norm:
        shapes += [("embeddings.norm.gain", (hidden,)), ("embeddings.norm.bias", (hidden,))]
    for i in range(config.num_layers):
        prefix = f"layers.{i}."
        for proj in ("query", "key", "value"):
            shapes += [(prefix + f"attn.{proj}.weight", (hidden, hidden)), (prefix + f"attn.{proj}.bias", (hidden,))]
        if config.attn_output_proj:
            shapes += [(prefix + "attn.output.weight", (hidden, hidden)), (prefix + "attn.output.bias", (hidden,))]
        shapes += [
            (prefix + "attn_norm.gain", (hidden,)),
            (prefix + "attn_norm.bias", (hidden,)),
            (prefix + "ffn.in.weight", (hidden, inter)),
            (prefix + "ffn.in.bias", (inter,)),
            (prefix + "ffn.out.weight", (inter, hidden)),
            (prefix + "ffn.out.bias", (hidden,)),
            (prefix + "ffn_norm.gain", (hidden,)),
            (prefix + "ffn_norm.bias", (hidden,)),
        ]
    shapes += [
        ("pooler.weight", (hidden, hidden)),
        ("pooler.bias", (hidden,)),
        ("classifier.weight", (hidden, 2)),
        ("classifier.bias", (2,)),
    ]
    return shapes


def init_params(config: MatcherConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Weights ~ N(0, 0.02); biases 0; layer-norm gains 1."""
    rng = np.random.default_rng(seed)
    params: ModelParams = {}
    for name, shape in param_shapes(config):
        if name.endswith(".gain"):
            arr = np.ones(shape)
        elif name.endswith(".bias"):
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, 0.02, size=shape)
        params[name] = arr.astype(dtype)
    return params


def count_params(config_or_params: Union[MatcherConfig, ModelParams]) -> int:
    if isinstance(config_or_params, MatcherConfig):
        return sum(int(np.prod(s)) for _, s in param_shapes(config_or_params))
    return sum(int(a.size) for a in config_or_params.values())


def count_flops(config: MatcherConfig, seq_len: int = SEQ_LEN) -> dict[str, int]:
    """Multiply-accumulate counts for one pair, by module."""
    hid, inter, n = config.hidden, config.intermediate, seq_len
    proj = 4 if config.attn_output_proj else 3
    per_layer = n * hid * hid * proj + 2 * n * n * hid + n * hid * inter * 2
    out = {
        "embeddings": n * hid * (len(config.embeddings) - 1 + (2 if config.embedding_norm else 0)),
        "transformers": config.num_layers * per_layer,
        "pooler": hid * hid,
        "classifier": hid * 2,
    }
    out["total"] = sum(out.values())
    return out


def _validate_tokens(batch: TokenBatch, config: MatcherConfig):
    checks = (
        ("position", batch.position, config.position_vocab),
        ("type", batch.type, config.type_vocab),
        ("segment", batch.segment, config.max_segment),
    )
    for name, arr, hi in checks:
        bad = (arr < 1) | (arr > hi)
        if bad.any():
            b, i = (int(v) for v in np.argwhere(bad)[0])
            raise ValueError(
                f"{name} token {int(arr[b, i])} at pair {b}, index {i} outside vocabulary [1, {hi}]"
            )


def _as_batch(pairs) -> TokenBatch:
    if isinstance(pairs, TokenBatch):
        return pairs
    if isinstance(pairs, TokenizedPair):
        return stack_pairs([pairs])
    return stack_pairs(list(pairs))


def _linear(x: ag.Tensor, w: ag.Tensor, b: ag.Tensor) -> ag.Tensor:
    return ag.add(ag.matmul(x, w), b)


def forward(
    params: dict,
    config: MatcherConfig,
    pairs,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    keep_attention: bool = True,
) -> tuple[ag.Tensor, list[np.ndarray]]:
    """Run the matcher on a batch of tokenized pairs.

    ``params`` values may be arrays or :class:`~kptrack.tensor.Tensor`s (the
    latter when training). Returns ``(logits (batch, 2), attention)`` where
    ``attention`` holds one ``(batch, heads, 30, 30)`` array per layer, or is
    empty when ``keep_attention`` is False.
    """
    batch = _as_batch(pairs)
    _validate_tokens(batch, config)
    w = {k: (v if isinstance(v, ag.Tensor) else ag.Tensor(v)) for k, v in params.items()}
    dtype = w["pooler.weight"].dtype
    if training and rng is None:
        rng = np.random.default_rng(0)
    n_pairs, n_tokens = batch.position.shape
    hidden, nh, dh = config.hidden, config.heads, config.head_dim
    p_drop = config.dropout_p

    ids = {"position": batch.position, "type": batch.type, "segment": batch.segment}
    x = None
    for name in config.embeddings:
        e = ag.embedding_lookup(w[f"embeddings.{name}"], ids[name] - 1)
        x = e if x is None else ag.add(x, e)
    if config.embedding_norm:
        x = ag.layer_norm(x, w["embeddings.norm.gain"], w["embeddings.norm.bias"], config.layer_norm_eps)
    x = ag.dropout(x, p_drop, training, rng)

    mask = np.where(batch.attn_mask, 0.0, MASK_VALUE).astype(dtype)[:, None, None, :]
    inv_sqrt = 1.0 / math.sqrt(dh)
    attention = []

    def heads(a, n):
        return ag.transpose(ag.reshape(a, (n_pairs, n, nh, dh)), (0, 2, 1, 3))

    for i in range(config.num_layers):
        prefix = f"layers.{i}."
        # Only token 0 reaches the pooler, so the last block needs queries and
        # feed-forward for that token alone unless attention maps are wanted.
        last_only = not keep_attention and i == config.num_layers - 1
        sq = 1 if last_only else n_tokens
        xq = ag.narrow(x, 1, 0, 1) if last_only else x

        q = heads(_linear(xq, w[prefix + "attn.query.weight"], w[prefix + "attn.query.bias"]), sq)
        k = heads(_linear(x, w[prefix + "attn.key.weight"], w[prefix + "attn.key.bias"]), n_tokens)
        v = heads(_linear(x, w[prefix + "attn.value.weight"], w[prefix + "attn.value.bias"]), n_tokens)
        scores = ag.add(ag.scale(ag.matmul(q, ag.transpose_last_two(k)), inv_sqrt), mask)
        probs = ag.softmax_last_dim(scores)
        if keep_attention:
            attention.append(probs.data)
        ctx = ag.matmul(ag.dropout(probs, p_drop, training, rng), v)
        ctx = ag.reshape(ag.transpose(ctx, (0, 2, 1, 3)), (n_pairs, sq, hidden))
        if config.attn_output_proj:
            ctx = _linear(ctx, w[prefix + "attn.output.weight"], w[prefix + "attn.output.bias"])
        ctx = ag.dropout(ctx, p_drop, training, rng)
        x = ag.layer_norm(ag.add(xq, ctx), w[prefix + "attn_norm.gain"], w[prefix + "attn_norm.bias"], config.layer_norm_eps)

        h = ag.gelu(_linear(x, w[prefix + "ffn.in.weight"], w[prefix + "ffn.in.bias"]))
        h = ag.dropout(_linear(h, w[prefix + "ffn.out.weight"], w[prefix + "ffn.out.bias"]), p_drop, training, rng)
        x = ag.layer_norm(ag.add(x, h), w[prefix + "ffn_norm.gain"], w[prefix + "ffn_norm.bias"], config.layer_norm_eps)

    pooled = ag.tanh(_linear(ag.select(x, 0, axis=1), w["pooler.weight"], w["pooler.bias"]))
    pooled = ag.dropout(pooled, p_drop, training, rng)
    logits = _linear(pooled, w["classifier.weight"], w["classifier.bias"])
    return logits, attention


def softmax_match(logits: np.ndarray) -> np.ndarray:
    """Probability of the match class from ``(batch, 2)`` logits."""
    z = np.asarray(logits, dtype=np.float64)
    gap = z[:, 1 - MATCH] - z[:, MATCH]
    return 1.0 / (1.0 + np.exp(gap))


def match_scores(params: dict, config: MatcherConfig, pairs, chunk: int = 256) -> np.ndarray:
    batch = _as_batch(pairs)
    if len(batch) == 0:
        return np.zeros(0)
    out = []
    for s in range(0, len(batch), chunk):
        logits, _ = forward(params, config, batch.take(slice(s, s + chunk)), keep_attention=False)
        out.append(softmax_match(logits.data))
    return np.concatenate(out)


def match_score(params: dict, config: MatcherConfig, pair: TokenizedPair) -> float:
    return float(match_scores(params, config, [pair])[0])


def extract_attention(params: dict, config: MatcherConfig, pair: TokenizedPair) -> AttentionMaps:
    _, attention = forward(params, config, [pair])
    maps = np.stack([a[0] for a in attention]).astype(np.float64)
    return AttentionMaps(maps, np.asarray(pair.attn_mask))


@dataclass
class PoseMatcher:
    """Parameters, architecture and tokenization settings bundled for the tracker."""

    params: dict
    config: MatcherConfig = field(default_factory=MatcherConfig)
    grid_w: int = 24
    grid_h: int = 18
    relative: bool = False
    calls: int = 0

    def score(self, pairs: Sequence[TokenizedPair]) -> np.ndarray:
        self.calls += len(pairs)
        return match_scores(self.params, self.config, pairs)

    def tokenize(self, current: Pose, past: Pose, gap: int, width: float, height: float) -> TokenizedPair:
        tok = tokenize_pair_relative if self.relative else tokenize_pair
        return tok(current, past, gap, width, height, TokenGrid(self.grid_w, self.grid_h), delta=self.config.max_segment)

    def score_poses(self, items: Sequence[tuple[Pose, Pose, int]], width: float, height: float) -> np.ndarray:
        """Match scores for ``(current, past, gap)`` triples."""
        return self.score([self.tokenize(cur, past, gap, width, height) for cur, past, gap in items])


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_MAGIC = b"KPTRACK\x00"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: dict, config: MatcherConfig, path: Union[str, Path], extra: Optional[dict] = None):
    """Binary container: magic, version, JSON header (config + manifest), raw blobs in order."""
    expected = param_shapes(config)
    if [n for n, _ in expected] != list(params):
        raise CheckpointError("parameter names/order do not match the config")
    manifest = []
    for name, shape in expected:
        arr = np.asarray(params[name])
        if arr.shape != shape:
            raise CheckpointError(f"{name}: shape {arr.shape} != expected {shape}")
        manifest.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
    header = json.dumps(
        {"config": config.to_dict(), "params": manifest, "extra": extra or {}}, sort_keys=True
    ).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for name, _ in expected:
            fh.write(np.ascontiguousarray(params[name]).tobytes())


def load_checkpoint(path: Union[str, Path]) -> tuple[dict, MatcherConfig, dict]:
    """Returns ``(params, config, extra)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a kptrack checkpoint (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<II", raw, off)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    off += 8
    header = json.loads(raw[off : off + hlen])
    off += hlen
    config = MatcherConfig.from_dict(header["config"])
    expected = param_shapes(config)
    if [n for n, _ in expected] != [m["name"] for m in header["params"]]:
        raise CheckpointError(f"{path}: parameter manifest does not match the embedded config")
    params: ModelParams = {}
    for (name, shape), meta in zip(expected, header["params"]):
        if tuple(meta["shape"]) != shape:
            raise CheckpointError(f"{path}: {name} has shape {meta['shape']}, config expects {list(shape)}")
        dt = np.dtype(meta["dtype"])
        nbytes = dt.itemsize * int(np.prod(shape))
        if off + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated while reading {name}")
        params[name] = np.frombuffer(raw, dtype=dt, count=int(np.prod(shape)), offset=off).reshape(shape).copy()
        off += nbytes
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return params, config, header.get("extra", {})
