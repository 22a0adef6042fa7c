"""Compare the compiled and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat N] [--batch B]

Times each row kernel at training shapes, then one full forward/backward
training step of the default matcher, under every available backend.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from kptrack import kernels
from kptrack import tensor as ag
from kptrack.matcher import MatcherConfig, forward, init_params
from kptrack.tokenizer import TokenBatch
from kptrack.training import Adam


def kernel_cases(batch: int, rng: np.random.Generator):
    tokens, hidden, heads = 30, 128, 4
    x = rng.normal(size=(batch * tokens, hidden)).astype(np.float32)
    gain, bias = np.ones(hidden, np.float32), np.zeros(hidden, np.float32)
    _, xhat, rstd = kernels.layer_norm_forward(x, gain, bias, 1e-12)
    scores = rng.normal(size=(batch * heads * tokens, tokens)).astype(np.float32)
    probs = kernels.softmax_forward(scores)
    param = rng.normal(size=407_042).astype(np.float32)
    g, m, v = param.copy(), np.zeros_like(param), np.zeros_like(param)
    return {
        "layer_norm_forward": lambda: kernels.layer_norm_forward(x, gain, bias, 1e-12),
        "layer_norm_backward": lambda: kernels.layer_norm_backward(x, xhat, rstd, gain),
        "softmax_forward": lambda: kernels.softmax_forward(scores),
        "softmax_backward": lambda: kernels.softmax_backward(scores, probs),
        "gelu_forward": lambda: kernels.gelu_forward(x),
        "gelu_backward": lambda: kernels.gelu_backward(x, x),
        "adam_update": lambda: kernels.adam_update(param, g, m, v, 1e-4, 0.9, 0.999, 1e-8, 1),
    }


def random_batch(batch: int, rng: np.random.Generator) -> TokenBatch:
    position = rng.integers(1, 433, size=(batch, 30))
    kind = np.tile(np.arange(1, 16), (batch, 2))
    segment = np.concatenate([np.ones((batch, 15), int), rng.integers(1, 5, size=(batch, 1)).repeat(15, 1)], 1)
    mask = rng.random((batch, 30)) > 0.1
    mask[:, 0] = True
    return TokenBatch(position, kind, segment, mask, rng.integers(0, 2, size=batch))


def step_case(batch: int, rng: np.random.Generator):
    cfg = MatcherConfig()
    params = init_params(cfg, seed=0)
    opt = Adam(params)
    tb = random_batch(batch, rng)
    leaves = {k: ag.Tensor(v, requires_grad=True, name=k) for k, v in params.items()}

    def step():
        for leaf in leaves.values():
            leaf.grad = None
        with ag.Tape() as tape:
            logits, _ = forward(leaves, cfg, tb, training=True, rng=rng, keep_attention=False)
            loss = ag.cross_entropy(logits, tb.labels)
        tape.backward(loss)
        opt.step(params, {k: leaf.grad for k, leaf in leaves.items()}, 1e-6)

    return step


def measure(fn, repeat: int) -> float:
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def run(repeat: int = 20, batch: int = 32) -> dict[str, dict[str, float]]:
    """Best-of-``repeat`` seconds per call, keyed by case then backend."""
    results: dict[str, dict[str, float]] = {}
    for name in kernels.available_backends():
        with kernels.backend(name):
            rng = np.random.default_rng(0)
            cases = kernel_cases(batch, rng)
            cases["train_step"] = step_case(batch, rng)
            for case, fn in cases.items():
                results.setdefault(case, {})[name] = measure(fn, repeat if case != "train_step" else max(3, repeat // 4))
    return results


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--batch", type=int, default=32)
    args = ap.parse_args()
    results = run(args.repeat, args.batch)
    backends = kernels.available_backends()
    print(f"{'case':<22}" + "".join(f"{b + ' ms':>14}" for b in backends) + ("   speedup" if len(backends) > 1 else ""))
    for case, row in results.items():
        line = f"{case:<22}" + "".join(f"{1e3 * row[b]:>14.3f}" for b in backends)
        if "cython" in row and "python" in row:
            line += f"{row['python'] / row['cython']:>9.2f}x"
        print(line)


if __name__ == "__main__":
    main()
