"""A small dense-array engine with tape-based reverse-mode differentiation.

Only the operations the matcher needs are provided. Gradients are recorded
while a :class:`Tape` is active::

    with Tape() as tape:
        loss = cross_entropy(forward(...), labels)
    tape.backward(loss)       # fills .grad on leaf tensors

Outside a tape nothing is recorded, which is the inference path.
"""
from __future__ import annotations

import contextvars
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar("kptrack_tape", default=None)


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "_is_leaf")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f" and dtype is None:
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional[Tape] = None
        self._is_leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __mul__(self, c):
        return scale(self, c)

    __rmul__ = __mul__


class Tape:
    """Ordered record of differentiable ops; consumed by one backward pass."""

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable):
        if self._consumed:
            raise RuntimeError("tape already consumed by backward()")
        out._tape = self
        out._is_leaf = False
        self._records.append((out, inputs, backward_fn))

    def backward(self, loss: Tensor):
        if loss.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if self._consumed:
            raise RuntimeError("tape already consumed by backward()")
        self._consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, fn in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._is_leaf:
                    inp.grad = gi if inp.grad is None else inp.grad + gi
                    continue
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
        self._records.clear()


def backward(loss: Tensor):
    """Populate ``.grad`` on every leaf that ``loss`` depends on."""
    if loss._tape is None:
        raise RuntimeError("loss was not computed under an active Tape")
    loss._tape.backward(loss)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], fn: Callable) -> Tensor:
    needs = any(x.requires_grad for x in inputs)
    out = Tensor(data, requires_grad=needs)
    tape = _ACTIVE_TAPE.get()
    if needs and tape is not None:
        tape.record(out, inputs, fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = np.add(a.data, b.data)
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _make((a.data * c).astype(a.dtype, copy=False), (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; a 2-D right operand is shared across the batch."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    shared = bd.ndim == 2
    # a shared 2-D weight is applied as one flat GEMM, which beats numpy's stacked loop
    out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + bd.shape[-1:]) if shared else ad @ bd

    def fn(g):
        ga = gb = None
        if shared:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ bd.T).reshape(ad.shape)
            if b.requires_grad:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g2
        else:
            if a.requires_grad:
                ga = g @ np.swapaxes(bd, -1, -2)
            if b.requires_grad:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(out, (a, b), fn)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def transpose_last_two(a) -> Tensor:
    a = _as_tensor(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(src),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = tuple(_as_tensor(x) for x in tensors)
    try:
        out = np.concatenate([x.data for x in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[x.shape for x in ts]} mismatch on axis {axis}") from None
    bounds = np.cumsum([x.shape[axis] for x in ts])[:-1]
    return _make(out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def select(a, index: int, axis: int) -> Tensor:
    """Pick one slice along ``axis`` (the axis is dropped)."""
    a = _as_tensor(a)
    src, dt = a.shape, a.dtype

    def fn(g):
        full = np.zeros(src, dtype=dt)
        sl = [slice(None)] * len(src)
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _make(np.take(a.data, index, axis=axis), (a,), fn)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous sub-range ``[start, start + length)`` along ``axis`` (axis kept)."""
    a = _as_tensor(a)
    src, dt = a.shape, a.dtype
    sl = [slice(None)] * len(src)
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def fn(g):
        full = np.zeros(src, dtype=dt)
        full[sl] = g
        return (full,)

    return _make(np.ascontiguousarray(a.data[sl]), (a,), fn)


def embedding_lookup(table, ids: np.ndarray) -> Tensor:
    """Rows of ``table`` indexed by the integer array ``ids`` (0-based)."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        bad = np.argwhere((ids < 0) | (ids >= table.shape[0]))[0]
        raise IndexError(
            f"embedding id {ids[tuple(bad)]} at index {tuple(int(i) for i in bad)} outside [0, {table.shape[0]})"
        )
    shape, dt = table.shape, table.dtype

    def fn(g):
        full = np.zeros(shape, dtype=dt)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _make(table.data[ids], (table,), fn)


def softmax_last_dim(a) -> Tensor:
    a = _as_tensor(a)
    y = kernels.softmax_forward(a.data)
    return _make(y, (a,), lambda g: (kernels.softmax_backward(np.asarray(g, dtype=y.dtype), y),))


def layer_norm(x, gain, bias, eps: float = 1e-12) -> Tensor:
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match input {x.shape}")
    y, xhat, rstd = kernels.layer_norm_forward(x.data, gain.data, bias.data, eps)
    gd = gain.data

    def fn(g):
        return kernels.layer_norm_backward(np.asarray(g, dtype=xhat.dtype), xhat, rstd, gd)

    return _make(y, (x, gain, bias), fn)


def gelu(a) -> Tensor:
    a = _as_tensor(a)
    xd = a.data
    return _make(kernels.gelu_forward(xd), (a,), lambda g: (kernels.gelu_backward(np.asarray(g, dtype=xd.dtype), xd),))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def dropout(a, rate: float, training: bool, rng=None) -> Tensor:
    """Inverted dropout. ``rng`` is a numpy Generator or an integer seed."""
    a = _as_tensor(a)
    if not training or rate <= 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {rate}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    keep = (rng.random(a.shape, dtype=np.float32) >= rate).astype(a.dtype) * a.dtype.type(1.0 / (1.0 - rate))
    return _make(a.data * keep, (a,), lambda g: (g * keep,))


def cross_entropy(logits, labels: np.ndarray) -> Tensor:
    """Mean softmax cross entropy of ``(batch, classes)`` logits against integer labels."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = labels.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    probs = np.exp(logp)
    dt = logits.dtype

    def fn(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return ((d * (float(g) / n)).astype(dt),)

    return _make(np.array(loss, dtype=dt), (logits,), fn)


def numerical_grad(f: Callable[[], float], arr: np.ndarray, index, h: float = 1e-5) -> float:
    """Central finite difference of ``f`` w.r.t. ``arr[index]`` (arr modified in place, then restored)."""
    old = arr[index]
    arr[index] = old + h
    fp = f()
    arr[index] = old - h
    fm = f()
    arr[index] = old
    return (fp - fm) / (2.0 * h)
