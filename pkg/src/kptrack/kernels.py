"""Backend dispatch for the hot row kernels.

The compiled ``_kernels`` extension is used when it imports; otherwise the
numpy versions in ``_kernels_py`` are. Set ``KPTRACK_PURE_PYTHON=1`` to force
the fallback, or call :func:`use_backend` at runtime (benchmarks and tests
do this to compare the two).
"""
from __future__ import annotations

import os
from contextlib import contextmanager
from types import ModuleType

import numpy as np

from . import _kernels_py

try:
    if os.environ.get("KPTRACK_PURE_PYTHON") == "1":
        raise ImportError("pure python backend forced")
    from . import _kernels as _compiled  # type: ignore[attr-defined]
except ImportError:
    _compiled = None

_BACKENDS: dict[str, ModuleType] = {"python": _kernels_py}
if _compiled is not None:
    _BACKENDS["cython"] = _compiled

_active: ModuleType = _compiled if _compiled is not None else _kernels_py
BACKEND: str = "cython" if _compiled is not None else "python"


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def use_backend(name: str) -> None:
    global _active, BACKEND
    if name not in _BACKENDS:
        raise ValueError(f"kernel backend {name!r} not available; have {available_backends()}")
    _active = _BACKENDS[name]
    BACKEND = name


@contextmanager
def backend(name: str):
    previous = BACKEND
    use_backend(name)
    try:
        yield
    finally:
        use_backend(previous)


def _rows(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.reshape(-1, a.shape[-1]))


def layer_norm_forward(x, gain, bias, eps):
    """Normalise over the last axis. Returns ``(y, xhat, rstd)`` with ``rstd`` per row."""
    y, xhat, rstd = _active.layer_norm_forward(
        _rows(x), np.ascontiguousarray(gain), np.ascontiguousarray(bias), float(eps)
    )
    return y.reshape(x.shape), xhat.reshape(x.shape), rstd


def layer_norm_backward(dy, xhat, rstd, gain):
    dx, dgain, dbias = _active.layer_norm_backward(
        _rows(dy), _rows(xhat), np.ascontiguousarray(rstd), np.ascontiguousarray(gain)
    )
    return dx.reshape(dy.shape), dgain, dbias


def softmax_forward(x):
    return _active.softmax_forward(_rows(x)).reshape(x.shape)


def softmax_backward(dy, y):
    return _active.softmax_backward(_rows(dy), _rows(y)).reshape(dy.shape)


def gelu_forward(x):
    return _active.gelu_forward(np.ascontiguousarray(x).ravel()).reshape(x.shape)


def gelu_backward(dy, x):
    return _active.gelu_backward(
        np.ascontiguousarray(dy).ravel(), np.ascontiguousarray(x).ravel()
    ).reshape(x.shape)


def adam_update(param, grad, m, v, lr, beta1, beta2, eps, step):
    """In-place Adam update. All four arrays must be C-contiguous and share a dtype."""
    _active.adam_update(
        param.reshape(-1), grad.reshape(-1), m.reshape(-1), v.reshape(-1),
        float(lr), float(beta1), float(beta2), float(eps), int(step),
    )
