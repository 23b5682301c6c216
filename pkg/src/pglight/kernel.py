"""Dense float32 primitives used by the model, calibration and surgery code.

Tensors are plain 2-D ``numpy.ndarray`` objects of dtype float32 in C order.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

DTYPE = np.float32


def as_tensor(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    a = np.ascontiguousarray(np.asarray(data, dtype=DTYPE))
    if rows is not None and cols is not None:
        a = a.reshape(rows, cols)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D tensor, got shape {a.shape}")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: left operand {a.shape} incompatible with right operand {b.shape}")
    if a.shape[1] == 0:
        return np.zeros((a.shape[0], b.shape[1]), dtype=DTYPE)
    return np.matmul(a, b)


def rmsnorm(x: np.ndarray, gamma: np.ndarray, eps: float) -> np.ndarray:
    """RMS-normalise the last axis of ``x`` and scale by ``gamma``.

    Works on a single vector or on a stack of token rows.
    """
    x = np.asarray(x, dtype=DTYPE)
    gamma = np.asarray(gamma, dtype=DTYPE)
    if x.shape[-1] != gamma.shape[-1] or gamma.ndim != 1 or x.shape[-1] < 1:
        raise ShapeError(f"rmsnorm: input last dim {x.shape} does not match gamma {gamma.shape}")
    ms = np.mean(x * x, axis=-1, keepdims=True, dtype=DTYPE)
    return gamma * (x / np.sqrt(ms + DTYPE(eps)))


def inv_rms(x: np.ndarray, eps: float) -> np.ndarray:
    """Per-row ``1 / sqrt(||x||^2 / d + eps)`` in float64."""
    x64 = np.asarray(x, dtype=np.float64)
    return 1.0 / np.sqrt(np.mean(x64 * x64, axis=-1) + eps)


def softmax_rows(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    m = np.max(a, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0).astype(DTYPE)
    e = np.exp(a - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(a: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax in float64."""
    a = np.asarray(a, dtype=np.float64)
    m = np.max(a, axis=-1, keepdims=True)
    z = a - m
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def swish(x):
    x = np.asarray(x, dtype=DTYPE)
    with np.errstate(over="ignore"):
        return x / (DTYPE(1) + np.exp(-x))
