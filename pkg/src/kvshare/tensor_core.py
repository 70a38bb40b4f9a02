"""Dense float32 kernels used by the engine.

Tensors are plain row-major ``numpy.ndarray`` objects of dtype float32.
Reductions are left to numpy/BLAS with a fixed call order, which keeps
results bit-reproducible run-to-run on one machine.
"""

from __future__ import annotations

import math

import numpy as np

DTYPE = np.float32


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


def as_tensor(x, shape: tuple[int, ...] | None = None) -> np.ndarray:
    """Return ``x`` as a C-contiguous float32 array, optionally checking its shape."""
    t = np.ascontiguousarray(x, dtype=DTYPE)
    if shape is not None and t.shape != tuple(shape):
        raise DimensionError(f"expected shape {tuple(shape)}, got {t.shape}")
    return t


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner extents differ: {a.shape} x {b.shape}")
    return np.matmul(a, b)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Softmax along the last axis with per-row max subtraction."""
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def _flat_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=DTYPE).reshape(-1)
    b = np.asarray(b, dtype=DTYPE).reshape(-1)
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.size} vs {b.size}")
    return a, b


def euclidean_distance(a, b) -> float:
    a, b = _flat_pair(a, b)
    # float64 accumulation; (a-b)**2 is symmetric in a, b so d(a,b) == d(b,a) bitwise
    diff = a.astype(np.float64) - b.astype(np.float64)
    return math.sqrt(float(np.dot(diff, diff)))


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors; 0.0 when either norm is below 1e-12."""
    a, b = _flat_pair(a, b)
    a64 = a.astype(np.float64)
    b64 = b.astype(np.float64)
    na = math.sqrt(float(np.dot(a64, a64)))
    nb = math.sqrt(float(np.dot(b64, b64)))
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    if np.array_equal(a, b):
        return 1.0
    s = float(np.dot(a64, b64)) / (na * nb)
    return max(-1.0, min(1.0, s))


def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return (x / np.sqrt(ms + DTYPE(eps))) * gain


def silu(x: np.ndarray) -> np.ndarray:
    return x / (DTYPE(1.0) + np.exp(-x))
