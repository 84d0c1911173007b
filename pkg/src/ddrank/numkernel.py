"""Dense numeric primitives shared by every other module.

Matrices are plain 2-D ``float64`` numpy arrays in C (row-major) order.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


class NumericalError(ArithmeticError):
    """A computation could not produce a finite, meaningful result."""


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def check_finite(a: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(a)):
        bad = int(np.size(a) - np.count_nonzero(np.isfinite(a)))
        raise FloatingPointError(f"{what}: {bad} non-finite value(s)")


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return a @ b


def row_softmax(m) -> np.ndarray:
    """Softmax of every row, stabilised by subtracting the row maximum."""
    m = as_matrix(m)
    z = m - m.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def row_log_softmax(m) -> np.ndarray:
    m = as_matrix(m)
    z = m - m.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def l2_normalize_rows(m) -> np.ndarray:
    """Scale each row to unit Euclidean norm. All-zero rows are returned as is."""
    m = as_matrix(m)
    norms = np.sqrt((m * m).sum(axis=1, keepdims=True))
    safe = np.where(norms > 0.0, norms, 1.0)
    return m / safe


def top_k_indices(row, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries, largest first, ties to the lower index."""
    row = np.asarray(row, dtype=np.float64).ravel()
    if not 1 <= k <= row.size:
        raise ValueError(f"k={k} out of range for a row of length {row.size}")
    # stable sort of the negated values keeps equal entries in index order
    return np.argsort(-row, kind="stable")[:k]


def top_k_rows(m: np.ndarray, k: int) -> np.ndarray:
    """Row-wise :func:`top_k_indices` for a whole matrix, shape ``(rows, k)``."""
    m = as_matrix(m)
    if not 1 <= k <= m.shape[1]:
        raise ValueError(f"k={k} out of range for rows of length {m.shape[1]}")
    if k == m.shape[1]:
        return np.argsort(-m, axis=1, kind="stable")
    # partition first, then resolve ordering and ties among the candidates only
    kth = np.partition(-m, k - 1, axis=1)[:, k - 1 : k]
    out = np.empty((m.shape[0], k), dtype=np.int64)
    for i in range(m.shape[0]):
        cand = np.flatnonzero(-m[i] <= kth[i, 0])
        order = np.argsort(-m[i, cand], kind="stable")
        out[i] = cand[order[:k]]
    return out
