"""The learnable intrinsic-feature matrix and the sparse similarity graph built from it."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoder import EncoderModel, embed
from .numkernel import ShapeError, as_matrix, top_k_indices, top_k_rows


@dataclass
class ManifoldState:
    """Row ``i`` of ``m`` is the intrinsic feature of the sample with ID ``ids[i]``."""

    m: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        self.m = as_matrix(self.m, "m")
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.shape != (self.m.shape[0],):
            raise ShapeError(f"{self.ids.size} ids for {self.m.shape[0]} manifold rows")

    @property
    def n(self) -> int:
        return self.m.shape[0]

    @property
    def dim(self) -> int:
        return self.m.shape[1]

    def copy(self) -> "ManifoldState":
        return ManifoldState(self.m.copy(), self.ids.copy())


def init_from_projection(encoder: EncoderModel, samples, ids=None) -> ManifoldState:
    """Initialise M with the encoder's embedding of every training sample, in ID order."""
    x = as_matrix(samples, "samples")
    if x.shape[1] != encoder.in_dim:
        raise ShapeError(f"samples have width {x.shape[1]}, encoder expects {encoder.in_dim}")
    if ids is None:
        ids = np.arange(1, x.shape[0] + 1)
    return ManifoldState(embed(encoder, x), ids)


def _check_k(k: int, n: int) -> None:
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range 1..{n}")


def cosine_scores(f, m: np.ndarray) -> np.ndarray:
    f = as_matrix(f)
    fn = np.sqrt((f * f).sum(axis=1, keepdims=True))
    mn = np.sqrt((m * m).sum(axis=1))
    return (f @ m.T) / np.where(fn > 0, fn, 1.0) / np.where(mn > 0, mn, 1.0)


def sq_distances(f, m: np.ndarray) -> np.ndarray:
    f = as_matrix(f)
    d = (f * f).sum(axis=1, keepdims=True) - 2.0 * (f @ m.T) + (m * m).sum(axis=1)
    return np.maximum(d, 0.0)


def knn_cosine(f, state: ManifoldState, k: int) -> np.ndarray:
    """Row indices of the ``k`` intrinsic features most cosine-similar to ``f``."""
    _check_k(k, state.n)
    f = np.asarray(f, dtype=np.float64)
    if f.ndim == 1:
        return top_k_indices(cosine_scores(f, state.m)[0], k)
    return top_k_rows(cosine_scores(f, state.m), k)


def knn_euclidean(f, state: ManifoldState, k: int) -> np.ndarray:
    """Row indices of the ``k`` intrinsic features nearest to ``f`` in Euclidean distance."""
    _check_k(k, state.n)
    f = np.asarray(f, dtype=np.float64)
    if f.ndim == 1:
        return top_k_indices(-sq_distances(f, state.m)[0], k)
    return top_k_rows(-sq_distances(f, state.m), k)


@dataclass
class SparseSimilarity:
    """Row-sparsified ``M M^T``: row ``i`` keeps ``values[i]`` at columns ``indices[i]``."""

    indices: np.ndarray  # (N, k) int
    values: np.ndarray  # (N, k) float
    n: int

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    def to_dense(self) -> np.ndarray:
        s = np.zeros((self.n, self.n))
        rows = np.repeat(np.arange(self.n), self.k)
        s[rows, self.indices.ravel()] = self.values.ravel()
        return s

    def to_scipy(self):
        from scipy import sparse

        rows = np.repeat(np.arange(self.n), self.k)
        return sparse.csr_matrix(
            (self.values.ravel(), (rows, self.indices.ravel())), shape=(self.n, self.n)
        )


def build_sparse_similarity(state: ManifoldState, k: int) -> SparseSimilarity:
    _check_k(k, state.n)
    s = state.m @ state.m.T
    idx = top_k_rows(s, k)
    return SparseSimilarity(idx, np.take_along_axis(s, idx, axis=1), state.n)


MANIF_MAGIC = "DDMANIF"


def save_manifold(state: ManifoldState, path) -> None:
    lines = [f"{MANIF_MAGIC} v1 {state.n} {state.dim}"]
    for row in state.m:
        lines.append(" ".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifold(path) -> ManifoldState:
    lines = Path(path).read_text().splitlines()
    head = lines[0].split() if lines else []
    if len(head) != 4 or head[0] != MANIF_MAGIC or head[1] != "v1":
        raise ValueError(f"{path}: not a {MANIF_MAGIC} v1 file")
    n, p = int(head[2]), int(head[3])
    if len(lines) - 1 != n:
        raise ValueError(f"{path}: expected {n} rows, found {len(lines) - 1}")
    m = np.empty((n, p))
    for i, line in enumerate(lines[1:]):
        parts = line.split()
        if len(parts) != p:
            raise ValueError(f"{path}:{i + 2}: expected {p} values, found {len(parts)}")
        m[i] = [float(v) for v in parts]
    return ManifoldState(m, np.arange(1, n + 1))
