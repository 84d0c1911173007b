"""Feature extraction after training: embedded, diffused and fused features."""

from __future__ import annotations

import numpy as np

from .encoder import EncoderModel, embed
from .manifold import ManifoldState, SparseSimilarity, build_sparse_similarity, knn_euclidean
from .numkernel import NumericalError, ShapeError, as_matrix

# intermediate renormalisation interval during diffusion; keeps unnormalised S powers in range
RENORM_EVERY = 5


class DisconnectedDiffusionError(NumericalError):
    """The diffused vector vanished, so it has no direction to normalise."""


def extract_embedded(encoder: EncoderModel, x) -> np.ndarray:
    """Encoder output for one sample (1-D input) or a batch (2-D input)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != encoder.in_dim:
        raise ShapeError(f"sample width {x.shape[-1]} != encoder input dim {encoder.in_dim}")
    out = embed(encoder, as_matrix(x))
    return out[0] if x.ndim == 1 else out


def diffusion_source(f, state: ManifoldState, k: int) -> np.ndarray:
    """Binary N-vector marking the ``k`` intrinsic features nearest to ``f``."""
    idx = knn_euclidean(np.asarray(f, dtype=np.float64).ravel(), state, k)
    g0 = np.zeros(state.n)
    g0[idx] = 1.0
    return g0


def diffuse_raw(g0, s: SparseSimilarity, r_steps: int) -> np.ndarray:
    """``g0 . S^r_steps`` without any rescaling."""
    g = np.asarray(g0, dtype=np.float64).copy()
    st = s.to_scipy().T.tocsr()
    for _ in range(r_steps):
        g = st @ g
    return g


def diffuse(g0, s: SparseSimilarity, r_steps: int = 20) -> np.ndarray:
    """Propagate ``g0`` through ``S`` ``r_steps`` times and scale to unit length.

    ``g`` is also rescaled every few steps; the result only depends on the
    direction, so this does not change the output.
    """
    g = np.asarray(g0, dtype=np.float64)
    if g.ndim != 1 or g.size != s.n:
        raise ShapeError(f"diffusion source has shape {g.shape}, graph has {s.n} nodes")
    if r_steps < 0:
        raise ValueError("r_steps must be >= 0")
    # row vector times S == S^T times column vector
    st = s.to_scipy().T.tocsr()
    g = g.copy()
    for step in range(1, r_steps + 1):
        g = st @ g
        if step % RENORM_EVERY == 0:
            nrm = np.linalg.norm(g)
            if nrm == 0.0 or not np.isfinite(nrm):
                break
            g /= nrm
    nrm = np.linalg.norm(g)
    if nrm == 0.0 or not np.isfinite(nrm):
        raise DisconnectedDiffusionError(f"diffused vector has norm {nrm} after {r_steps} step(s)")
    return g / nrm


def extract_diffused(encoder: EncoderModel, x, state: ManifoldState, k: int = 20, r_steps: int = 20,
                     sim: SparseSimilarity | None = None) -> np.ndarray:
    """Diffused feature of every row of ``x`` (N_query x N)."""
    if sim is None:
        sim = build_sparse_similarity(state, k)
    f = as_matrix(extract_embedded(encoder, x))
    nbrs = knn_euclidean(f, state, k)
    g = np.zeros((f.shape[0], state.n))
    np.put_along_axis(g, nbrs, 1.0, axis=1)
    st = sim.to_scipy().T.tocsr()
    # diffuse all queries at once as columns
    g = g.T.copy()
    for step in range(1, r_steps + 1):
        g = st @ g
        if step % RENORM_EVERY == 0:
            cols = np.linalg.norm(g, axis=0)
            g /= np.where(cols > 0, cols, 1.0)
    norms = np.linalg.norm(g, axis=0)
    bad = np.flatnonzero(~(norms > 0) | ~np.isfinite(norms))
    if bad.size:
        raise DisconnectedDiffusionError(f"{bad.size} quer(ies) diffused to a zero vector, first is row {bad[0]}")
    return (g / norms).T


def fuse(e, d) -> np.ndarray:
    """Concatenate embedded and diffused features along the last axis."""
    return np.concatenate([np.asarray(e, dtype=np.float64), np.asarray(d, dtype=np.float64)], axis=-1)


def extract(mode: str, encoder: EncoderModel, x, state: ManifoldState | None = None, k: int = 20,
            r_steps: int = 20) -> np.ndarray:
    """Features for ``mode`` in {"e", "d", "ed"}."""
    if mode == "e":
        return as_matrix(extract_embedded(encoder, x))
    if state is None:
        raise ValueError(f"mode {mode!r} needs the trained manifold")
    d = extract_diffused(encoder, x, state, k, r_steps)
    if mode == "d":
        return d
    if mode == "ed":
        return fuse(as_matrix(extract_embedded(encoder, x)), d)
    raise ValueError(f"unknown extraction mode {mode!r}; use e, d or ed")
