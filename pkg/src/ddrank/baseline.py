"""Classical manifold ranking on a full affinity graph (small-N baseline).

Standard form: ``r* = (1 - alpha) (I - alpha S)^-1 y`` with
``S = D^-1/2 W D^-1/2`` and Gaussian affinities ``W``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numkernel import NumericalError, as_matrix


class SingularSystemError(NumericalError):
    pass


class NotConvergedError(NumericalError):
    pass


@dataclass
class MRGraph:
    w: np.ndarray
    s_norm: np.ndarray
    alpha: float
    sigma: float

    @property
    def n(self) -> int:
        return self.w.shape[0]


def pairwise_sq_dists(x: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - x[None, :, :]
    return (diff * diff).sum(-1)


def median_bandwidth(x) -> float:
    x = as_matrix(x)
    d = np.sqrt(pairwise_sq_dists(x))
    off = d[~np.eye(x.shape[0], dtype=bool)]
    return float(np.median(off))


def build_graph(features, sigma: float | None = None, alpha: float = 0.99) -> MRGraph:
    x = as_matrix(features, "features")
    if x.shape[0] < 2:
        raise ValueError("need at least two points")
    if sigma is None:
        sigma = median_bandwidth(x)
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    w = np.exp(-pairwise_sq_dists(x) / (2.0 * sigma * sigma))
    np.fill_diagonal(w, 0.0)
    w = 0.5 * (w + w.T)
    deg = w.sum(1)
    inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    s = inv_sqrt[:, None] * w * inv_sqrt[None, :]
    return MRGraph(w, s, float(alpha), float(sigma))


def _source(g: MRGraph, source_id: int) -> np.ndarray:
    """One-hot vector for a 1-based node id."""
    if not 1 <= source_id <= g.n:
        raise ValueError(f"source id {source_id} out of range 1..{g.n}")
    y = np.zeros(g.n)
    y[source_id - 1] = 1.0
    return y


def solve_closed_form(g: MRGraph, source_id: int) -> np.ndarray:
    y = _source(g, source_id)
    a = np.eye(g.n) - g.alpha * g.s_norm
    try:
        return (1.0 - g.alpha) * np.linalg.solve(a, y)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"closed-form system is singular: {exc}") from None


def solve_iterative(g: MRGraph, source_id: int, tol: float = 1e-10, max_iters: int = 100000,
                    r0=None, residuals: list | None = None) -> tuple[np.ndarray, int]:
    """Fixed-point iteration ``r <- alpha S r + (1 - alpha) y``.

    Returns the scores and the number of iterations used. ``S`` has spectral
    norm at most 1, so ``alpha / (1 - alpha) * |r_k - r_(k-1)|_2`` bounds the
    remaining error; iteration stops once that bound is below ``tol``.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    y = _source(g, source_id)
    r = y.copy() if r0 is None else np.asarray(r0, dtype=np.float64).copy()
    base = (1.0 - g.alpha) * y
    factor = g.alpha / (1.0 - g.alpha)
    bound = np.inf
    for it in range(1, max_iters + 1):
        nxt = g.alpha * (g.s_norm @ r) + base
        delta = float(np.linalg.norm(nxt - r))
        r = nxt
        if residuals is not None:
            residuals.append(delta)
        bound = factor * delta
        if bound < tol:
            return r, it
    raise NotConvergedError(f"no convergence after {max_iters} iterations (error bound {bound:.3g})")
