"""Latent manifold ranking loss: value and exact gradients.

For a mini-batch of extrinsic features ``F`` (B x P) with sample IDs and the
intrinsic features ``M`` (N x P)::

    r_b   = softmax(f_b . M^T)
    r_n   = softmax(m_n . M^T)
    fit   = sum_b -log r_b[ID_b]
    w_bn  = f_b . m_n   for m_n among the k cosine-nearest rows of f_b, else 0
    smooth = sum_b sum_n w_bn * JS(r_b || r_n)
    total = fit + lam * smooth

Neighbour sets are piecewise constant in the inputs, so gradients treat the
selected index sets as fixed while differentiating everything else.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numba
import numpy as np

from .manifold import ManifoldState, cosine_scores
from .numkernel import ShapeError, as_matrix, check_finite, row_log_softmax, row_softmax, top_k_rows

LOG_FLOOR = 1e-12
_LOG_FLOOR_VALUE = np.log(LOG_FLOOR)


# upper bound on the number of elements held in one (pairs x N) work block
_BLOCK_ELEMS = 1 << 22


_work = threading.local()


def _buffer(name: str, shape) -> np.ndarray:
    """Per-thread scratch array, reused across calls to avoid page-faulting fresh memory."""
    size = int(np.prod(shape))
    bufs = _work.__dict__.setdefault("bufs", {})
    buf = bufs.get(name)
    if buf is None or buf.size < size:
        buf = bufs[name] = np.empty(size)
    return buf[:size].reshape(shape)


@numba.njit(cache=True)
def _shift_rows(y):
    for u in range(y.shape[0]):
        mx = y[u, 0]
        for i in range(1, y.shape[1]):
            if y[u, i] > mx:
                mx = y[u, i]
        for i in range(y.shape[1]):
            y[u, i] -= mx


@numba.njit(cache=True)
def _normalize_rows(y, e, log_eps):
    """Turn exp'd shifted logits ``e`` into probabilities and ``y`` into floored
    log-probabilities, in place. Returns sum_i p log p per row."""
    ent = np.empty(y.shape[0])
    for u in range(y.shape[0]):
        s = 0.0
        for i in range(y.shape[1]):
            s += e[u, i]
        ls = np.log(s)
        acc = 0.0
        for i in range(y.shape[1]):
            p = e[u, i] / s
            lp = y[u, i] - ls
            if lp < log_eps:
                lp = log_eps
            e[u, i] = p
            y[u, i] = lp
            acc += p * lp
        ent[u] = acc
    return ent


def _softmax_and_log(logits: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Row softmax of ``logits`` into ``probs``; ``logits`` is overwritten with the
    floored log-probabilities. Returns the per-row sum of p log p."""
    _shift_rows(logits)
    np.exp(logits, out=probs)
    return _normalize_rows(logits, probs, _LOG_FLOOR_VALUE)


@numba.njit(cache=True)
def _side_backward(p, logp, wsum, cross, eps, out):
    """Gradient wrt the logits of one side of the JS pairs.

    The JS derivative wrt a probability is
    0.5 * ((log p + [p > eps]) * sum_j w_j - sum_j w_j (log m_j + [m_j > eps]));
    ``cross`` holds the second sum. The softmax Jacobian is applied row by row.
    """
    for u in range(p.shape[0]):
        dot = 0.0
        for i in range(p.shape[1]):
            own = logp[u, i] + 1.0 if p[u, i] > eps else logp[u, i]
            g = 0.5 * (own * wsum[u] - cross[u, i])
            out[u, i] = g
            dot += g * p[u, i]
        for i in range(p.shape[1]):
            out[u, i] = p[u, i] * (out[u, i] - dot)


@numba.njit(cache=True)
def _pair_mixtures(r, q, inv, eps, out):
    """out[b, j] = max((r[b] + q[inv[b, j]]) / 2, eps)."""
    nb, kk = inv.shape
    n = r.shape[1]
    for b in range(nb):
        for j in range(kk):
            u = inv[b, j]
            for i in range(n):
                v = 0.5 * (r[b, i] + q[u, i])
                out[b, j, i] = v if v > eps else eps


@numba.njit(cache=True)
def _pair_accumulate(r, q, lmix, inv, w, eps, d_r, d_q):
    """Accumulate w * (log m + [m > eps]) into d_r (per batch row) and d_q (per
    unique manifold row); returns sum_i m log m for every pair.

    ``lmix`` holds the floored log of each pair's mixture m = (r_b + q_u) / 2
    for a block of batch rows, shape (rows, k, N); ``r`` and ``d_r`` cover the
    same rows.
    """
    nb, kk, n = lmix.shape
    acc = np.empty((nb, kk))
    for b in range(nb):
        for j in range(kk):
            u = inv[b, j]
            wb = w[b, j]
            s = 0.0
            for i in range(n):
                mi = 0.5 * (r[b, i] + q[u, i])
                li = lmix[b, j, i]
                s += mi * li
                t = wb * (li + 1.0) if mi > eps else wb * li
                d_r[b, i] += t
                d_q[u, i] += t
            acc[b, j] = s
    return acc


@dataclass(frozen=True)
class LossBreakdown:
    fit: float
    smooth: float
    total: float
    lam: float


@dataclass
class SmoothingWeights:
    """Row ``b`` keeps ``values[b, j]`` at manifold row ``indices[b, j]``."""

    indices: np.ndarray  # (B, k) row indices into M
    values: np.ndarray  # (B, k)

    def to_dense(self, n: int) -> np.ndarray:
        w = np.zeros((self.indices.shape[0], n))
        np.put_along_axis(w, self.indices, self.values, axis=1)
        return w


def _flog(x):
    return np.log(np.maximum(x, LOG_FLOOR))


def _rows(ids, n: int) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64).ravel()
    if ids.size and (ids.min() < 1 or ids.max() > n):
        raise ValueError(f"sample ids must lie in 1..{n}")
    return ids - 1


def ranking_vector(f, state: ManifoldState) -> np.ndarray:
    """Probability vector over the N intrinsic features (softmax of inner products)."""
    f = as_matrix(f, "f")
    if f.shape[1] != state.dim:
        raise ShapeError(f"feature dim {f.shape[1]} != manifold dim {state.dim}")
    r = row_softmax(f @ state.m.T)
    return r[0] if r.shape[0] == 1 else r


def fitting_term(batch_features, batch_ids, state: ManifoldState) -> float:
    f = as_matrix(batch_features, "batch_features")
    rows = _rows(batch_ids, state.n)
    if rows.size != f.shape[0]:
        raise ShapeError(f"{rows.size} ids for {f.shape[0]} features")
    logr = row_log_softmax(f @ state.m.T)
    return float(-logr[np.arange(f.shape[0]), rows].sum())


def neighbour_supports(batch_features, state: ManifoldState, k: int, exclude_rows=None) -> np.ndarray:
    """Cosine kNN of every batch row among the intrinsic features, shape (B, k)."""
    if not 1 <= k <= state.n:
        raise ValueError(f"k={k} out of range 1..{state.n}")
    scores = cosine_scores(batch_features, state.m)
    if exclude_rows is not None:
        if k > state.n - 1:
            raise ValueError(f"k={k} too large when excluding the sample's own row")
        scores[np.arange(scores.shape[0]), exclude_rows] = -np.inf
    return top_k_rows(scores, k)


def smoothing_weights(batch_features, state: ManifoldState, k: int, clamp_weights: bool = False,
                      supports=None) -> SmoothingWeights:
    f = as_matrix(batch_features, "batch_features")
    idx = neighbour_supports(f, state, k) if supports is None else np.asarray(supports, dtype=np.int64)
    vals = np.take_along_axis(f @ state.m.T, idx, axis=1)
    if clamp_weights:
        vals = np.maximum(vals, 0.0)
    return SmoothingWeights(idx, vals)


def js_divergence(p, q) -> float | np.ndarray:
    """Jensen-Shannon divergence in nats; broadcasts over leading axes."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape[-1] != q.shape[-1]:
        raise ShapeError(f"length mismatch: {p.shape[-1]} vs {q.shape[-1]}")
    m = 0.5 * (p + q)
    out = 0.5 * (p * _flog(p)).sum(-1) + 0.5 * (q * _flog(q)).sum(-1) - (m * _flog(m)).sum(-1)
    # rounding can leave a tiny negative value for p == q
    out = np.maximum(out, 0.0)
    return float(out) if np.ndim(out) == 0 else out


def smoothing_term(batch_features, state: ManifoldState, k: int, clamp_weights: bool = False,
                   supports=None) -> float:
    f = as_matrix(batch_features, "batch_features")
    w = smoothing_weights(f, state, k, clamp_weights, supports)
    rb = row_softmax(f @ state.m.T)
    uniq, inv = np.unique(w.indices, return_inverse=True)
    rn = row_softmax(state.m[uniq] @ state.m.T)
    inv = inv.reshape(w.indices.shape)
    total = 0.0
    for b in range(f.shape[0]):
        d = js_divergence(rb[b][None, :], rn[inv[b]])
        total += float(w.values[b] @ d)
    return total


def lmr_loss_and_grads(batch_features, batch_ids, state: ManifoldState, lam: float, k: int,
                       clamp_weights: bool = False, exclude_self: bool = False,
                       supports=None) -> tuple[LossBreakdown, np.ndarray, np.ndarray]:
    """Loss breakdown plus gradients with respect to the batch features and to M.

    ``supports`` pins the (B, k) neighbour index sets; by default they are the
    cosine kNN of the current features.
    """
    f = as_matrix(batch_features, "batch_features")
    m = state.m
    if f.shape[1] != m.shape[1]:
        raise ShapeError(f"feature dim {f.shape[1]} != manifold dim {m.shape[1]}")
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    check_finite(f, "batch features")
    check_finite(m, "manifold")
    rows = _rows(batch_ids, state.n)
    if rows.size != f.shape[0]:
        raise ShapeError(f"{rows.size} ids for {f.shape[0]} features")
    bsz, n = f.shape[0], state.n
    ar = np.arange(bsz)

    z = f @ m.T
    logr = row_log_softmax(z)
    r = np.exp(logr)
    fit = float(-logr[ar, rows].sum())
    dz = r.copy()
    dz[ar, rows] -= 1.0
    dm = np.zeros_like(m)

    smooth = 0.0
    if lam > 0.0:
        if supports is None:
            supports = neighbour_supports(f, state, k, rows if exclude_self else None)
        idx = np.asarray(supports, dtype=np.int64)
        if idx.shape[0] != bsz:
            raise ShapeError(f"supports have {idx.shape[0]} rows for a batch of {bsz}")
        kk = idx.shape[1]
        w = np.take_along_axis(z, idx, axis=1)
        wmask = w > 0.0 if clamp_weights else None
        if clamp_weights:
            w = np.where(wmask, w, 0.0)

        uniq, inv = np.unique(idx, return_inverse=True)
        inv = np.ascontiguousarray(inv.reshape(idx.shape))
        w = np.ascontiguousarray(w)
        nu = uniq.size
        lq = _buffer("lq", (nu, n))
        q = _buffer("q", (nu, n))
        np.matmul(m[uniq], m.T, out=lq)
        ent_q = _softmax_and_log(lq, q)
        lp = np.maximum(logr, _LOG_FLOOR_VALUE)
        ent_p = (r * lp).sum(1)

        js = np.empty((bsz, kk))
        d_r_cross = np.zeros_like(r)
        d_q_cross = _buffer("dq", (nu, n))
        d_q_cross.fill(0.0)
        rows_per_block = max(1, _BLOCK_ELEMS // (kk * n))
        for start in range(0, bsz, rows_per_block):
            sl = slice(start, min(bsz, start + rows_per_block))
            nb = sl.stop - sl.start
            lmix = _buffer("lmix", (nb, kk, n))
            _pair_mixtures(r[sl], q, inv[sl], LOG_FLOOR, lmix)
            np.log(lmix, out=lmix)
            acc = _pair_accumulate(r[sl], q, lmix, inv[sl], w[sl], LOG_FLOOR, d_r_cross[sl], d_q_cross)
            js[sl] = 0.5 * ent_p[sl, None] + 0.5 * ent_q[inv[sl]] - acc
        np.maximum(js, 0.0, out=js)
        smooth = float((w * js).sum())

        dz_s = np.empty_like(r)
        _side_backward(r, lp, w.sum(1), d_r_cross, LOG_FLOOR, dz_s)
        # w_bn is itself an entry of z
        dw = js if wmask is None else js * wmask
        np.add.at(dz_s, (np.repeat(ar, kk), idx.ravel()), dw.ravel())
        wsum_q = np.bincount(inv.ravel(), weights=w.ravel(), minlength=nu)
        dy = _buffer("dy", (nu, n))  # grad wrt the logits M[uniq] M^T
        _side_backward(q, lq, wsum_q, d_q_cross, LOG_FLOOR, dy)
        dz += lam * dz_s
        dm[uniq] += lam * (dy @ m)
        dm += lam * (dy.T @ m[uniq])

    df = dz @ m
    dm += dz.T @ f
    total = fit + lam * smooth
    for arr, what in ((df, "feature gradient"), (dm, "manifold gradient")):
        check_finite(arr, what)
    if not np.isfinite(total):
        raise FloatingPointError(f"non-finite loss (fit={fit}, smooth={smooth})")
    return LossBreakdown(fit, smooth, total, lam), df, dm
