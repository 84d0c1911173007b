"""Central-difference check of the LMR gradients with respect to f, M and theta."""

import numpy as np

from ddrank import encoder as enc
from ddrank.lmr import lmr_loss_and_grads, neighbour_supports
from ddrank.manifold import ManifoldState

H = 1e-5
RTOL = 1e-4
# absolute slack for entries whose true value is ~0; central differences carry ~1e-10 noise here
ATOL = 1e-8


def _instance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 11))
    b = int(rng.integers(1, min(4, n) + 1))
    p = int(rng.integers(2, 5))
    d_in = int(rng.integers(2, 4))
    k = int(rng.integers(1, n + 1))
    lam = float(rng.uniform(0.0, 2.0))
    normalize = bool(rng.integers(0, 2))
    model = enc.init_he([d_in, 6, p], seed, normalize_output=normalize)
    model.biases[0][:] = rng.normal(size=6) * 0.1
    # stay away from non-differentiable points: ReLU kinks, and a zero raw output under normalisation
    while True:
        x = rng.normal(size=(b, d_in))
        _, cache = enc.forward(model, x)
        if np.abs(cache.pre[0]).min() > 1e-3 and np.linalg.norm(cache.raw_out, axis=1).min() > 1e-3:
            break
    m = rng.normal(size=(n, p))
    ids = rng.choice(np.arange(1, n + 1), size=b, replace=False)
    return model, x, ManifoldState(m, np.arange(1, n + 1)), ids, lam, k


def _close(num, ana):
    return abs(num - ana) <= RTOL * max(abs(num), abs(ana)) + ATOL


def check_instance(seed):
    """Returns (entries checked, list of mismatches) for one random instance."""
    model, x, st, ids, lam, k = _instance(seed)
    f, cache = enc.forward(model, x)
    supports = neighbour_supports(f, st, k)
    _, df, dm = lmr_loss_and_grads(f, ids, st, lam, k, supports=supports)
    dtheta = enc.backward(model, cache, df).params()

    def loss_f(ff):
        return lmr_loss_and_grads(ff, ids, st, lam, k, supports=supports)[0].total

    def loss_theta():
        return loss_f(enc.forward(model, x)[0])

    bad, count = [], 0

    def probe(arr, idx, fn, ana, tag):
        nonlocal count
        old = arr[idx]
        arr[idx] = old + H
        up = fn()
        arr[idx] = old - H
        down = fn()
        arr[idx] = old
        num = (up - down) / (2 * H)
        count += 1
        if not _close(num, ana):
            bad.append((seed, tag, idx, num, ana))

    for idx in np.ndindex(f.shape):
        probe(f, idx, lambda: loss_f(f), df[idx], "f")
    for idx in np.ndindex(st.m.shape):
        probe(st.m, idx, lambda: loss_f(f), dm[idx], "M")
    for t, (p, g) in enumerate(zip(model.params(), dtheta)):
        for idx in np.ndindex(p.shape):
            probe(p, idx, loss_theta, g[idx], f"theta{t}")
    return count, bad
