import numpy as np
import pytest

from ddrank import encoder as enc
from ddrank.manifold import (
    ManifoldState,
    build_sparse_similarity,
    init_from_projection,
    knn_cosine,
    knn_euclidean,
    load_manifold,
    save_manifold,
)
from ddrank.numkernel import ShapeError

import oracles


def state(m):
    m = np.asarray(m, dtype=np.float64)
    return ManifoldState(m, np.arange(1, m.shape[0] + 1))


def unit_rows(rng, n, p):
    m = rng.normal(size=(n, p))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def test_identity_encoder_init_copies_samples():
    x = np.random.default_rng(0).normal(size=(6, 3))
    model = enc.EncoderModel([3, 3], [np.eye(3)], [np.zeros(3)])
    st = init_from_projection(model, x)
    assert np.array_equal(st.m, x)
    assert list(st.ids) == [1, 2, 3, 4, 5, 6]


def test_init_matches_per_sample_forward_and_normalizes():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(7, 3))
    model = enc.init_he([3, 10, 4], 2, normalize_output=True)
    st = init_from_projection(model, x)
    assert np.allclose(np.linalg.norm(st.m, axis=1), 1.0, atol=1e-12)
    for i in range(7):
        assert np.linalg.norm(st.m[i] - enc.forward(model, x[i : i + 1])[0][0]) < 1e-9


def test_init_rejects_width_mismatch():
    with pytest.raises(ShapeError):
        init_from_projection(enc.init_he([3, 4], 0), np.ones((2, 2)))


def test_knn_cosine_self_is_top_and_exhaustive():
    rng = np.random.default_rng(2)
    st = state(unit_rows(rng, 12, 3))
    for j in range(12):
        assert knn_cosine(st.m[j], st, 1)[0] == j
    assert sorted(knn_cosine(st.m[0], st, 12)) == list(range(12))
    with pytest.raises(ValueError):
        knn_cosine(st.m[0], st, 13)
    with pytest.raises(ValueError):
        knn_cosine(st.m[0], st, 0)


def test_knn_match_brute_force_oracles():
    rng = np.random.default_rng(3)
    for _ in range(30):
        n, p = rng.integers(3, 25), rng.integers(2, 5)
        st = state(rng.normal(size=(n, p)))
        f = rng.normal(size=p)
        k = int(rng.integers(1, n + 1))
        assert list(knn_cosine(f, st, k)) == oracles.cosine_knn(f.tolist(), st.m.tolist(), k)
        assert list(knn_euclidean(f, st, k)) == oracles.euclid_knn(f.tolist(), st.m.tolist(), k)


def test_knn_exact_ties_go_to_lower_index():
    st = state([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 0.0]])
    assert list(knn_cosine([2.0, 0.0], st, 3)) == [0, 2, 3]
    assert list(knn_euclidean([1.0, 0.0], st, 3)) == [0, 2, 3]


def test_knn_batch_queries_are_order_stable():
    rng = np.random.default_rng(4)
    st = state(rng.normal(size=(20, 3)))
    q = rng.normal(size=(8, 3))
    perm = rng.permutation(8)
    a, b = knn_cosine(q, st, 5), knn_cosine(q[perm], st, 5)
    assert np.array_equal(a[perm], b)
    for i in range(8):
        assert np.array_equal(knn_euclidean(q, st, 4)[i], knn_euclidean(q[i], st, 4))


def test_euclidean_equals_cosine_on_sphere():
    rng = np.random.default_rng(5)
    st = state(unit_rows(rng, 30, 4))
    f = unit_rows(rng, 1, 4)[0]
    assert set(knn_euclidean(f, st, 7)) == set(knn_cosine(f, st, 7))
    assert knn_euclidean(st.m[9], st, 1)[0] == 9


def test_sparse_similarity_full_k_is_dense():
    rng = np.random.default_rng(6)
    st = state(rng.normal(size=(5, 3)))
    assert np.array_equal(build_sparse_similarity(st, 5).to_dense(), st.m @ st.m.T)


def test_sparse_similarity_orthonormal_keeps_diagonal():
    st = state(np.eye(4))
    s = build_sparse_similarity(st, 1)
    assert np.array_equal(s.to_dense(), np.eye(4))


def test_sparse_similarity_matches_dense_oracle():
    rng = np.random.default_rng(7)
    for _ in range(20):
        n, k = int(rng.integers(2, 15)), None
        k = int(rng.integers(1, n + 1))
        st = state(rng.normal(size=(n, 3)))
        s = build_sparse_similarity(st, k)
        dense = st.m @ st.m.T
        assert np.all((s.to_dense() != 0).sum(1) <= k)
        for i in range(n):
            want = sorted(range(n), key=lambda j: (-dense[i, j], j))[:k]
            assert list(s.indices[i]) == want
            assert np.allclose(s.values[i], dense[i, want], atol=1e-12)
        assert np.array_equal(s.to_scipy().toarray(), s.to_dense())


def test_manifold_file_roundtrip(tmp_path):
    st = state(np.random.default_rng(8).normal(size=(4, 3)))
    p = tmp_path / "m.txt"
    save_manifold(st, p)
    assert p.read_text().splitlines()[0] == "DDMANIF v1 4 3"
    assert np.array_equal(load_manifold(p).m, st.m)
    p.write_text("DDMANIF v1 5 3\n1 2 3\n")
    with pytest.raises(ValueError):
        load_manifold(p)
