import numpy as np
import pytest

from ddrank import encoder as enc
from ddrank.datasets import gen_uniform
from ddrank.numkernel import ShapeError

import oracles


def identity_model(d=3):
    return enc.EncoderModel([d, d], [np.eye(d)], [np.zeros(d)])


def test_init_he_deterministic_and_scaled():
    a = enc.init_he([1000, 1000, 2], seed=3)
    b = enc.init_he([1000, 1000, 2], seed=3)
    for x, y in zip(a.params(), b.params()):
        assert np.array_equal(x, y)
    std = a.weights[0].std()
    assert 0.9 * np.sqrt(2 / 1000) <= std <= 1.1 * np.sqrt(2 / 1000)
    assert all(np.all(bias == 0.0) for bias in a.biases)
    assert a.weights[0].shape == (1000, 1000) and a.weights[1].shape == (1000, 2)


@pytest.mark.parametrize("dims", [[], [3], [3, 0, 2]])
def test_init_he_rejects_bad_dims(dims):
    with pytest.raises(ValueError):
        enc.init_he(dims, 0)


def test_identity_network_passes_input_through():
    x = np.random.default_rng(0).normal(size=(5, 3))
    out, _ = enc.forward(identity_model(), x)
    assert np.array_equal(out, x)


def test_forward_matches_scalar_oracle():
    rng = np.random.default_rng(4)
    for normalize in (False, True):
        model = enc.init_he([3, 6, 5, 2], seed=7, normalize_output=normalize)
        for b in model.biases:
            b[:] = rng.normal(size=b.shape) * 0.1
        x = rng.normal(size=(4, 3))
        out, _ = enc.forward(model, x)
        w = [wi.tolist() for wi in model.weights]
        bs = [bi.tolist() for bi in model.biases]
        for i in range(4):
            assert np.allclose(out[i], oracles.mlp(w, bs, x[i], normalize), atol=1e-12)
        if normalize:
            assert np.allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-9)


def test_forward_rejects_wrong_width():
    with pytest.raises(ShapeError):
        enc.forward(identity_model(3), np.ones((2, 4)))


def test_backward_zero_grad_gives_zero():
    model = enc.init_he([2, 8, 2], 0)
    out, cache = enc.forward(model, np.ones((3, 2)))
    g = enc.backward(model, cache, np.zeros_like(out))
    assert all(np.all(p == 0) for p in g.params())


def test_backward_rejects_foreign_cache():
    a, b = enc.init_he([2, 4, 2], 0), enc.init_he([2, 4, 2], 1)
    _, cache = enc.forward(a, np.ones((1, 2)))
    with pytest.raises(ValueError):
        enc.backward(b, cache, np.ones((1, 2)))


def _fd_check(model, x, target, h=1e-5, rtol=1e-4):
    def loss():
        out, _ = enc.forward(model, x)
        return float(((out - target) ** 2).sum() + np.sin(out).sum())

    out, cache = enc.forward(model, x)
    grads = enc.backward(model, cache, 2 * (out - target) + np.cos(out)).params()
    for p, g in zip(model.params(), grads):
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = loss()
            p[idx] = old - h
            down = loss()
            p[idx] = old
            num = (up - down) / (2 * h)
            assert abs(num - g[idx]) <= rtol * max(abs(num), abs(g[idx])) + 1e-8, (idx, num, g[idx])


@pytest.mark.parametrize("normalize", [False, True])
def test_backward_matches_finite_differences(normalize):
    rng = np.random.default_rng(11)
    model = enc.init_he([2, 8, 2], 5, normalize_output=normalize)
    for b in model.biases:
        b[:] = rng.normal(size=b.shape) * 0.1
    _fd_check(model, rng.normal(size=(4, 2)), rng.normal(size=(4, 2)))


def test_normalization_jacobian():
    rng = np.random.default_rng(2)
    x = rng.normal(size=3)
    nrm = np.linalg.norm(x)
    u = x / nrm
    jac = (np.eye(3) - np.outer(u, u)) / nrm
    h = 1e-6
    num = np.empty((3, 3))
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        num[:, j] = ((x + e) / np.linalg.norm(x + e) - (x - e) / np.linalg.norm(x - e)) / (2 * h)
    assert np.allclose(jac, num, atol=1e-5)
    model = enc.EncoderModel([3, 3], [np.eye(3)], [np.zeros(3)], normalize_output=True)
    out, cache = enc.forward(model, x[None])
    g = rng.normal(size=3)
    # gradient wrt bias equals J^T g for an identity layer
    assert np.allclose(enc.backward(model, cache, g[None]).biases[0], jac.T @ g, atol=1e-12)


def test_adam_zero_gradient_is_fixed_point():
    p = [np.array([1.0, -2.0])]
    st = enc.AdamState.zeros_like(p, lr=1e-3)
    enc.adam_update(p, [np.zeros(2)], st)
    assert np.array_equal(p[0], [1.0, -2.0])
    assert st.step_count == 1


def test_adam_first_step_moves_by_lr():
    p = [np.array([1.0])]
    st = enc.AdamState.zeros_like(p, lr=1e-4)
    enc.adam_update(p, [np.array([1.0])], st)
    # m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
    assert p[0][0] == pytest.approx(1.0 - 1e-4 / (1 + 1e-8), abs=1e-15)


def test_adam_descends_quadratic():
    p = [np.array([3.0])]
    st = enc.AdamState.zeros_like(p, lr=0.05)
    seen = []
    for _ in range(200):
        enc.adam_update(p, [2 * (p[0] - 1.0)], st)
        seen.append(abs(p[0][0] - 1.0))
    assert seen[-1] < 0.05
    # distance shrinks monotonically until the iterate first reaches the minimum
    head = seen[: next(i for i, d in enumerate(seen) if d < 0.05)]
    assert all(a > b for a, b in zip(head, head[1:]))


def test_adam_rejects_nonfinite_and_shape():
    p = [np.zeros(2)]
    st = enc.AdamState.zeros_like(p)
    with pytest.raises(FloatingPointError):
        enc.adam_update(p, [np.array([np.inf, 0.0])], st)
    with pytest.raises(ShapeError):
        enc.adam_update(p, [np.zeros(3)], st)


def test_checkpoint_roundtrip_byte_identical(tmp_path):
    model = enc.init_he([2, 5, 3], 9, normalize_output=True)
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    enc.save_checkpoint(model, a)
    back = enc.load_checkpoint(a)
    enc.save_checkpoint(back, b)
    assert a.read_bytes() == b.read_bytes()
    assert a.read_text().splitlines()[0] == "DDCKPT v1 2 2 5 3 1"
    for x, y in zip(model.params(), back.params()):
        assert np.array_equal(x, y)


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_text("NOPE v1\n")
    with pytest.raises(ValueError):
        enc.load_checkpoint(p)


def test_pretrain_identity_fixed_point():
    model = enc.EncoderModel([2, 2], [np.eye(2)], [np.zeros(2)])
    _, err = enc.pretrain_identity(model, np.random.default_rng(0).uniform(-1, 1, (50, 2)))
    assert err == 0.0


def test_pretrain_rejects_non_2d():
    with pytest.raises(ValueError):
        enc.pretrain_identity(enc.init_he([3, 4, 3], 0), np.zeros((5, 3)))


def test_pretrain_full_size_reaches_threshold():
    model = enc.init_he([2, 1000, 1000, 2], 0)
    model, err = enc.pretrain_identity(model, gen_uniform(10000, 0).x)
    assert err < 1e-3
    held = gen_uniform(500, 99).x
    per_point = np.linalg.norm(enc.embed(model, held) - held, axis=1)
    assert per_point.max() < 0.05
