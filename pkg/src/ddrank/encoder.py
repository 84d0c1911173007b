"""Fully connected encoder with hand-written backprop and Adam."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .numkernel import ShapeError, as_matrix, check_finite

log = logging.getLogger(__name__)


@dataclass
class EncoderModel:
    """ReLU MLP; the last layer is linear, optionally followed by row L2 normalisation."""

    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    normalize_output: bool = False

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    def params(self) -> list[np.ndarray]:
        """Parameters in checkpoint order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "EncoderModel":
        return EncoderModel(
            list(self.layer_dims),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.normalize_output,
        )


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]  # input to each layer (post-activation of the previous one)
    pre: list[np.ndarray]  # affine output of each layer
    raw_out: np.ndarray  # final output before normalisation
    norms: np.ndarray | None  # row norms of raw_out when normalising
    model_id: int


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def _check_dims(layer_dims) -> list[int]:
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or any(d <= 0 for d in dims):
        raise ValueError(f"layer_dims needs at least two positive entries, got {layer_dims!r}")
    return dims


def init_he(layer_dims, seed: int, normalize_output: bool = False) -> EncoderModel:
    """He-normal weights (variance 2/fan_in) and zero biases."""
    dims = _check_dims(layer_dims)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return EncoderModel(dims, weights, biases, normalize_output)


def forward(model: EncoderModel, batch) -> tuple[np.ndarray, ForwardCache]:
    x = as_matrix(batch, "batch")
    if x.shape[1] != model.in_dim:
        raise ShapeError(f"batch width {x.shape[1]} != encoder input dim {model.in_dim}")
    inputs, pre = [], []
    h = x
    last = model.n_layers - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        inputs.append(h)
        z = h @ w + b
        pre.append(z)
        h = np.maximum(z, 0.0) if i < last else z
    raw = h
    norms = None
    if model.normalize_output:
        norms = np.sqrt((raw * raw).sum(axis=1, keepdims=True))
        h = raw / np.where(norms > 0.0, norms, 1.0)
    return h, ForwardCache(inputs, pre, raw, norms, id(model))


def embed(model: EncoderModel, x, chunk: int = 4096) -> np.ndarray:
    """Inference-only forward pass in chunks, without keeping the cache."""
    x = as_matrix(x, "x")
    parts = [forward(model, x[i : i + chunk])[0] for i in range(0, x.shape[0], chunk)]
    return np.vstack(parts) if parts else np.zeros((0, model.out_dim))


def backward(model: EncoderModel, cache: ForwardCache, grad_out) -> Gradients:
    """Reverse-mode gradients of ``sum(grad_out * forward(model, batch))``."""
    if cache.model_id != id(model) or len(cache.pre) != model.n_layers:
        raise ValueError("forward cache does not belong to this model")
    g = as_matrix(grad_out, "grad_out")
    if g.shape != cache.raw_out.shape:
        raise ShapeError(f"grad_out shape {g.shape} != output shape {cache.raw_out.shape}")
    if model.normalize_output:
        # d(x/|x|) = (I - u u^T) dx / |x|
        n = np.where(cache.norms > 0.0, cache.norms, 1.0)
        u = cache.raw_out / n
        g = (g - u * (g * u).sum(axis=1, keepdims=True)) / n
    gw = [None] * model.n_layers
    gb = [None] * model.n_layers
    for i in range(model.n_layers - 1, -1, -1):
        if i < model.n_layers - 1:
            g = g * (cache.pre[i] > 0.0)
        gw[i] = cache.inputs[i].T @ g
        gb[i] = g.sum(axis=0)
        if i > 0:
            g = g @ model.weights[i].T
    return Gradients(gw, gb)


@dataclass
class AdamState:
    """Moment estimates for an ordered list of parameter arrays."""

    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, lr: float = 1e-4, **kw) -> "AdamState":
        return cls(
            [np.zeros_like(p) for p in params],
            [np.zeros_like(p) for p in params],
            lr=lr,
            **kw,
        )


@numba.njit(cache=True)
def _adam_kernel(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
    p = p.reshape(-1)
    g = g.reshape(-1)
    m = m.reshape(-1)
    v = v.reshape(-1)
    for i in range(p.size):
        gi = g[i]
        mi = beta1 * m[i] + (1.0 - beta1) * gi
        vi = beta2 * v[i] + (1.0 - beta2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= lr * (mi / bc1) / (np.sqrt(vi / bc2) + eps)


def adam_update(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> None:
    """In-place Adam step with bias correction over matching parameter lists."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ShapeError("parameter, gradient and moment lists differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        check_finite(g, "adam gradient")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        _adam_kernel(p, np.ascontiguousarray(g), m, v, state.lr, state.beta1, state.beta2, state.eps, bc1, bc2)


def adam_step(model: EncoderModel, state: AdamState, grads: Gradients) -> tuple[EncoderModel, AdamState]:
    adam_update(model.params(), grads.params(), state)
    return model, state


def pretrain_identity(
    model: EncoderModel,
    points,
    epochs: int = 1000,
    lr: float = 1e-4,
    seed: int = 0,
    batch_size: int = 100,
    threshold: float = 1e-3,
) -> tuple[EncoderModel, float]:
    """Fit the encoder to reproduce its 2-D input (mean squared error).

    Stops as soon as the full-data MSE (checked once per epoch) drops below
    ``threshold``. Returns the model and the last measured MSE.
    """
    if model.in_dim != 2 or model.out_dim != 2:
        raise ValueError(f"identity pretraining needs a 2->2 encoder, got {model.layer_dims}")
    if model.normalize_output:
        raise ValueError("identity pretraining requires normalize_output off")
    x = as_matrix(points, "points")
    if x.shape[1] != 2:
        raise ShapeError(f"points must be N x 2, got {x.shape}")

    def mse() -> float:
        d = embed(model, x) - x
        return float((d * d).sum(axis=1).mean())

    err = mse()
    if err < threshold:
        return model, err
    rng = np.random.default_rng(seed)
    state = AdamState.zeros_like(model.params(), lr=lr)
    n = x.shape[0]
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            xb = x[order[start : start + batch_size]]
            out, cache = forward(model, xb)
            # loss = mean over rows of squared error
            g = 2.0 * (out - xb) / xb.shape[0]
            adam_step(model, state, backward(model, cache, g))
        err = mse()
        log.debug("pretrain epoch %d mse %.3g", epoch + 1, err)
        if err < threshold:
            break
    log.info("identity pretraining finished: mse %.3g after %d epoch(s)", err, epoch + 1)
    return model, err


CKPT_MAGIC = "DDCKPT"


def _fmt(values: np.ndarray) -> str:
    return " ".join(repr(float(v)) for v in np.asarray(values).ravel())


def save_checkpoint(model: EncoderModel, path) -> None:
    lines = [
        f"{CKPT_MAGIC} v1 {model.n_layers} {' '.join(map(str, model.layer_dims))} {int(model.normalize_output)}"
    ]
    lines += [_fmt(p) for p in model.params()]
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> EncoderModel:
    lines = Path(path).read_text().splitlines()
    head = lines[0].split() if lines else []
    if len(head) < 4 or head[0] != CKPT_MAGIC or head[1] != "v1":
        raise ValueError(f"{path}: not a {CKPT_MAGIC} v1 checkpoint")
    n_layers = int(head[2])
    dims = _check_dims(head[3 : 4 + n_layers])
    if len(head) != 5 + n_layers:
        raise ValueError(f"{path}: malformed header")
    normalize = head[4 + n_layers] == "1"
    if len(lines) - 1 != 2 * n_layers:
        raise ValueError(f"{path}: expected {2 * n_layers} tensors, found {len(lines) - 1}")
    weights, biases = [], []
    for i in range(n_layers):
        w = np.array(lines[1 + 2 * i].split(), dtype=np.float64)
        b = np.array(lines[2 + 2 * i].split(), dtype=np.float64)
        if w.size != dims[i] * dims[i + 1] or b.size != dims[i + 1]:
            raise ValueError(f"{path}: tensor size mismatch in layer {i}")
        weights.append(w.reshape(dims[i], dims[i + 1]))
        biases.append(b)
    return EncoderModel(dims, weights, biases, normalize)
