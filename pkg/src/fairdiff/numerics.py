"""Dense-network numerics: MLP forward/backward, activations, softmax/entropy,
Adam, a seeded RNG wrapper and a central-difference gradient checker.

Everything here works on 2-D batches ``(batch, features)``; 1-D inputs are
treated as a batch of one and squeezed back on the way out.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .errors import InvalidDistribution, InvalidHyperparameter, RejectedInput, TrainingDivergence

ACTIVATIONS = ("identity", "tanh", "silu", "sigmoid")


def sigmoid(x):
    return expit(x)


def _activate(name, pre):
    if name == "identity":
        return pre
    if name == "tanh":
        return np.tanh(pre)
    if name == "silu":
        return pre * expit(pre)
    if name == "sigmoid":
        return expit(pre)
    raise RejectedInput(f"unknown activation {name!r}")


def _activate_grad(name, pre, out):
    # derivative of the activation w.r.t. its pre-activation
    if name == "identity":
        return np.ones_like(pre)
    if name == "tanh":
        return 1.0 - out * out
    if name == "silu":
        s = expit(pre)
        return s + pre * s * (1.0 - s)
    if name == "sigmoid":
        return out * (1.0 - out)
    raise RejectedInput(f"unknown activation {name!r}")


@dataclass
class Dense:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise RejectedInput(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise RejectedInput(
                f"layer shapes do not agree: weight {self.weight.shape}, bias {self.bias.shape}")

    @property
    def n_in(self):
        return self.weight.shape[1]

    @property
    def n_out(self):
        return self.weight.shape[0]


@dataclass
class ForwardCache:
    net_id: int
    version: int
    inputs: list
    pre: list
    outputs: list
    squeeze: bool


class DenseNet:
    """A plain stack of dense layers."""

    def __init__(self, layers: Sequence[Dense]):
        layers = list(layers)
        if not layers:
            raise RejectedInput("a network needs at least one layer")
        for i in range(len(layers) - 1):
            if layers[i].n_out != layers[i + 1].n_in:
                raise RejectedInput(
                    f"layer {i} outputs {layers[i].n_out} but layer {i + 1} expects {layers[i + 1].n_in}")
        self.layers = layers
        # bumped whenever parameters are replaced, so stale caches are caught
        self.version = 0

    @classmethod
    def init(cls, sizes, hidden_activation, rng, output_activation="identity", dtype=np.float64):
        """Xavier-normal weights and near-zero biases for widths ``sizes``."""
        gen = rng.generator if isinstance(rng, SeededRng) else rng
        layers = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            std = np.sqrt(2.0 / (n_in + n_out))
            w = gen.normal(0.0, std, size=(n_out, n_in)).astype(dtype)
            b = gen.normal(0.0, 1e-3, size=n_out).astype(dtype)
            act = output_activation if i == len(sizes) - 2 else hidden_activation
            layers.append(Dense(w, b, act))
        return cls(layers)

    @property
    def n_in(self):
        return self.layers[0].n_in

    @property
    def n_out(self):
        return self.layers[-1].n_out

    def params(self):
        out = []
        for layer in self.layers:
            out.extend([layer.weight, layer.bias])
        return out

    def set_params(self, params):
        params = list(params)
        if len(params) != 2 * len(self.layers):
            raise RejectedInput(f"expected {2 * len(self.layers)} parameter blocks, got {len(params)}")
        for i, layer in enumerate(self.layers):
            w, b = params[2 * i], params[2 * i + 1]
            if w.shape != layer.weight.shape or b.shape != layer.bias.shape:
                raise RejectedInput(f"parameter shape mismatch in layer {i}")
            layer.weight, layer.bias = w, b
        self.version += 1

    def copy(self):
        return DenseNet([Dense(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])

    def forward(self, x):
        return net_forward(self, x)

    def __call__(self, x):
        return net_forward(self, x)[0]


def net_forward(net: DenseNet, x):
    x = np.asarray(x)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.ndim != 2 or h.shape[1] != net.n_in:
        raise RejectedInput(f"network expects input width {net.n_in}, got shape {x.shape}")
    inputs, pres, outs = [], [], []
    for layer in net.layers:
        inputs.append(h)
        pre = h @ layer.weight.T + layer.bias
        h = _activate(layer.activation, pre)
        pres.append(pre)
        outs.append(h)
    cache = ForwardCache(id(net), net.version, inputs, pres, outs, squeeze)
    return (h[0] if squeeze else h), cache


def net_backward(net: DenseNet, cache: ForwardCache, grad_y):
    """Backpropagate ``grad_y`` (same shape as the forward output).

    Returns ``(grads, grad_x)`` where ``grads`` follows ``net.params()`` order
    and parameter gradients are summed over the batch.
    """
    if cache.net_id != id(net) or cache.version != net.version or len(cache.inputs) != len(net.layers):
        raise RejectedInput("forward cache does not belong to this network state")
    g = np.asarray(grad_y)
    if cache.squeeze:
        g = g[None, :]
    if g.shape != cache.outputs[-1].shape:
        raise RejectedInput(f"grad_y shape {np.shape(grad_y)} does not match network output")
    grads = [None] * (2 * len(net.layers))
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        d_pre = g * _activate_grad(layer.activation, cache.pre[i], cache.outputs[i])
        grads[2 * i] = d_pre.T @ cache.inputs[i]
        grads[2 * i + 1] = d_pre.sum(axis=0)
        g = d_pre @ layer.weight
    return grads, (g[0] if cache.squeeze else g)


def softmax_tau(z, tau):
    """Temperature softmax along the last axis."""
    if not tau > 0:
        raise InvalidHyperparameter(f"temperature must be positive, got {tau}")
    s = np.asarray(z, dtype=np.float64) / tau
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def entropy_rows(p):
    """Shannon entropy (nats) along the last axis, no validation, 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=-1)


def shannon_entropy(p):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise InvalidDistribution("entropy needs a non-empty 1-D distribution")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise InvalidDistribution(f"distribution has negative or non-finite entries: {p}")
    if abs(p.sum() - 1.0) > 1e-9:
        raise InvalidDistribution(f"distribution sums to {p.sum()!r}, not 1")
    return float(entropy_rows(p))


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls([np.zeros_like(p, dtype=np.float64) for p in params],
                   [np.zeros_like(p, dtype=np.float64) for p in params],
                   0, lr, beta1, beta2, eps)


def adam_update(params, grads, state: AdamState, layer_of=lambda i: i // 2):
    """One bias-corrected Adam step. Returns new parameter arrays and state.

    ``layer_of`` maps a parameter-block index to the layer index reported
    when a gradient turns out non-finite.
    """
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise RejectedInput("params, grads and Adam moments must have the same number of blocks")
    for i, g in enumerate(grads):
        if g.shape != params[i].shape or state.m[i].shape != params[i].shape:
            raise RejectedInput(f"shape mismatch in parameter block {i}")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergence(f"non-finite gradient in layer {layer_of(i)}", layer=layer_of(i))
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_params.append((p - update).astype(p.dtype, copy=False))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(new_m, new_v, step, state.lr, b1, b2, state.eps)


class SeededRng:
    """Reproducible random stream; thin wrapper over numpy's PCG64."""

    def __init__(self, seed: int, key: tuple = ()):
        self.seed = int(seed)
        self.key = tuple(key)
        self.generator = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self.key)))

    def child(self, *key):
        """Independent stream derived from (seed, key); does not advance this one."""
        return SeededRng(self.seed, self.key + tuple(int(k) for k in key))

    def normal(self, size):
        return self.generator.standard_normal(size)

    def integers(self, low, high, size=None):
        return self.generator.integers(low, high, size=size)

    def random(self, size=None):
        return self.generator.random(size)

    def permutation(self, n):
        return self.generator.permutation(n)


@dataclass
class GradCheckReport:
    errors: dict = field(default_factory=dict)  # block name -> max relative error
    tol: float = 1e-4

    @property
    def max_error(self):
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def ok(self):
        return self.max_error <= self.tol

    def __str__(self):
        rows = [f"{name}: {err:.3e}" for name, err in self.errors.items()]
        return "\n".join(rows + [f"max {self.max_error:.3e} (tol {self.tol:g})"])


def finite_diff_check(loss_fn: Callable, params, h=1e-6, tol=1e-4, names=None):
    """Compare analytic gradients against central differences.

    ``loss_fn(params)`` must return ``(loss, grads)`` with ``grads`` in the
    same order as ``params``. The per-block error is
    ``max|analytic - numeric| / (max|numeric| + 1e-12)``.
    """
    params = [np.array(p, dtype=np.float64) for p in params]
    names = names or [f"block{i}" for i in range(len(params))]
    _, analytic = loss_fn(params)
    report = GradCheckReport(tol=tol)
    for name, p, a in zip(names, params, analytic):
        numeric = np.zeros_like(p)
        flat = p.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + h
            up = loss_fn(params)[0]
            flat[j] = old - h
            down = loss_fn(params)[0]
            flat[j] = old
            numeric.reshape(-1)[j] = (up - down) / (2 * h)
        diff = np.max(np.abs(np.asarray(a) - numeric)) if p.size else 0.0
        report.errors[name] = float(diff / (np.max(np.abs(numeric), initial=0.0) + 1e-12))
    return report
