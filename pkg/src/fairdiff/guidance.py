"""Autoguidance: fusing a main and a weak denoiser, fixed-weight (AG) or with a
learned per-step weight from the adaptive guidance network (A2G)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import DenoiserModel, DiffusionSchedule, denoise, initial_state, posterior_step
from .errors import GuidanceBlowup, InvalidHyperparameter, RejectedInput
from .numerics import DenseNet, SeededRng, entropy_rows, net_backward, net_forward, sigmoid, softmax_tau

BLOWUP_LIMIT = 1e6
# keeps both sigmoids strictly inside (0, 1) so the weight bounds stay strict in floating point
SIGMOID_CLIP = 1e-12


def fuse(z1, z0, w):
    """w * z1 + (1 - w) * z0, exact wherever z1 == z0."""
    z1 = np.asarray(z1, dtype=np.float64)
    z0 = np.asarray(z0, dtype=np.float64)
    if z1.shape != z0.shape:
        raise RejectedInput(f"cannot fuse shapes {z1.shape} and {z0.shape}")
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 1 and z1.ndim == 2:
        w = w[:, None]
    return np.where(z1 == z0, z1, w * z1 + (1.0 - w) * z0)


@dataclass
class GuidanceSignals:
    d1: np.ndarray  # L1 discrepancy
    d2: np.ndarray  # norm ratio
    d3: np.ndarray  # entropy gap H(z0) - H(z1)
    eps: float
    tau: float
    # intermediates reused by the backward pass
    norm1: np.ndarray = None
    norm0: np.ndarray = None
    p1: np.ndarray = None
    h1: np.ndarray = None

    def stacked(self):
        return np.stack([self.d1, self.d2, self.d3], axis=-1)


def signals(z1, z0, tau, eps=1e-8):
    """The three main/weak discrepancy signals, one value per row."""
    if not tau > 0:
        raise InvalidHyperparameter(f"entropy temperature must be positive, got {tau}")
    z1 = np.asarray(z1, dtype=np.float64)
    z0 = np.asarray(z0, dtype=np.float64)
    if z1.shape != z0.shape:
        raise RejectedInput(f"signal inputs differ in shape: {z1.shape} vs {z0.shape}")
    d1 = np.abs(z1 - z0).sum(axis=-1)
    norm1 = np.linalg.norm(z1, axis=-1)
    norm0 = np.linalg.norm(z0, axis=-1)
    d2 = norm1 / (norm0 + eps)
    p1 = softmax_tau(z1, tau)
    h1 = entropy_rows(p1)
    h0 = entropy_rows(softmax_tau(z0, tau))
    return GuidanceSignals(d1, d2, h0 - h1, eps, tau, norm1, norm0, p1, h1)


def signals_backward(z1, z0, sig: GuidanceSignals, g1, g2, g3):
    """Gradient w.r.t. z1 given upstream gradients on d1, d2, d3 (z0 is frozen)."""
    g1, g2, g3 = (np.asarray(g)[..., None] for g in (g1, g2, g3))
    dz = g1 * np.sign(z1 - z0)
    safe = np.where(sig.norm1 > 0, sig.norm1, 1.0)[..., None]
    dz = dz + g2 * np.where(sig.norm1[..., None] > 0, z1 / (safe * (sig.norm0[..., None] + sig.eps)), 0.0)
    # d/dz H(softmax(z / tau)) = p * (-log p - H) / tau, and d3 carries -H(z1)
    p = sig.p1
    logp = np.log(np.where(p > 0, p, 1.0))
    dz = dz + g3 * p * (logp + sig.h1[..., None]) / sig.tau
    return dz


def tail_score(z1, m_tail):
    z1 = np.asarray(z1, dtype=np.float64)
    m = np.asarray(m_tail, dtype=np.float64)
    if z1.shape[-1] != m.shape[-1]:
        raise RejectedInput(f"tail mask has {m.shape[-1]} items, scores have {z1.shape[-1]}")
    return z1 @ m


def _clipped_sigmoid(x):
    return np.clip(sigmoid(x), SIGMOID_CLIP, 1.0 - SIGMOID_CLIP)


def guidance_weight(mlp_out, s_tail_std, w_max, eta):
    """[1 + (w_max - 1) sigma(mlp_out)] * (1 + eta * sigma(tail score))."""
    a = 1.0 + (w_max - 1.0) * _clipped_sigmoid(mlp_out)
    b = 1.0 + eta * _clipped_sigmoid(s_tail_std)
    return a * b


@dataclass
class TailStats:
    """Running standardization statistics for the tail score."""
    mean: float = 0.0
    std: float = 1.0
    momentum: float = 0.1

    def update(self, batch_mean, batch_std):
        m = self.momentum
        self.mean = (1 - m) * self.mean + m * float(batch_mean)
        self.std = (1 - m) * self.std + m * float(batch_std)


STD_EPS = 1e-8


class GuidanceNet:
    """Adaptive guidance network plus the weight formula around it.

    ``feature_mask`` zeroes individual discrepancy signals (ablations);
    ``raw_tail_score`` feeds the unstandardized tail score to the sigmoid.
    """

    def __init__(self, net: DenseNet, n_items, w_max=3.0, eta=0.6, tau=2.5, eps=1e-8,
                 feature_mask=(1.0, 1.0, 1.0), raw_tail_score=False, stats: TailStats | None = None):
        if net.n_in != 2 * n_items + 3 or net.n_out != 1:
            raise RejectedInput(f"guidance net must map {2 * n_items + 3} -> 1, got {net.n_in} -> {net.n_out}")
        if not w_max > 1:
            raise InvalidHyperparameter(f"w_max must exceed 1, got {w_max}")
        if eta < 0:
            raise InvalidHyperparameter(f"eta must be >= 0, got {eta}")
        self.net = net
        self.n_items = n_items
        self.w_max = float(w_max)
        self.eta = float(eta)
        self.tau = float(tau)
        self.eps = float(eps)
        self.feature_mask = np.asarray(feature_mask, dtype=np.float64)
        self.raw_tail_score = raw_tail_score
        self.stats = stats or TailStats()

    @classmethod
    def init(cls, n_items, hidden, rng, dtype=np.float64, **kw):
        sizes = [2 * n_items + 3, *hidden, 1]
        return cls(DenseNet.init(sizes, "silu", rng, dtype=dtype), n_items, **kw)

    def inputs(self, z1, z0, sig: GuidanceSignals):
        feats = sig.stacked() * self.feature_mask
        if np.ndim(z1) == 2:
            feats = feats.reshape(-1, 3)
        return np.concatenate([z1, z0, feats], axis=-1)

    def forward(self, z1, z0, m_tail, training=False):
        """Weights for a batch of (z1, z0) rows, plus a cache for backward.

        In training mode the tail score is standardized with the batch's own
        statistics (and the running statistics are not touched here).
        """
        z1 = np.atleast_2d(np.asarray(z1, dtype=np.float64))
        z0 = np.atleast_2d(np.asarray(z0, dtype=np.float64))
        sig = signals(z1, z0, self.tau, self.eps)
        u = self.inputs(z1, z0, sig)
        out, net_cache = net_forward(self.net, u)
        a = out[:, 0]
        s = tail_score(z1, m_tail)
        if self.raw_tail_score:
            mu, sd = 0.0, 1.0
            s_std = s
        elif training:
            mu, sd = s.mean(), s.std()
            s_std = (s - mu) / (sd + STD_EPS)
        else:
            mu, sd = self.stats.mean, self.stats.std
            s_std = (s - mu) / (sd + STD_EPS)
        w = guidance_weight(a, s_std, self.w_max, self.eta)
        cache = dict(z1=z1, z0=z0, sig=sig, net_cache=net_cache, a=a, s=s, s_std=s_std,
                     mu=mu, sd=sd, training=training, u=u, m_tail=np.asarray(m_tail, dtype=np.float64))
        return w, cache

    def weight(self, z1, z0, m_tail, t=None):
        return self.forward(z1, z0, m_tail, training=False)[0]

    def backward(self, cache, grad_w):
        """Returns (parameter grads, dL/dz1) for upstream ``grad_w`` of shape (batch,)."""
        grad_w = np.asarray(grad_w, dtype=np.float64)
        sa = _clipped_sigmoid(cache["a"])
        sb = _clipped_sigmoid(cache["s_std"])
        big_a = 1.0 + (self.w_max - 1.0) * sa
        big_b = 1.0 + self.eta * sb
        g_a = grad_w * big_b * (self.w_max - 1.0) * sa * (1.0 - sa)
        g_sstd = grad_w * big_a * self.eta * sb * (1.0 - sb)

        grads, g_u = net_backward(self.net, cache["net_cache"], g_a[:, None])
        n = self.n_items
        g_feats = g_u[:, 2 * n:] * self.feature_mask
        z1, z0, sig = cache["z1"], cache["z0"], cache["sig"]
        dz1 = g_u[:, :n] + signals_backward(z1, z0, sig, g_feats[:, 0], g_feats[:, 1], g_feats[:, 2])

        if self.raw_tail_score or not cache["training"]:
            g_s = g_sstd / (1.0 if self.raw_tail_score else cache["sd"] + STD_EPS)
        else:
            s, mu, sd = cache["s"], cache["mu"], cache["sd"]
            c = sd + STD_EPS
            centered = s - mu
            g_s = (g_sstd - g_sstd.mean()) / c
            if sd > 0:
                g_s = g_s - (g_sstd @ centered) / (c * c) * centered / (len(s) * sd)
        dz1 = dz1 + g_s[:, None] * cache["m_tail"][None, :]
        return grads, dz1


def aan_weight(net: GuidanceNet, z1, z0, sig: GuidanceSignals, s_tail, batch_stats=None):
    """Functional form of the learned weight for precomputed signals.

    ``batch_stats`` is a ``(mean, std)`` pair used to standardize ``s_tail``;
    ``None`` falls back to the network's running statistics.
    """
    u = net.inputs(np.atleast_2d(z1), np.atleast_2d(z0), sig)
    a = net_forward(net.net, u)[0][:, 0]
    if net.raw_tail_score:
        s_std = np.asarray(s_tail, dtype=np.float64)
    else:
        mu, sd = batch_stats if batch_stats is not None else (net.stats.mean, net.stats.std)
        s_std = (np.asarray(s_tail, dtype=np.float64) - mu) / (sd + STD_EPS)
    return guidance_weight(a, s_std, net.w_max, net.eta)


class ConstantWeight:
    """Weight provider returning the same w at every step (AG-DiffRec, w/o AG)."""

    def __init__(self, w):
        self.w = float(w)

    def weight(self, z1, z0, m_tail, t=None):
        return np.full(np.atleast_2d(z1).shape[0], self.w)


def guided_sample(f1: DenoiserModel, f0: DenoiserModel, weigher, x0_history, schedule: DiffusionSchedule,
                  m_tail, rng: SeededRng, sampling_noise=True, init_from_noise=False, trace=None):
    """Reverse chain where each step's x0 estimate is the fusion of main and
    weak denoiser outputs. ``weigher`` is a GuidanceNet or ConstantWeight.

    ``trace``, if a list, receives the per-step weights.
    """
    squeeze = np.ndim(x0_history) == 1
    x = initial_state(np.atleast_2d(x0_history), schedule, rng, init_from_noise)
    steps = range(schedule.sampling_steps, 0, -1) if schedule.sampling_steps > 0 else [1]
    for t in steps:
        z1 = denoise(f1, x, t)
        z0 = denoise(f0, x, t)
        w = weigher.weight(z1, z0, m_tail, t)
        if trace is not None:
            trace.append(np.array(w, copy=True))
        z = fuse(z1, z0, w)
        if schedule.sampling_steps == 0:
            x = z
        else:
            x = posterior_step(x, z, t, schedule, rng, noise=sampling_noise)
        if not np.all(np.isfinite(x)) or np.max(np.abs(x), initial=0.0) > BLOWUP_LIMIT:
            raise GuidanceBlowup(f"guided sampling diverged at step t={t}", step=t)
    return x[0] if squeeze else x


def ag_sample(f1, f0, w, x0_history, schedule, m_tail, rng, **kw):
    """Fixed-weight autoguidance sampling."""
    return guided_sample(f1, f0, ConstantWeight(w), x0_history, schedule, m_tail, rng, **kw)
