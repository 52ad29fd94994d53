"""Gaussian diffusion over interaction vectors with an x0-predicting denoiser."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidHyperparameter, RejectedInput, TrainingDivergence
from .numerics import DenseNet, SeededRng, net_backward, net_forward


@dataclass(frozen=True)
class DiffusionSchedule:
    steps: int
    sampling_steps: int
    betas: np.ndarray
    alphas: np.ndarray
    alphas_cumprod: np.ndarray  # index t-1 holds alpha_bar_t

    def alpha_bar(self, t):
        """alpha_bar_t with the alpha_bar_0 = 1 convention; accepts arrays."""
        t = np.asarray(t)
        padded = np.concatenate([[1.0], self.alphas_cumprod])
        return padded[t]

    def posterior_coefs(self, t):
        """(coef on x0-estimate, coef on x_t, variance) of q(x_{t-1} | x_t, x0)."""
        if t == 1:
            # alpha_bar_0 = 1 makes these exact; the general formula loses ~1e-11 to cancellation
            return 1.0, 0.0, 0.0
        beta = self.betas[t - 1]
        ab_t = self.alpha_bar(t)
        ab_prev = self.alpha_bar(t - 1)
        c_x0 = beta * math.sqrt(ab_prev) / (1.0 - ab_t)
        c_xt = (1.0 - ab_prev) * math.sqrt(self.alphas[t - 1]) / (1.0 - ab_t)
        var = beta * (1.0 - ab_prev) / (1.0 - ab_t)
        return c_x0, c_xt, var


def build_schedule(steps, sampling_steps, beta_start, beta_end):
    """Linear beta schedule over ``steps`` training steps."""
    if steps < 1:
        raise InvalidHyperparameter(f"steps must be >= 1, got {steps}")
    if not 0 <= sampling_steps <= steps:
        raise InvalidHyperparameter(f"sampling_steps must lie in [0, {steps}], got {sampling_steps}")
    if not 0 < beta_start <= beta_end < 1:
        raise InvalidHyperparameter(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
    alphas = 1.0 - betas
    return DiffusionSchedule(int(steps), int(sampling_steps), betas, alphas, np.cumprod(alphas))


def _check_t(t, upper):
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > upper):
        raise RejectedInput(f"timestep out of range [1, {upper}]: {t}")


def q_sample(x0, t, noise, schedule: DiffusionSchedule):
    """Corrupt ``x0`` to step ``t`` (scalar or one step per row)."""
    _check_t(t, schedule.steps)
    x0 = np.asarray(x0, dtype=np.float64)
    if np.shape(noise) != x0.shape:
        raise RejectedInput(f"noise shape {np.shape(noise)} != x0 shape {x0.shape}")
    ab = schedule.alpha_bar(t)
    if x0.ndim == 2 and np.ndim(ab) == 1:
        ab = ab[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def timestep_embedding(t, dim, max_period=10000.0):
    """Sinusoidal embedding, shape (len(t), dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=np.float64) / max(half, 1))
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


class DenoiserModel:
    """MLP predicting x0 from ``[x_t ; emb(t)]``."""

    def __init__(self, net: DenseNet, n_items: int, emb_dim: int = 10, role: str = "main"):
        if net.n_in != n_items + emb_dim or net.n_out != n_items:
            raise RejectedInput(
                f"denoiser net maps {net.n_in}->{net.n_out}, expected {n_items + emb_dim}->{n_items}")
        self.net = net
        self.n_items = n_items
        self.emb_dim = emb_dim
        self.role = role
        if role == "weak":
            self.freeze()

    @classmethod
    def init(cls, n_items, hidden, rng, emb_dim=10, role="main", dtype=np.float64):
        sizes = [n_items + emb_dim, *hidden, n_items]
        return cls(DenseNet.init(sizes, "tanh", rng, dtype=dtype), n_items, emb_dim, role)

    def freeze(self):
        for p in self.net.params():
            p.flags.writeable = False

    @property
    def frozen(self):
        return not self.net.params()[0].flags.writeable

    def as_weak(self):
        return DenoiserModel(self.net.copy(), self.n_items, self.emb_dim, role="weak")

    def copy(self, role=None):
        return DenoiserModel(self.net.copy(), self.n_items, self.emb_dim, role=role or self.role)

    def _inputs(self, x_t, t):
        x_t = np.asarray(x_t, dtype=np.float64)
        squeeze = x_t.ndim == 1
        x = x_t[None, :] if squeeze else x_t
        if x.shape[1] != self.n_items:
            raise RejectedInput(f"denoiser expects {self.n_items} items, got {x.shape[1]}")
        t = np.broadcast_to(np.asarray(t), (x.shape[0],))
        return np.concatenate([x, timestep_embedding(t, self.emb_dim)], axis=1), squeeze

    def forward(self, x_t, t):
        h, squeeze = self._inputs(x_t, t)
        z, cache = net_forward(self.net, h)
        return (z[0] if squeeze else z), cache

    def backward(self, cache, grad_z):
        grads, _ = net_backward(self.net, cache, np.atleast_2d(grad_z))
        return grads


def denoise(model: DenoiserModel, x_t, t):
    return model.forward(x_t, t)[0]


def sample_timesteps(rng: SeededRng, batch, steps):
    return rng.integers(1, steps + 1, size=batch)


def base_loss(model: DenoiserModel, x0, t, noise, schedule: DiffusionSchedule):
    """Mean over the batch of ||denoise(x_t, t) - x0||^2, with its gradients.

    ``t`` and ``noise`` are explicit so the loss is a deterministic function of
    the parameters; :func:`base_loss_sampled` draws them from an rng.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if x0.shape[0] == 0:
        raise RejectedInput("empty batch")
    x_t = q_sample(x0, t, noise, schedule)
    z, cache = model.forward(x_t, t)
    diff = z - x0
    loss = float(np.sum(diff * diff) / x0.shape[0])
    if not np.isfinite(loss):
        raise TrainingDivergence("base reconstruction loss is not finite")
    grads = model.backward(cache, 2.0 * diff / x0.shape[0])
    return loss, grads


def base_loss_sampled(model, x0, rng: SeededRng, schedule):
    x0 = np.atleast_2d(x0)
    t = sample_timesteps(rng, x0.shape[0], schedule.steps)
    noise = rng.normal(x0.shape)
    return base_loss(model, x0, t, noise, schedule)


def posterior_step(x_t, z, t, schedule: DiffusionSchedule, rng: SeededRng | None = None, noise=True):
    """One reverse step: posterior mean given the x0 estimate ``z``, plus
    ``sigma_t * N(0, I)`` when ``t > 1`` and ``noise`` is on."""
    _check_t(t, schedule.steps)
    c_x0, c_xt, var = schedule.posterior_coefs(int(t))
    mean = c_x0 * z + c_xt * x_t
    if t > 1 and noise:
        if rng is None:
            raise RejectedInput("posterior_step needs an rng to add noise")
        mean = mean + math.sqrt(var) * rng.normal(np.shape(mean))
    return mean


def initial_state(x0_history, schedule, rng, init_from_noise=False):
    """Starting point of the reverse chain at ``schedule.sampling_steps``."""
    x0_history = np.asarray(x0_history, dtype=np.float64)
    t0 = schedule.sampling_steps
    if t0 == 0:
        return x0_history
    noise = rng.normal(x0_history.shape)
    if init_from_noise:
        return noise
    return q_sample(x0_history, t0, noise, schedule)


def sample_unguided(model: DenoiserModel, x0_history, schedule: DiffusionSchedule, rng: SeededRng,
                    sampling_noise=True, init_from_noise=False):
    """Reverse the chain from the (corrupted) history; returns item scores.

    With ``sampling_steps == 0`` the history is denoised once at t=1.
    """
    x = initial_state(x0_history, schedule, rng, init_from_noise)
    if schedule.sampling_steps == 0:
        return denoise(model, x, 1)
    for t in range(schedule.sampling_steps, 0, -1):
        z = denoise(model, x, t)
        x = posterior_step(x, z, t, schedule, rng, noise=sampling_noise)
    return x
