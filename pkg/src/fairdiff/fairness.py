"""Popularity regularization: adaptive target distribution over the three
popularity bins and the hinge-based penalty on top-K bin shares."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import HIGH, LOW
from .errors import InvalidHyperparameter, RejectedInput
from .numerics import entropy_rows, sigmoid


@dataclass
class TargetDistribution:
    target: np.ndarray
    gamma: float
    hist_mean: np.ndarray
    q: np.ndarray


def _check_q(q):
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (3,) or np.any(q < 0) or abs(q.sum() - 1.0) > 1e-9:
        raise InvalidHyperparameter(f"Q must be a distribution over 3 bins, got {q}")
    return q


def target_distribution(histories, q):
    """T = gamma * mean(H_u) + (1 - gamma) * Q with gamma = 1 - mean(H_u)[HighPop].

    ``histories`` is one H_u row per batch user.
    """
    q = _check_q(q)
    hist_mean = np.atleast_2d(np.asarray(histories, dtype=np.float64)).mean(axis=0)
    gamma = 1.0 - hist_mean[HIGH]
    return TargetDistribution(gamma * hist_mean + (1.0 - gamma) * q, float(gamma), hist_mean, q)


def topk_ids(scores, k):
    """Indices of the k largest scores per row, ties by ascending item id."""
    scores = np.atleast_2d(scores)
    return np.argsort(-scores, axis=1, kind="stable")[:, :k]


def rec_distribution_hard(scores, k, bins):
    """Bin shares of the top-k items (count / k) per row."""
    scores = np.asarray(scores, dtype=np.float64)
    squeeze = scores.ndim == 1
    if k > scores.shape[-1]:
        raise RejectedInput(f"k={k} exceeds catalog size {scores.shape[-1]}")
    top = topk_ids(scores, k)
    r = np.stack([np.bincount(bins[row], minlength=3) for row in top]).astype(np.float64) / k
    return r[0] if squeeze else r


def topk_threshold(scores, k):
    """Cut between the k-th and (k+1)-th largest scores per row.

    Every top-k item sits strictly above the cut when the boundary is
    distinct, so memberships approach 1/0 as the temperature shrinks.
    Rows with no (k+1)-th finite score get -inf (everything is in).
    """
    scores = np.atleast_2d(scores)
    if k >= scores.shape[1]:
        return np.full(scores.shape[0], -np.inf)
    top = -np.partition(-scores, (k - 1, k), axis=1)
    kth, nxt = top[:, k - 1], top[:, k]
    return np.where(np.isfinite(nxt), 0.5 * (kth + nxt), -np.inf)


@dataclass
class SoftRecCache:
    p: np.ndarray
    r: np.ndarray
    total: np.ndarray
    onehot: np.ndarray
    tau_pop: float


def rec_distribution_soft(scores, k, bins, tau_pop=0.1, theta=None, exclude=None):
    """Differentiable bin shares: membership sigma((z - theta) / tau_pop),
    with theta the cut between the k-th and (k+1)-th scores, held constant.

    ``exclude`` marks items that can never be recommended (the user's
    history); they get zero membership and do not count towards theta.
    Returns (r, cache). ``theta`` may be passed to pin the threshold.
    """
    if not tau_pop > 0:
        raise InvalidHyperparameter(f"tau_pop must be positive, got {tau_pop}")
    z = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    keep = np.ones_like(z) if exclude is None else 1.0 - (np.atleast_2d(exclude) > 0)
    if theta is None:
        theta = topk_threshold(np.where(keep > 0, z, -np.inf), k)
    p = sigmoid((z - np.asarray(theta)[:, None]) / tau_pop) * keep
    onehot = np.eye(3)[bins]
    total = p.sum(axis=1)
    r = (p @ onehot) / total[:, None]
    return r, SoftRecCache(p, r, total, onehot, tau_pop)


def rec_distribution_soft_backward(cache: SoftRecCache, grad_r):
    """dL/dz for upstream dL/dr (rows x 3)."""
    # r_c = sum_i p_i 1[c_i = c] / S  =>  dr_c/dp_i = (1[c_i = c] - r_c) / S
    g_p = (grad_r @ cache.onehot.T - np.sum(grad_r * cache.r, axis=1, keepdims=True)) / cache.total[:, None]
    # excluded items have p = 0, so their gradient vanishes here too
    return g_p * cache.p * (1.0 - cache.p) / cache.tau_pop


@dataclass
class PopLoss:
    value: float
    over_high: float
    under_low: float
    balance: float
    grad_r: np.ndarray  # dL/dr_u, one row per user


def pop_loss(r, target):
    """Unified popularity penalty over a batch of bin-share rows.

    Mean HighPop overexposure + mean LowPop underexposure + entropy shortfall
    of the batch-mean distribution relative to the target.
    """
    r = np.atleast_2d(np.asarray(r, dtype=np.float64))
    t = target.target if isinstance(target, TargetDistribution) else np.asarray(target, dtype=np.float64)
    n = r.shape[0]
    grad = np.zeros_like(r)

    over = r[:, HIGH] - t[HIGH]
    term1 = float(np.maximum(over, 0.0).mean())
    grad[:, HIGH] += (over > 0) / n

    under = t[LOW] - r[:, LOW]
    term2 = float(np.maximum(under, 0.0).mean())
    grad[:, LOW] -= (under > 0) / n

    r_bar = r.mean(axis=0)
    gap = float(entropy_rows(t) - entropy_rows(r_bar))
    term3 = max(gap, 0.0)
    if gap > 0:
        # d(-H(r_bar))/d r_bar_c = log r_bar_c + 1, spread evenly over users
        log_rb = np.log(np.where(r_bar > 0, r_bar, 1.0))
        grad += np.where(r_bar > 0, log_rb + 1.0, 0.0)[None, :] / n
    return PopLoss(term1 + term2 + term3, term1, term2, term3, grad)
