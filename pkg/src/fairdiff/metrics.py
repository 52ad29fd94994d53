"""Top-K accuracy and item-side fairness metrics.

Recommendation lists are int arrays of shape (users, K), padded with -1 when
fewer than K items are eligible. Relevance is a dense boolean array or a
scipy sparse matrix over (users, items).
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import RejectedInput, UndefinedMetric

CUTOFFS = (10, 20, 50, 100)
LOWER_IS_BETTER = {"DeltaExp": True, "Gini": True, "Coverage": False, "APLT": False}


@dataclass
class RecommendationList:
    items: np.ndarray  # (users, K), -1 padded
    lengths: np.ndarray
    short: np.ndarray  # True where fewer than K items were eligible

    @property
    def k(self):
        return self.items.shape[1]


def topk_masked(scores, k, mask=None):
    """Highest-k unmasked items per row, ties by ascending item id."""
    if k < 1:
        raise RejectedInput(f"k must be >= 1, got {k}")
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    if mask is None:
        mask = np.zeros(scores.shape, dtype=bool)
    else:
        mask = _dense_bool(mask)
        if mask.shape != scores.shape:
            raise RejectedInput(f"mask shape {mask.shape} != scores shape {scores.shape}")
    keyed = np.where(mask, np.inf, -scores)
    order = np.argsort(keyed, axis=1, kind="stable")[:, :k]
    eligible = (~mask).sum(axis=1)
    lengths = np.minimum(eligible, k)
    pos = np.arange(order.shape[1])[None, :]
    items = np.where(pos < lengths[:, None], order, -1)
    if items.shape[1] < k:
        items = np.pad(items, ((0, 0), (0, k - items.shape[1])), constant_values=-1)
    return RecommendationList(items, lengths, lengths < k)


def _dense_bool(m):
    if sp.issparse(m):
        return m.toarray() > 0
    return np.asarray(m) > 0


def _items(lists):
    return lists.items if isinstance(lists, RecommendationList) else np.atleast_2d(np.asarray(lists))


def hits_matrix(lists, relevant, k):
    items = _items(lists)[:, :k]
    rel = _dense_bool(relevant)
    valid = items >= 0
    hit = np.take_along_axis(rel, np.where(valid, items, 0), axis=1)
    return hit & valid


def _discounts(k):
    return 1.0 / np.log2(np.arange(2, k + 2))


def ndcg_per_user(lists, relevant, k):
    """Binary-relevance NDCG@k per user; NaN where the user has nothing relevant."""
    hit = hits_matrix(lists, relevant, k)
    n_rel = _dense_bool(relevant).sum(axis=1)
    disc = _discounts(k)
    dcg = (hit * disc[: hit.shape[1]]).sum(axis=1)
    ideal_cum = np.concatenate([[0.0], np.cumsum(disc)])
    idcg = ideal_cum[np.minimum(n_rel, k)]
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n_rel > 0, dcg / np.where(idcg > 0, idcg, 1.0), np.nan)


def recall_per_user(lists, relevant, k):
    hit = hits_matrix(lists, relevant, k)
    n_rel = _dense_bool(relevant).sum(axis=1)
    denom = np.minimum(n_rel, k)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n_rel > 0, hit.sum(axis=1) / np.where(denom > 0, denom, 1), np.nan)


def _mean_defined(v):
    v = v[~np.isnan(v)]
    return float(v.mean()) if v.size else float("nan")


def ndcg_at_k(lists, relevant, k):
    return _mean_defined(ndcg_per_user(lists, relevant, k))


def recall_at_k(lists, relevant, k):
    return _mean_defined(recall_per_user(lists, relevant, k))


def aplt_per_user(lists, tail, k):
    items = _items(lists)[:, :k]
    tail = np.asarray(tail, dtype=bool)
    return (np.where(items >= 0, tail[np.maximum(items, 0)], False)).sum(axis=1) / k


def aplt_at_k(lists, tail, k):
    items = _items(lists)
    if items.shape[0] == 0:
        raise UndefinedMetric("APLT needs at least one list")
    return float(aplt_per_user(items, tail, k).mean())


def exposure_counts(lists, n_items, k):
    items = _items(lists)[:, :k]
    return np.bincount(items[items >= 0].ravel(), minlength=n_items)


def delta_exp(lists, tail, k):
    """(mean head exposure - mean tail exposure) / their sum, per-item means."""
    tail = np.asarray(tail, dtype=bool)
    if tail.all() or not tail.any():
        raise UndefinedMetric("exposure disparity needs non-empty head and tail groups")
    e = exposure_counts(lists, len(tail), k).astype(np.float64)
    head_mean = e[~tail].sum() / (~tail).sum()
    tail_mean = e[tail].sum() / tail.sum()
    if head_mean + tail_mean == 0:
        raise UndefinedMetric("no exposure at all")
    return float((head_mean - tail_mean) / (head_mean + tail_mean))


def gini_index(exposure):
    """Gini of a non-negative vector (ascending-sorted rank formula)."""
    e = np.sort(np.asarray(exposure, dtype=np.float64))
    n = len(e)
    if n < 2:
        raise UndefinedMetric("Gini needs at least two items")
    total = e.sum()
    if total == 0:
        raise UndefinedMetric("Gini of an all-zero exposure vector")
    idx = np.arange(1, n + 1)
    return float(np.sum((2 * idx - n - 1) * e) / (n * total))


def gini(lists, n_items, k):
    return gini_index(exposure_counts(lists, n_items, k))


def coverage(lists, n_items, k):
    items = _items(lists)[:, :k]
    return float(np.unique(items[items >= 0]).size / n_items)


@dataclass
class TradeOff:
    value: float
    infinite: bool = False  # fairness moved with no accuracy loss


def tradeoff(metric, base_value, method_value, base_ndcg, method_ndcg, lower_is_better=None):
    """Relative fairness gain divided by relative NDCG loss against a baseline."""
    if lower_is_better is None:
        if metric not in LOWER_IS_BETTER:
            raise RejectedInput(f"unknown metric direction for {metric!r}")
        lower_is_better = LOWER_IS_BETTER[metric]
    if base_ndcg <= 0:
        raise UndefinedMetric("baseline NDCG must be positive")
    if base_value == 0:
        raise UndefinedMetric(f"baseline {metric} is zero")
    if lower_is_better:
        gain = (base_value - method_value) / base_value
    else:
        gain = (method_value - base_value) / base_value
    loss = (base_ndcg - method_ndcg) / base_ndcg
    if loss == 0:
        if gain == 0:
            return TradeOff(0.0)
        return TradeOff(float(np.copysign(np.inf, gain)), infinite=True)
    return TradeOff(float(gain / loss))


# reference recommenders --------------------------------------------------------

def baseline_random(rng, mask, k):
    """k distinct unmasked items per row, uniformly at random."""
    mask = _dense_bool(mask)
    gen = rng.generator if hasattr(rng, "generator") else rng
    return topk_masked(gen.random(mask.shape), k, mask)


def baseline_mostpop(train_counts, mask, k):
    mask = _dense_bool(mask)
    scores = np.broadcast_to(np.asarray(train_counts, dtype=np.float64), mask.shape)
    return topk_masked(scores, k, mask)


# reports ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    model: str
    values: dict = field(default_factory=dict)  # (k, metric) -> float
    users: np.ndarray = None
    per_user: dict = field(default_factory=dict)  # (k, metric) -> per-user vector

    def get(self, metric, k):
        return self.values[(k, metric)]

    def rows(self):
        for (k, metric), v in sorted(self.values.items(), key=lambda kv: (kv[0][0], kv[0][1])):
            yield self.model, k, metric, v


def fairness_accuracy(lists, relevant, tail, n_items, ks, model="model", users=None):
    """Full report over a set of users given their top-max(ks) lists."""
    rel = _dense_bool(relevant)
    keep = rel.sum(axis=1) > 0
    items = _items(lists)[keep]
    rel = rel[keep]
    users = np.arange(len(keep))[keep] if users is None else np.asarray(users)[keep]
    rep = MetricsReport(model, users=users)
    for k in ks:
        nd = ndcg_per_user(items, rel, k)
        ap = aplt_per_user(items, tail, k)
        rep.values[(k, "NDCG")] = _mean_defined(nd)
        rep.values[(k, "Recall")] = _mean_defined(recall_per_user(items, rel, k))
        rep.values[(k, "APLT")] = float(ap.mean())
        rep.values[(k, "DeltaExp")] = delta_exp(items, tail, k)
        rep.values[(k, "Gini")] = gini(items, n_items, k)
        rep.values[(k, "Coverage")] = coverage(items, n_items, k)
        rep.per_user[(k, "NDCG")] = nd
        rep.per_user[(k, "APLT")] = ap
    return rep


def eval_threads():
    try:
        return max(1, int(os.environ.get("FAIRDIFF_THREADS", "1")))
    except ValueError:
        return 1


def rank_users(score_fn, history, mask, k, chunk=256, threads=None):
    """Top-k lists for every user, scoring users in fixed chunks.

    ``score_fn(chunk_index, user_ids, history_rows)`` returns a score matrix;
    chunks are reassembled in user order, so results do not depend on the
    number of threads.
    """
    n = history.shape[0]
    bounds = [(s, min(s + chunk, n)) for s in range(0, n, chunk)]

    def work(arg):
        idx, (lo, hi) = arg
        users = np.arange(lo, hi)
        hist = history[lo:hi]
        hist = hist.toarray() if sp.issparse(hist) else np.asarray(hist)
        m = mask[lo:hi]
        scores = score_fn(idx, users, hist.astype(np.float64))
        return topk_masked(scores, k, m).items

    threads = threads or eval_threads()
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(work, enumerate(bounds)))
    else:
        parts = [work(b) for b in enumerate(bounds)]
    return np.concatenate(parts, axis=0) if parts else np.zeros((0, k), dtype=np.int64)
