"""Interaction-log ingestion, k-core filtering, chronological splitting and
item popularity structure (HighPop/MidPop/LowPop bins, long-tail mask)."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import DataError, DegenerateCatalogError, EmptyDatasetError, InvalidHyperparameter, ParseError

HIGH, MID, LOW = 0, 1, 2
BIN_NAMES = ("HighPop", "MidPop", "LowPop")


@dataclass(frozen=True)
class Event:
    user: str
    item: str
    timestamp: float
    weight: float = 1.0


@dataclass(frozen=True)
class LoadFormat:
    sep: str = "\t"
    min_weight: float | None = None  # e.g. 2 for "play count >= 2"


def load_interactions(path, fmt: LoadFormat = LoadFormat()):
    """Read ``user<sep>item<sep>timestamp[<sep>weight]`` rows into events.

    Rows whose weight is below ``fmt.min_weight`` are dropped; the weight is
    otherwise only kept for bookkeeping, presence is what counts.
    """
    path = Path(path)
    events = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            cols = line.split(fmt.sep)
            if len(cols) not in (3, 4):
                raise ParseError(f"expected 3 or 4 fields separated by {fmt.sep!r}, got {len(cols)}",
                                 line=lineno, path=path)
            user, item = cols[0].strip(), cols[1].strip()
            if not user or not item:
                raise ParseError("empty user or item id", line=lineno, path=path)
            try:
                ts = float(cols[2])
                weight = float(cols[3]) if len(cols) == 4 else 1.0
            except ValueError as exc:
                raise ParseError(f"non-numeric timestamp or weight ({exc})", line=lineno, path=path) from None
            if not (np.isfinite(ts) and np.isfinite(weight)):
                raise ParseError("non-finite timestamp or weight", line=lineno, path=path)
            if fmt.min_weight is not None and weight < fmt.min_weight:
                continue
            events.append(Event(user, item, ts, weight))
    if not events:
        raise EmptyDatasetError(f"{path}: no interactions")
    return events


def dedup(events):
    """Keep one event per (user, item): the earliest, ties by input order."""
    best = {}
    for ev in events:
        key = (ev.user, ev.item)
        cur = best.get(key)
        if cur is None or ev.timestamp < cur.timestamp:
            best[key] = ev
    return list(best.values())


def dedup_and_kcore(events, k=5):
    """Remove duplicate pairs, then peel users and items with fewer than ``k``
    interactions until nothing changes."""
    if k < 1:
        raise InvalidHyperparameter(f"k must be >= 1, got {k}")
    events = dedup(events)
    while True:
        u_deg, i_deg = {}, {}
        for ev in events:
            u_deg[ev.user] = u_deg.get(ev.user, 0) + 1
            i_deg[ev.item] = i_deg.get(ev.item, 0) + 1
        kept = [ev for ev in events if u_deg[ev.user] >= k and i_deg[ev.item] >= k]
        if len(kept) == len(events):
            break
        events = kept
    if not events:
        raise EmptyDatasetError(f"no interactions survive {k}-core filtering")
    return events


def _id_key(raw):
    # numeric ids sort numerically, anything else lexicographically after them
    try:
        return (0, float(raw), raw)
    except ValueError:
        return (1, 0.0, raw)


@dataclass
class InteractionDataset:
    n_users: int
    n_items: int
    train: sp.csr_matrix
    val: sp.csr_matrix
    test: sp.csr_matrix
    user_ids: list = field(default_factory=list)  # dense -> original
    item_ids: list = field(default_factory=list)
    events: list = field(default_factory=list)  # per user: [(item, timestamp), ...] chronological

    @property
    def n_interactions(self):
        return int(self.train.nnz + self.val.nnz + self.test.nnz)

    def train_counts(self):
        return np.asarray(self.train.sum(axis=0)).ravel().astype(np.int64)

    def items_of(self, split, user):
        m = getattr(self, split)
        return m.indices[m.indptr[user]:m.indptr[user + 1]]


def _binary(rows, cols, shape):
    data = np.ones(len(rows), dtype=np.float64)
    m = sp.csr_matrix((data, (np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64))), shape=shape)
    m.sum_duplicates()
    m.sort_indices()
    return m


def split_counts(n, ratios=(7, 1, 2)):
    total = sum(ratios)
    n_train = n * ratios[0] // total
    n_val = n * ratios[1] // total
    return n_train, n_val, n - n_train - n_val


def chrono_split(events, ratios=(7, 1, 2)):
    """Per-user chronological split; earliest interactions go to train.

    Timestamp ties are resolved by ascending dense item id. Users whose train
    share rounds to zero are dropped.
    """
    if not events:
        raise EmptyDatasetError("cannot split an empty event list")
    user_ids = sorted({ev.user for ev in events}, key=_id_key)
    item_ids = sorted({ev.item for ev in events}, key=_id_key)
    item_index = {raw: j for j, raw in enumerate(item_ids)}
    per_user = {}
    for ev in events:
        per_user.setdefault(ev.user, []).append((item_index[ev.item], ev.timestamp))

    kept_users, timelines = [], []
    for raw in user_ids:
        timeline = sorted(per_user[raw], key=lambda e: (e[1], e[0]))
        n_train, _, _ = split_counts(len(timeline), ratios)
        if n_train == 0:
            continue
        kept_users.append(raw)
        timelines.append(timeline)
    if not kept_users:
        raise EmptyDatasetError("every user has an empty train split")

    rows = {"train": ([], []), "val": ([], []), "test": ([], [])}
    for u, timeline in enumerate(timelines):
        n_train, n_val, _ = split_counts(len(timeline), ratios)
        for pos, (item, _) in enumerate(timeline):
            part = "train" if pos < n_train else "val" if pos < n_train + n_val else "test"
            rows[part][0].append(u)
            rows[part][1].append(item)
    shape = (len(kept_users), len(item_ids))
    return InteractionDataset(
        n_users=shape[0], n_items=shape[1],
        train=_binary(*rows["train"], shape), val=_binary(*rows["val"], shape), test=_binary(*rows["test"], shape),
        user_ids=kept_users, item_ids=item_ids, events=timelines,
    )


def popularity_order(counts):
    """Item ids from most to least popular; ties by ascending id."""
    counts = np.asarray(counts)
    return np.lexsort((np.arange(len(counts)), -counts))


def popularity_bins(counts):
    """HighPop = most popular items whose cumulative share first reaches 20%,
    LowPop = least popular items whose cumulative share first reaches 20%
    (never overlapping HighPop), MidPop the rest."""
    counts = np.asarray(counts, dtype=np.int64)
    if len(counts) < 3:
        raise DegenerateCatalogError(f"need at least 3 items to form popularity bins, got {len(counts)}")
    total = int(counts.sum())
    if total <= 0:
        raise DegenerateCatalogError("train split has no interactions")
    order = popularity_order(counts)
    bins = np.full(len(counts), MID, dtype=np.int8)
    cum = 0
    for i in order:
        bins[i] = HIGH
        cum += int(counts[i])
        if 5 * cum >= total:
            break
    cum = 0
    for i in order[::-1]:
        if bins[i] == HIGH:
            break
        bins[i] = LOW
        cum += int(counts[i])
        if 5 * cum >= total:
            break
    return bins


def tail_mask(counts):
    """Long-tail items: everything outside the short head, where the head is
    the most popular items cumulatively covering 80% of train interactions."""
    counts = np.asarray(counts, dtype=np.int64)
    if len(counts) < 3:
        raise DegenerateCatalogError(f"need at least 3 items, got {len(counts)}")
    total = int(counts.sum())
    if total <= 0:
        raise DegenerateCatalogError("train split has no interactions")
    order = popularity_order(counts)
    head_size = int(np.searchsorted(5 * np.cumsum(counts[order]), 4 * total)) + 1
    mask = np.ones(len(counts), dtype=bool)
    mask[order[:head_size]] = False
    return mask


def history_distribution(user_items, bins):
    """Share of a user's train interactions in each popularity bin."""
    user_items = np.asarray(user_items, dtype=np.int64)
    if user_items.size == 0:
        raise DataError("user has no train interactions")
    hist = np.bincount(bins[user_items], minlength=3).astype(np.float64)
    return hist / hist.sum()


@dataclass
class PopularityProfile:
    counts: np.ndarray
    bins: np.ndarray
    tail: np.ndarray
    history: np.ndarray  # (n_users, 3); all-zero rows for users without train history
    q: np.ndarray = field(default_factory=lambda: np.array([0.2, 0.3, 0.5]))

    @classmethod
    def from_dataset(cls, ds: InteractionDataset, q=(0.2, 0.3, 0.5)):
        counts = ds.train_counts()
        bins = popularity_bins(counts)
        tail = tail_mask(counts)
        onehot = np.eye(3)[bins]
        hist = ds.train @ onehot
        totals = hist.sum(axis=1, keepdims=True)
        hist = np.divide(hist, totals, out=np.zeros_like(hist), where=totals > 0)
        return cls(counts, bins, tail, hist, np.asarray(q, dtype=np.float64))

    def bin_onehot(self):
        return np.eye(3)[self.bins]

    def has_history(self):
        return self.history.sum(axis=1) > 0


def dataset_stats(n_users, n_items, n_interactions):
    sparsity = 100.0 * (1.0 - n_interactions / (n_users * n_items))
    return n_users, n_items, n_interactions, sparsity


def stats_of(ds: InteractionDataset):
    return dataset_stats(ds.n_users, ds.n_items, ds.n_interactions)


# persisted layout -----------------------------------------------------------

DATASET_FILES = ("mapping.tsv", "train.tsv", "val.tsv", "test.tsv", "popularity.tsv", "stats.tsv")


def _write_pairs(path, m):
    coo = m.tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r, c in zip(coo.row[order], coo.col[order]):
            fh.write(f"{r}\t{c}\n")


def save_dataset(ds: InteractionDataset, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "mapping.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("kind\toriginal\tdense\n")
        for j, raw in enumerate(ds.user_ids):
            fh.write(f"user\t{raw}\t{j}\n")
        for j, raw in enumerate(ds.item_ids):
            fh.write(f"item\t{raw}\t{j}\n")
    for split in ("train", "val", "test"):
        _write_pairs(out / f"{split}.tsv", getattr(ds, split))
    counts = ds.train_counts()
    bins = popularity_bins(counts)
    tail = tail_mask(counts)
    with open(out / "popularity.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("item\tcount\tbin\ttail\n")
        for i in range(ds.n_items):
            fh.write(f"{i}\t{counts[i]}\t{BIN_NAMES[bins[i]]}\t{int(tail[i])}\n")
    users, items, inter, sparsity = stats_of(ds)
    with open(out / "stats.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("users\titems\tinteractions\tsparsity_pct\n")
        fh.write(f"{users}\t{items}\t{inter}\t{sparsity:.2f}\n")
    return out


def _read_pairs(path, shape):
    rows, cols = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                r, c = line.split("\t")
                rows.append(int(r))
                cols.append(int(c))
            except ValueError:
                raise ParseError("expected dense user<TAB>item", line=lineno, path=path) from None
    return _binary(rows, cols, shape)


def load_dataset(data_dir):
    d = Path(data_dir)
    missing = [f for f in DATASET_FILES if not (d / f).exists()]
    if missing:
        raise DataError(f"{d}: not a prepared dataset directory (missing {', '.join(missing)})")
    users, items = [], []
    with open(d / "mapping.tsv", encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            kind, raw, _ = line.rstrip("\n").split("\t")
            (users if kind == "user" else items).append(raw)
    shape = (len(users), len(items))
    mats = {s: _read_pairs(d / f"{s}.tsv", shape) for s in ("train", "val", "test")}
    return InteractionDataset(shape[0], shape[1], mats["train"], mats["val"], mats["test"], users, items)


def dataset_digest(data_dir):
    """Content hash of the dataset files in a directory (names and bytes).

    Run manifests and other extra files next to them do not count.
    """
    h = hashlib.sha256()
    for name in sorted(DATASET_FILES):
        p = Path(data_dir) / name
        if p.is_file():
            h.update(name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()
