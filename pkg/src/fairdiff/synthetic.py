"""Seeded synthetic implicit-feedback logs with Zipf-distributed item popularity.

Users belong to latent taste clusters so that there is personal signal to
learn on top of the popularity skew.
"""

from __future__ import annotations

import numpy as np

from .data import Event


def zipf_events(n_users=500, n_items=200, per_user=20, exponent=1.2, n_clusters=8, affinity=6.0, seed=0):
    rng = np.random.default_rng(seed)
    pop = 1.0 / np.arange(1, n_items + 1) ** exponent
    pop = pop[rng.permutation(n_items)]
    item_cluster = rng.integers(0, n_clusters, size=n_items)
    user_cluster = rng.integers(0, n_clusters, size=n_users)
    events = []
    for u in range(n_users):
        weight = pop * np.where(item_cluster == user_cluster[u], affinity, 1.0)
        n = int(np.clip(rng.poisson(per_user), 8, n_items // 2))
        items = rng.choice(n_items, size=n, replace=False, p=weight / weight.sum())
        times = np.sort(rng.integers(1_000_000, 2_000_000, size=n))
        events.extend(Event(str(u), str(i), float(ts)) for i, ts in zip(items, times))
    return events


def write_events(events, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ev in events:
            fh.write(f"{ev.user}\t{ev.item}\t{int(ev.timestamp)}\n")
    return path
