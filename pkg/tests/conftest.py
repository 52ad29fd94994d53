import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fairdiff.data import Event, PopularityProfile, chrono_split, dedup_and_kcore
from fairdiff.synthetic import zipf_events

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset():
    """A ~120-user synthetic dataset that trains in well under a second per epoch."""
    events = zipf_events(n_users=120, n_items=60, per_user=14, seed=3)
    ds = chrono_split(dedup_and_kcore(events, 5))
    return ds, PopularityProfile.from_dataset(ds)


def toy_events(rows):
    return [Event(str(u), str(i), float(t)) for u, i, t in rows]
