import numpy as np
import pytest

from counterval.data import LongitudinalData


def random_longitudinal(rng, n=None, max_visits=5, treated_fraction=0.5):
    """A small random dataset with absorbing treatment and admin censoring."""
    n = n if n is not None else rng.integers(3, 40)
    time = rng.uniform(0.2, max_visits, size=n)
    admin = rng.random(n) < 0.3
    time[admin] = max_visits
    event = np.where(admin, 0, (rng.random(n) < 0.75).astype(int))
    cov = rng.normal(10.0, 4.0, size=(n, max_visits, 1))
    treat = np.zeros((n, max_visits), dtype=np.int8)
    starters = rng.random(n) < treated_fraction
    start_visit = rng.integers(0, max_visits, size=n)
    for i in range(n):
        if starters[i]:
            treat[i, start_visit[i]:] = 1
    n_visits = np.clip(np.ceil(time).astype(int), 0, max_visits)
    grid = np.arange(max_visits)
    attended = grid[None, :] < n_visits[:, None]
    cov[~attended] = np.nan
    treat[~attended] = -1
    return LongitudinalData(
        ids=np.arange(n), time=time, event=event.astype(np.int8),
        covariates=cov, treatment=treat,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
