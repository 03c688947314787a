import numpy as np
import pytest

from tube.data import Dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_dataset(
    rng,
    num_records=60,
    num_labeled=20,
    num_surrogates=2,
    num_risk_factors=2,
    grades=2,
    beta=None,
):
    """Small synthetic cohort with a real signal.

    The latent class follows a logistic model in the risk factors;
    surrogates are noisy shifts of the class; chart grades agree with
    the class 80% of the time and spread uniformly otherwise.
    """
    if beta is None:
        beta = np.concatenate([[-0.3], 0.8 * np.ones(num_risk_factors)])
    g = rng.normal(size=(num_records, num_risk_factors))
    logit = beta[0] + g @ beta[1:]
    y = (rng.uniform(size=num_records) < 1.0 / (1.0 + np.exp(-logit))).astype(int)
    x = y[:, None] + rng.normal(scale=0.9, size=(num_records, num_surrogates))
    idx = np.where(y == 1, grades, 0)
    flip = rng.uniform(size=num_records) > 0.8
    idx = np.where(flip, rng.integers(0, grades + 1, num_records), idx)
    labels = np.full(num_records, np.nan)
    labeled = np.zeros(num_records, dtype=bool)
    labeled[:num_labeled] = True
    labels[labeled] = idx[labeled] / grades
    # the initializer needs both proxy classes present
    labels[0], labels[1] = 0.0, 1.0
    return Dataset(labels, labeled, x, g, grades)


@pytest.fixture
def small_data(rng):
    return make_dataset(rng)
