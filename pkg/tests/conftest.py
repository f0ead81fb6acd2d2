"""Shared builders for the test suite."""

import numpy as np
import pytest

from coldstart.data import RaterPool, Rating, RatingDataset
from coldstart.lfm import LatentModel


def make_pool(vectors, variances=None, users=None, item="item"):
    """RaterPool straight from a (d, B) vector matrix."""
    vectors = np.asarray(vectors, dtype=np.float64)
    b = vectors.shape[1]
    if users is None:
        users = list(range(b))
    return RaterPool(
        item=item,
        users=list(users),
        user_ids=[f"u{u}" for u in users],
        vectors=vectors,
        variances=None if variances is None else np.asarray(variances, dtype=np.float64),
    )


def random_pool(rng, n_users, k, factor_scale=1.0, variance_range=None):
    """Pool of augmented vectors (1, P_v) with Gaussian factors."""
    vectors = np.vstack([np.ones(n_users),
                         rng.normal(0.0, factor_scale, size=(k, n_users))])
    variances = None
    if variance_range is not None:
        lo, hi = variance_range
        variances = rng.uniform(lo, hi, size=n_users) ** 2
    return make_pool(vectors, variances)


def make_model(rng=None, n_users=6, n_items=4, k=2, mu=3.0, zero=False):
    if zero:
        bu = np.zeros(n_users)
        bi = np.zeros(n_items)
        P = np.zeros((k, n_users))
        Q = np.zeros((k, n_items))
    else:
        bu = rng.uniform(-0.4, 0.4, n_users)
        bi = rng.uniform(-0.4, 0.4, n_items)
        P = rng.normal(size=(k, n_users))
        Q = rng.normal(size=(k, n_items))
    return LatentModel(
        mu=mu, user_bias=bu, item_bias=bi, user_factors=P, item_factors=Q,
        user_ids=[f"u{j}" for j in range(n_users)],
        item_ids=[f"i{j}" for j in range(n_items)],
    )


def dataset_from_tuples(rows, scale=(1.0, 5.0)):
    return RatingDataset.from_ratings(
        [Rating(u, i, v, t) for u, i, v, t in rows], scale=scale)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
