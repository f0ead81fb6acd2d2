"""Estimate a new item's bias and factor vector from revealed ratings.

Three estimators share one output type: ridged least squares, variance-
weighted (generalized) least squares, and a similarity-based baseline that
averages the factor vectors of raters who liked the item.  All of them work
on bias-adjusted targets (r_vi - b_v - mu) so the unknowns reduce to the
(k+1)-vector (b_i, Q_i) against augmented rater vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lfm import LatentModel, UserVariances, _check_user
from . import numerics


class InsufficientDesignError(ValueError):
    """The unridged normal equations are singular for this set of raters."""


class MissingVariancesError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ItemEstimate:
    """Estimated (bias, factor vector) for a new item, tagged by estimator."""

    bias: float
    factors: np.ndarray
    method: str

    def __post_init__(self):
        if not np.isfinite(self.bias) or not np.all(np.isfinite(self.factors)):
            raise ValueError("estimate contains non-finite entries")

    @property
    def vector(self) -> np.ndarray:
        """The concatenated (k+1)-vector (bias, factors)."""
        return np.concatenate(([self.bias], self.factors))


@dataclass(frozen=True, eq=False)
class RevealedRatings:
    """Revealed ratings of one item, prepared for estimation.

    `targets` holds r_vi - b_v - mu per rater, `vectors` the (k+1, B) matrix
    of augmented rater vectors, and `variances` the optional per-rater noise
    variances; all share order.
    """

    users: list
    targets: np.ndarray
    vectors: np.ndarray
    variances: np.ndarray | None = None

    def __post_init__(self):
        b = len(self.users)
        if self.targets.shape != (b,):
            raise ValueError("targets length must match users")
        if self.vectors.ndim != 2 or self.vectors.shape[1] != b:
            raise ValueError(f"vectors must have {b} columns, got shape {self.vectors.shape}")
        if self.variances is not None and self.variances.shape != (b,):
            raise ValueError("variances length must match users")

    @property
    def size(self) -> int:
        return len(self.users)


def build_revealed(model: LatentModel, ratings, variances: UserVariances | None = None
                   ) -> RevealedRatings:
    """Turn revealed Rating records into estimation inputs against `model`."""
    users = []
    for r in ratings:
        idx = model.user_index.get(r.user)
        if idx is None:
            raise KeyError(f"rater {r.user!r} unknown to the model")
        users.append(idx)
    idx = np.asarray(users, dtype=np.int64)
    values = np.asarray([r.value for r in ratings], dtype=np.float64)
    targets = values - model.user_bias[idx] - model.mu
    vectors = np.vstack([np.ones(len(users)), model.user_factors[:, idx]])
    var = None
    if variances is not None:
        var = np.asarray(variances.values, dtype=np.float64)[idx]
    return RevealedRatings(users=users, targets=targets, vectors=vectors, variances=var)


def default_estimation_ridge(revealed_count: int, k: int) -> float:
    """Real shrinkage for small designs, numerical safety only for large ones."""
    return 0.1 if revealed_count < 2 * (k + 1) else 1e-6 * (k + 1)


def _solve(vectors, weights, targets, ridge, method):
    g = numerics.gram(vectors, weights, ridge)
    rhs = vectors @ (targets if weights is None else weights * targets)
    try:
        state = numerics.invert(g)
    except numerics.NotPositiveDefiniteError as exc:
        raise InsufficientDesignError(
            f"singular normal equations at ridge {ridge:g}; "
            "add raters or use a positive ridge"
        ) from exc
    x = state.inverse @ rhs
    return ItemEstimate(bias=float(x[0]), factors=x[1:].copy(), method=method)


def least_squares_estimate(revealed: RevealedRatings, ridge: float = 0.0) -> ItemEstimate:
    """Ridged least squares: (ridge*I + sum_v v v^T)^{-1} sum_v target_v * v.

    With ridge 0 and a full-rank design this is the exact analytic solution of
    the normal equations.
    """
    if revealed.size == 0 and ridge <= 0:
        raise InsufficientDesignError("no revealed ratings and no ridge")
    return _solve(revealed.vectors, None, revealed.targets, ridge, "ls")


def gls_estimate(revealed: RevealedRatings, ridge: float = 0.0) -> ItemEstimate:
    """Variance-weighted least squares, unbiased under zero-mean independent noise.

    Each rater's rank-one term and target are weighted 1/sigma_v^2; with equal
    variances and ridge 0 this returns exactly the least-squares estimate.
    """
    if revealed.variances is None:
        raise MissingVariancesError("gls_estimate requires per-rater variances")
    if revealed.size == 0 and ridge <= 0:
        raise InsufficientDesignError("no revealed ratings and no ridge")
    weights = 1.0 / revealed.variances
    return _solve(revealed.vectors, weights, revealed.targets, ridge, "gls")


def similarity_estimate(revealed: RevealedRatings, raw_ratings, model: LatentModel,
                        gamma: float = 4.0) -> ItemEstimate:
    """Average-of-raters baseline.

    bias = mean over all raters of (r_vi - b_v) - mu; factors = mean P_v over
    raters with r_vi >= gamma.  When nobody clears gamma the factor vector is
    zero, degrading to the bias-only model.  Needs the raw rating values for
    the threshold, order-aligned with `revealed`.
    """
    if revealed.size == 0:
        raise ValueError("similarity estimate needs at least one revealed rating")
    raw = np.asarray(raw_ratings, dtype=np.float64)
    if raw.shape != (revealed.size,):
        raise ValueError("raw_ratings must align with revealed users")
    idx = np.asarray(revealed.users, dtype=np.int64)
    bias = float(np.mean(raw - model.user_bias[idx]) - model.mu)
    liked = raw >= gamma
    if liked.any():
        factors = model.user_factors[:, idx[liked]].mean(axis=1)
    else:
        factors = np.zeros(model.k)
    return ItemEstimate(bias=bias, factors=factors, method="similarity")


def predict_new_item(model: LatentModel, estimate: ItemEstimate, user: int) -> float:
    """mu + estimated bias + b_u + estimated factors . P_u."""
    user = _check_user(model, user)
    return float(
        model.mu
        + estimate.bias
        + model.user_bias[user]
        + estimate.factors @ model.user_factors[:, user]
    )


def predict_new_item_batch(model: LatentModel, estimate: ItemEstimate, users) -> np.ndarray:
    """Vectorized `predict_new_item` over a user index array."""
    idx = np.asarray(users, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= model.n_users):
        raise KeyError("user index out of range")
    return (model.mu + estimate.bias + model.user_bias[idx]
            + estimate.factors @ model.user_factors[:, idx])
