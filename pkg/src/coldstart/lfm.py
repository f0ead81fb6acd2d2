"""Latent factor rating model: training, prediction, per-user variance estimates.

The model predicts r_ui as mu + b_i + b_u + Q_i . P_u and acts as the
ground-truth surrogate for everything downstream: augmented user vectors
(1, P_u) feed the design objectives, and per-user residual variances feed the
variance-weighted selection and estimation paths.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

MODEL_FORMAT = "coldstart-lfm"
MODEL_VERSION = 1

# Training defaults; standard choices, tunable through TrainConfig.
DEFAULT_LEARNING_RATE = 0.05
DEFAULT_L2_PENALTY = 0.02
DEFAULT_ACCUMULATOR_EPSILON = 1e-8

# Variance-estimation defaults: users with fewer ratings fall back to the
# global residual variance, and everything is floored to keep 1/sigma^2 sane.
DEFAULT_MIN_RATINGS = 20
DEFAULT_VARIANCE_FLOOR = 1e-4


class UnknownIndexError(IndexError):
    pass


class TrainingDivergedError(ValueError):
    def __init__(self, epoch: int):
        super().__init__(f"training diverged (non-finite loss) at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    k: int
    epochs: int
    base_learning_rate: float = DEFAULT_LEARNING_RATE
    l2_penalty: float = DEFAULT_L2_PENALTY
    seed: int = 0
    accumulator_epsilon: float = DEFAULT_ACCUMULATOR_EPSILON

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.base_learning_rate <= 0:
            raise ValueError("base_learning_rate must be positive")
        if self.l2_penalty < 0:
            raise ValueError("l2_penalty must be nonnegative")
        if self.accumulator_epsilon <= 0:
            raise ValueError("accumulator_epsilon must be positive")


@dataclass(frozen=True, eq=False)
class LatentModel:
    """Trained model state: global mean, biases, and k-dim factor matrices.

    `user_factors` is (k, n) and `item_factors` (k, m), one column per entity;
    `user_ids` / `item_ids` carry the external identifiers for each index.
    Immutable after construction; safe for concurrent reads.
    """

    mu: float
    user_bias: np.ndarray
    item_bias: np.ndarray
    user_factors: np.ndarray
    item_factors: np.ndarray
    user_ids: list
    item_ids: list

    def __post_init__(self):
        k, n = self.user_factors.shape
        k2, m = self.item_factors.shape
        if k < 1 or k != k2:
            raise ValueError(f"factor dimensions disagree: {k} vs {k2}")
        if n < 1 or m < 1:
            raise ValueError("model needs at least one user and one item")
        if self.user_bias.shape != (n,) or self.item_bias.shape != (m,):
            raise ValueError("bias lengths do not match factor matrices")
        if len(self.user_ids) != n or len(self.item_ids) != m:
            raise ValueError("identifier lists do not match factor matrices")
        for arr in (self.user_bias, self.item_bias, self.user_factors, self.item_factors):
            if not np.all(np.isfinite(arr)):
                raise ValueError("model contains non-finite entries")
        if not math.isfinite(self.mu):
            raise ValueError("mu is not finite")

    @property
    def k(self) -> int:
        return self.user_factors.shape[0]

    @property
    def n_users(self) -> int:
        return self.user_factors.shape[1]

    @property
    def n_items(self) -> int:
        return self.item_factors.shape[1]

    @cached_property
    def user_index(self) -> dict:
        return {u: j for j, u in enumerate(self.user_ids)}

    @cached_property
    def item_index(self) -> dict:
        return {i: j for j, i in enumerate(self.item_ids)}


@dataclass(frozen=True, eq=False)
class UserVariances:
    """Per-user noise variance estimates, floored at `floor` > 0."""

    values: np.ndarray
    floor: float

    def __post_init__(self):
        if self.floor <= 0:
            raise ValueError("variance floor must be positive")
        if self.values.size and float(self.values.min()) < self.floor:
            raise ValueError("variance below floor")


def _check_user(model: LatentModel, user: int) -> int:
    user = int(user)
    if not 0 <= user < model.n_users:
        raise UnknownIndexError(f"unknown user index {user}")
    return user


def _check_item(model: LatentModel, item: int) -> int:
    item = int(item)
    if not 0 <= item < model.n_items:
        raise UnknownIndexError(f"unknown item index {item}")
    return item


def predict(model: LatentModel, user: int, item: int) -> float:
    """mu + b_i + b_u + Q_i . P_u, unclamped."""
    user = _check_user(model, user)
    item = _check_item(model, item)
    return float(
        model.mu
        + model.item_bias[item]
        + model.user_bias[user]
        + model.item_factors[:, item] @ model.user_factors[:, user]
    )


def predict_batch(model: LatentModel, users, items) -> np.ndarray:
    """Vectorized `predict` over parallel index arrays."""
    u = np.asarray(users, dtype=np.int64)
    i = np.asarray(items, dtype=np.int64)
    if u.size and (u.min() < 0 or u.max() >= model.n_users):
        raise UnknownIndexError("user index out of range")
    if i.size and (i.min() < 0 or i.max() >= model.n_items):
        raise UnknownIndexError("item index out of range")
    interaction = np.einsum("kr,kr->r", model.user_factors[:, u], model.item_factors[:, i])
    return model.mu + model.item_bias[i] + model.user_bias[u] + interaction


def augment(model: LatentModel, user: int) -> np.ndarray:
    """The (k+1)-dimensional augmented vector (1, P_u)."""
    user = _check_user(model, user)
    return np.concatenate(([1.0], model.user_factors[:, user]))


def train_lfm(train, config: TrainConfig, epoch_callback=None) -> LatentModel:
    """Fit the model by SGD with AdaGrad-style per-parameter step sizes.

    Each epoch visits every rating once in a seeded shuffle order, so training
    is bit-reproducible for a fixed (dataset, config).  The per-parameter step
    is base_learning_rate / sqrt(accumulated squared gradient + epsilon).
    mu is fixed at the dataset mean; biases start at zero and factors uniform
    in [-0.5/sqrt(k), 0.5/sqrt(k)], keeping initial predictions near mu.

    `epoch_callback(epoch, training_rmse)`, when given, runs after each epoch.
    """
    if train.n_ratings == 0:
        raise ValueError("cannot train on an empty dataset")
    k = config.k
    n, m = train.n_users, train.n_items
    rng = np.random.default_rng(config.seed)
    half = 0.5 / math.sqrt(k)
    P = rng.uniform(-half, half, size=(k, n))
    Q = rng.uniform(-half, half, size=(k, m))
    bu = np.zeros(n)
    bi = np.zeros(m)
    acc_bu = np.zeros(n)
    acc_bi = np.zeros(m)
    acc_P = np.zeros((k, n))
    acc_Q = np.zeros((k, m))
    mu = float(train.values.mean())

    uu, ii, rr = train.user_idx, train.item_idx, train.values
    lr = config.base_learning_rate
    l2 = config.l2_penalty
    eps = config.accumulator_epsilon

    for epoch in range(config.epochs):
        for t in rng.permutation(train.n_ratings):
            u, i = int(uu[t]), int(ii[t])
            p = P[:, u].copy()
            q = Q[:, i].copy()
            err = rr[t] - (mu + bu[u] + bi[i] + p @ q)
            if not math.isfinite(err):
                raise TrainingDivergedError(epoch)
            g = -(err - l2 * bu[u])
            acc_bu[u] += g * g
            bu[u] -= lr * g / math.sqrt(acc_bu[u] + eps)
            g = -(err - l2 * bi[i])
            acc_bi[i] += g * g
            bi[i] -= lr * g / math.sqrt(acc_bi[i] + eps)
            gp = -(err * q - l2 * p)
            acc_P[:, u] += gp * gp
            P[:, u] = p - lr * gp / np.sqrt(acc_P[:, u] + eps)
            gq = -(err * p - l2 * q)
            acc_Q[:, i] += gq * gq
            Q[:, i] = q - lr * gq / np.sqrt(acc_Q[:, i] + eps)
        if epoch_callback is not None:
            preds = mu + bu[uu] + bi[ii] + np.einsum("kr,kr->r", P[:, uu], Q[:, ii])
            rmse = float(np.sqrt(np.mean((rr - preds) ** 2)))
            if not math.isfinite(rmse):
                raise TrainingDivergedError(epoch)
            epoch_callback(epoch, rmse)

    return LatentModel(
        mu=mu,
        user_bias=bu,
        item_bias=bi,
        user_factors=P,
        item_factors=Q,
        user_ids=list(train.user_ids),
        item_ids=list(train.item_ids),
    )


def estimate_user_variances(
    model: LatentModel,
    train,
    floor: float = DEFAULT_VARIANCE_FLOOR,
    min_ratings: int = DEFAULT_MIN_RATINGS,
) -> UserVariances:
    """Per-user mean squared residual of the model on the training ratings.

    Users with fewer than `min_ratings` ratings get the global mean residual
    variance instead; every entry is then floored at `floor`.
    """
    if floor <= 0:
        raise ValueError("floor must be positive")
    if train.user_ids != model.user_ids:
        raise ValueError("dataset and model user index spaces differ")
    n = model.n_users
    if train.n_ratings == 0:
        return UserVariances(values=np.full(n, floor), floor=floor)
    residuals_sq = (train.values - predict_batch(model, train.user_idx, train.item_idx)) ** 2
    counts = np.bincount(train.user_idx, minlength=n)
    sums = np.bincount(train.user_idx, weights=residuals_sq, minlength=n)
    global_mean = float(residuals_sq.mean())
    per_user = np.where(counts >= max(min_ratings, 1),
                        sums / np.maximum(counts, 1), global_mean)
    return UserVariances(values=np.maximum(per_user, floor), floor=floor)


def save_model(model: LatentModel, path) -> None:
    """Versioned JSON serialization; lossless round trip (floats via repr)."""
    payload = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "k": model.k,
        "mu": model.mu,
        "user_ids": model.user_ids,
        "item_ids": model.item_ids,
        "user_bias": model.user_bias.tolist(),
        "item_bias": model.item_bias.tolist(),
        "user_factors": model.user_factors.tolist(),
        "item_factors": model.item_factors.tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_model(path) -> LatentModel:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != MODEL_FORMAT:
        raise ValueError(f"not a {MODEL_FORMAT} file: {path}")
    if payload.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model version {payload.get('version')}")
    model = LatentModel(
        mu=float(payload["mu"]),
        user_bias=np.asarray(payload["user_bias"], dtype=np.float64),
        item_bias=np.asarray(payload["item_bias"], dtype=np.float64),
        user_factors=np.asarray(payload["user_factors"], dtype=np.float64),
        item_factors=np.asarray(payload["item_factors"], dtype=np.float64),
        user_ids=list(payload["user_ids"]),
        item_ids=list(payload["item_ids"]),
    )
    if model.k != int(payload["k"]):
        raise ValueError("stored k disagrees with factor matrices")
    return model
