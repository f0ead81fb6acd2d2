"""Latent factor model training, prediction, and variance estimation."""

import numpy as np
import pytest

from conftest import dataset_from_tuples, make_model
from coldstart.data import Rating, RatingDataset
from coldstart.lfm import (
    LatentModel,
    TrainConfig,
    TrainingDivergedError,
    UnknownIndexError,
    UserVariances,
    augment,
    estimate_user_variances,
    load_model,
    predict,
    predict_batch,
    save_model,
    train_lfm,
)


def rank_one_dataset(n=15, m=15, seed=0, scale=(-20.0, 20.0)):
    """Noiseless ratings mu + b_u + b_i + q_i * p_u with 1-dim factors."""
    rng = np.random.default_rng(seed)
    mu = 3.0
    bu = rng.uniform(-0.3, 0.3, n)
    bi = rng.uniform(-0.3, 0.3, m)
    p = rng.normal(0, 0.8, n)
    q = rng.normal(0, 0.8, m)
    rows = [(f"u{u}", f"i{i}", float(mu + bu[u] + bi[i] + q[i] * p[u]), 0)
            for u in range(n) for i in range(m)]
    return dataset_from_tuples(rows, scale=scale)


class TestTrainLfm:
    def test_recovers_noiseless_rank_one(self):
        ds = rank_one_dataset()
        history = []
        model = train_lfm(ds, TrainConfig(k=1, epochs=200, seed=4),
                          epoch_callback=lambda e, r: history.append(r))
        assert history[-1] < 0.05

    def test_constant_ratings_collapse_to_mean(self):
        rows = [(f"u{u}", f"i{i}", 3.0, 0) for u in range(6) for i in range(6)]
        model = train_lfm(dataset_from_tuples(rows), TrainConfig(k=2, epochs=50, seed=1))
        assert model.mu == pytest.approx(3.0)
        assert np.abs(model.user_bias).max() < 0.05
        assert np.abs(model.item_bias).max() < 0.05
        assert predict(model, 0, 0) == pytest.approx(3.0, abs=0.05)

    def test_netflix_dimension_gives_length_21_vectors(self):
        ds = rank_one_dataset(n=6, m=6)
        model = train_lfm(ds, TrainConfig(k=20, epochs=1, seed=0))
        assert augment(model, 0).shape == (21,)

    def test_bit_identical_given_seed(self):
        ds = rank_one_dataset(n=8, m=8)
        config = TrainConfig(k=2, epochs=5, seed=11)
        a = train_lfm(ds, config)
        b = train_lfm(ds, config)
        assert a.mu == b.mu
        assert np.array_equal(a.user_bias, b.user_bias)
        assert np.array_equal(a.item_bias, b.item_bias)
        assert np.array_equal(a.user_factors, b.user_factors)
        assert np.array_equal(a.item_factors, b.item_factors)

    def test_rmse_non_increasing_first_to_last(self):
        ds = rank_one_dataset(n=10, m=10, seed=3)
        history = []
        train_lfm(ds, TrainConfig(k=1, epochs=40, seed=2),
                  epoch_callback=lambda e, r: history.append(r))
        assert history[-1] <= history[0] + 1e-9

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reports_epoch(self):
        # AdaGrad caps effective steps near the base rate, so the rate must be
        # absurd enough that factor products overflow.
        ds = rank_one_dataset(n=6, m=6)
        with pytest.raises(TrainingDivergedError) as exc:
            train_lfm(ds, TrainConfig(k=1, epochs=50, base_learning_rate=1e160, seed=0))
        assert exc.value.epoch >= 0

    def test_empty_dataset_rejected(self):
        ds = RatingDataset([], [], [], [], [], [], (1.0, 5.0))
        with pytest.raises(ValueError, match="empty"):
            train_lfm(ds, TrainConfig(k=1, epochs=1))


class TestPredict:
    def test_zero_model_returns_mu(self, rng):
        model = make_model(zero=True, mu=3.4)
        assert predict(model, 2, 1) == pytest.approx(3.4)

    def test_arithmetic(self):
        model = LatentModel(
            mu=3.0,
            user_bias=np.array([0.5]),
            item_bias=np.array([-0.2]),
            user_factors=np.array([[0.6], [1.0]]),
            item_factors=np.array([[0.5], [0.0]]),
            user_ids=["u"], item_ids=["i"],
        )
        assert predict(model, 0, 0) == pytest.approx(3.6)

    def test_agrees_with_independent_dot_product(self, rng):
        model = make_model(rng, n_users=20, n_items=15, k=4)
        for _ in range(100):
            u = int(rng.integers(20))
            i = int(rng.integers(15))
            expected = model.mu + model.item_bias[i] + model.user_bias[u] + sum(
                model.item_factors[a, i] * model.user_factors[a, u] for a in range(4))
            assert predict(model, u, i) == pytest.approx(expected, abs=1e-12)

    def test_unknown_index(self, rng):
        model = make_model(rng)
        with pytest.raises(UnknownIndexError):
            predict(model, 99, 0)
        with pytest.raises(UnknownIndexError):
            predict(model, 0, 99)

    def test_batch_matches_scalar(self, rng):
        model = make_model(rng, n_users=9, n_items=7, k=3)
        users = rng.integers(9, size=30)
        items = rng.integers(7, size=30)
        batch = predict_batch(model, users, items)
        for u, i, value in zip(users, items, batch):
            assert value == pytest.approx(predict(model, u, i), abs=1e-12)


class TestAugment:
    def test_zero_factors(self):
        model = make_model(zero=True)
        np.testing.assert_allclose(augment(model, 0), [1.0, 0.0, 0.0])

    def test_construction(self, rng):
        model = make_model(rng)
        expected = np.concatenate(([1.0], model.user_factors[:, 3]))
        np.testing.assert_allclose(augment(model, 3), expected)

    def test_norm_identity(self, rng):
        model = make_model(rng, n_users=50)
        for u in range(50):
            v = augment(model, u)
            assert v @ v == pytest.approx(
                1.0 + model.user_factors[:, u] @ model.user_factors[:, u], rel=1e-12)


class TestUserVariances:
    def test_exact_predictions_hit_floor(self, rng):
        model = make_model(rng, n_users=4, n_items=30, k=2)
        rows = [Rating(f"u{u}", f"i{i}", predict(model, u, i), 0)
                for u in range(4) for i in range(30)]
        ds = RatingDataset.from_ratings(rows, scale=(-50.0, 50.0))
        var = estimate_user_variances(model, ds, floor=1e-4, min_ratings=5)
        np.testing.assert_allclose(var.values, 1e-4)

    def test_plus_minus_one_residuals(self, rng):
        model = make_model(rng, n_users=1, n_items=2, k=1, zero=True)
        rows = [Rating("u0", "i0", predict(model, 0, 0) + 1.0, 0),
                Rating("u0", "i1", predict(model, 0, 1) - 1.0, 0)]
        ds = RatingDataset.from_ratings(rows, scale=(-50.0, 50.0))
        var = estimate_user_variances(model, ds, floor=1e-4, min_ratings=2)
        assert var.values[0] == pytest.approx(1.0)

    def test_sparse_users_fall_back_to_global(self, rng):
        # u0 has 40 ratings, u1 one, u2 none at all (index entry only, as
        # happens for users whose every rating belongs to held-out items).
        model = make_model(rng, n_users=3, n_items=40, k=1, zero=True)
        u_idx = [0] * 40 + [1]
        i_idx = list(range(40)) + [0]
        values = [predict(model, 0, i) + (1 if i % 2 else -1) for i in range(40)]
        values.append(predict(model, 1, 0) + 2.0)
        ds = RatingDataset(model.user_ids, model.item_ids, u_idx, i_idx, values,
                           [0] * 41, scale=(-50.0, 50.0))
        var = estimate_user_variances(model, ds, floor=1e-4, min_ratings=10)
        global_mean = (40 * 1.0 + 4.0) / 41
        assert var.values[0] == pytest.approx(1.0)
        assert var.values[1] == pytest.approx(global_mean)  # only 1 rating
        assert var.values[2] == pytest.approx(global_mean)  # no ratings

    def test_two_group_separation(self, rng):
        # True sigma in {0.2, 0.8}; 300 ratings/user recovers both groups
        # within 10% median relative error.
        n, m = 30, 300
        model = make_model(rng, n_users=n, n_items=m, k=2)
        sigmas = np.where(np.arange(n) % 2 == 0, 0.2, 0.8)
        rows = []
        for u in range(n):
            noise = rng.normal(0, sigmas[u], size=m)
            for i in range(m):
                rows.append(Rating(f"u{u}", f"i{i}", predict(model, u, i) + noise[i], 0))
        ds = RatingDataset.from_ratings(rows, scale=(-100.0, 100.0))
        var = estimate_user_variances(model, ds, floor=1e-4, min_ratings=20)
        rel_err = np.abs(var.values - sigmas**2) / sigmas**2
        assert np.median(rel_err) < 0.10
        assert var.values[::2].max() < var.values[1::2].min()

    def test_floor_enforced_everywhere(self, rng):
        model = make_model(rng, n_users=5, n_items=5, k=1)
        rows = [Rating(f"u{u}", f"i{i}", predict(model, u, i), 0)
                for u in range(5) for i in range(5)]
        ds = RatingDataset.from_ratings(rows, scale=(-50.0, 50.0))
        var = estimate_user_variances(model, ds, floor=0.01, min_ratings=1)
        assert var.values.min() >= 0.01

    def test_recomputation_identity(self, rng):
        # With enough ratings the estimate equals the mean squared residual.
        model = make_model(rng, n_users=2, n_items=25, k=2)
        rng2 = np.random.default_rng(5)
        rows = [Rating(f"u{u}", f"i{i}", predict(model, u, i) + rng2.normal(0, 0.5), 0)
                for u in range(2) for i in range(25)]
        ds = RatingDataset.from_ratings(rows, scale=(-100.0, 100.0))
        var = estimate_user_variances(model, ds, floor=1e-6, min_ratings=10)
        for u in range(2):
            residuals = [r.value - predict(model, u, ds.item_index[r.item])
                         for r in ds.ratings if r.user == f"u{u}"]
            assert var.values[u] == pytest.approx(np.mean(np.square(residuals)))

    def test_invariants(self):
        with pytest.raises(ValueError):
            UserVariances(values=np.array([0.5]), floor=1.0)
        with pytest.raises(ValueError):
            UserVariances(values=np.array([1.0]), floor=0.0)


class TestSerialization:
    def test_round_trip_is_lossless(self, rng, tmp_path):
        model = make_model(rng, n_users=7, n_items=5, k=3)
        path = tmp_path / "model.json"
        save_model(model, path)
        loaded = load_model(path)
        assert loaded.mu == model.mu
        assert np.array_equal(loaded.user_bias, model.user_bias)
        assert np.array_equal(loaded.item_bias, model.item_bias)
        assert np.array_equal(loaded.user_factors, model.user_factors)
        assert np.array_equal(loaded.item_factors, model.item_factors)
        assert loaded.user_ids == model.user_ids
        assert loaded.item_ids == model.item_ids

    def test_rejects_foreign_files(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"format": "something-else", "version": 1}')
        with pytest.raises(ValueError, match="not a"):
            load_model(path)
