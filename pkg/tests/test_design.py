"""Objectives, expected-error formulas, phi, steepness, structure checkers."""

import itertools
import math

import numpy as np
import pytest

from conftest import make_pool, random_pool
from coldstart.design import (
    DegeneratePoolError,
    DesignObjective,
    MissingObjectiveDataError,
    check_monotone,
    check_supermodular,
    expected_mse,
    objective_value,
    phi,
    phi_empty,
    steepness,
    table_monotone_decreasing_violations,
    table_supermodularity_violations,
)


def direct_trace(vectors, cols, ridge, weights=None):
    """Independent objective evaluation via numpy.linalg.inv."""
    v = vectors[:, list(cols)]
    w = np.ones(v.shape[1]) if weights is None else np.asarray(weights)[list(cols)]
    g = (v * w) @ v.T + ridge * np.eye(vectors.shape[0])
    return float(np.trace(np.linalg.inv(g)))


class TestObjectiveValue:
    def test_identity_gram_gives_dimension(self):
        pool = make_pool(np.eye(3))
        obj = DesignObjective(kind="a_opt", ridge=0.0)
        assert objective_value(obj, pool, [0, 1, 2]) == pytest.approx(3.0)

    def test_empty_subset_is_ridge_only(self, rng):
        pool = random_pool(rng, 5, k=2)
        obj = DesignObjective(kind="a_opt", ridge=0.25)
        assert objective_value(obj, pool, []) == pytest.approx(3 / 0.25)

    def test_matches_naive_oracle(self, rng):
        pool = random_pool(rng, 8, k=2, variance_range=(0.3, 1.0))
        subset = [1, 3, 4, 6, 7]
        a = DesignObjective(kind="a_opt", ridge=0.01)
        assert objective_value(a, pool, subset) == pytest.approx(
            direct_trace(pool.vectors, subset, 0.01), rel=1e-10)
        w = DesignObjective(kind="weighted_a_opt", ridge=0.01)
        assert objective_value(w, pool, subset) == pytest.approx(
            direct_trace(pool.vectors, subset, 0.01, weights=1 / pool.variances),
            rel=1e-10)

    def test_weighted_requires_variances(self, rng):
        pool = random_pool(rng, 5, k=2)
        with pytest.raises(MissingObjectiveDataError):
            objective_value(DesignObjective(kind="weighted_a_opt"), pool, [0, 1, 2])

    def test_transductive_against_direct_trace(self, rng):
        pool = random_pool(rng, 7, k=2)
        sigma = np.cov(rng.normal(size=(3, 30)))
        obj = DesignObjective(kind="transductive", ridge=0.05,
                              target_second_moment=sigma)
        subset = [0, 2, 5]
        v = pool.vectors[:, subset]
        expected = float(np.trace(sigma @ np.linalg.inv(v @ v.T + 0.05 * np.eye(3))))
        assert objective_value(obj, pool, subset) == pytest.approx(expected, rel=1e-10)

    def test_monotone_decreasing_in_the_subset(self, rng):
        pool = random_pool(rng, 7, k=2)
        obj = DesignObjective(kind="a_opt", ridge=1e-6 * 3)
        users = list(pool.users)
        for size in range(1, 7):
            bigger = objective_value(obj, pool, users[: size + 1])
            smaller = objective_value(obj, pool, users[:size])
            assert bigger <= smaller + 1e-9

    def test_scaling_vectors_scales_objective(self, rng):
        vectors = np.vstack([np.ones(6), rng.normal(size=(2, 6))])
        subset = [0, 2, 3, 5]
        for c in (2.0, 0.5):
            base = direct_trace(vectors, subset, 0.0)
            scaled = direct_trace(c * vectors, subset, 0.0)
            assert scaled == pytest.approx(base / c**2, rel=1e-10)


class TestExpectedMse:
    def test_identity_gram_arithmetic(self):
        pool = make_pool(np.eye(2))  # k = 1, trace of inverse Gram = 2
        obj = DesignObjective(kind="a_opt", ridge=0.0, sigma=1.0)
        assert expected_mse(obj, pool, [0, 1]) == pytest.approx(3.0)

    def test_hetero_reduces_to_iid_for_equal_variances(self, rng):
        sigma = 0.6
        vectors = np.vstack([np.ones(6), rng.normal(size=(2, 6))])
        pool = make_pool(vectors, variances=np.full(6, sigma**2))
        subset = [0, 1, 2, 4]
        iid = DesignObjective(kind="a_opt", ridge=0.0, sigma=sigma)
        het = DesignObjective(kind="weighted_a_opt", ridge=0.0)
        a = expected_mse(iid, pool, subset)
        b = expected_mse(het, pool, subset, eval_variances=np.full(10, sigma**2))
        assert a == pytest.approx(b, rel=1e-10)

    def test_affine_in_phi(self, rng):
        # E[MSE] = sigma^2 * (phi(S) + phi_full + 1)
        pool = random_pool(rng, 6, k=2)
        ridge = 1e-6 * 3
        sigma = 0.4
        obj = DesignObjective(kind="a_opt", ridge=ridge, sigma=sigma)
        full = objective_value(DesignObjective(kind="a_opt", ridge=ridge),
                               pool, pool.users)
        for subset in ([0, 1, 2], [1, 2, 3, 4], pool.users):
            lhs = expected_mse(obj, pool, subset)
            rhs = sigma**2 * (phi(pool, subset, ridge) + full + 1.0)
            assert lhs == pytest.approx(rhs, rel=1e-9)

    def test_iid_needs_sigma(self, rng):
        pool = random_pool(rng, 5, k=1)
        with pytest.raises(MissingObjectiveDataError):
            expected_mse(DesignObjective(kind="a_opt"), pool, [0, 1])


class TestPhi:
    def test_zero_at_full_pool(self, rng):
        pool = random_pool(rng, 6, k=2)
        assert phi(pool, pool.users, 1e-6 * 3) == pytest.approx(0.0, abs=1e-12)

    def test_positive_on_proper_subsets(self, rng):
        pool = random_pool(rng, 6, k=2)
        for size in (1, 3, 5):
            assert phi(pool, pool.users[:size], 1e-6 * 3) > 0.0

    def test_empty_extension_matches_exhaustive_pair_oracle(self, rng):
        pool = random_pool(rng, 6, k=1)
        ridge = 2e-6
        full = direct_trace(pool.vectors, range(6), ridge)
        best = -math.inf
        elements = range(6)
        for r_a in range(1, 6):
            for a in itertools.combinations(elements, r_a):
                rest = [e for e in elements if e not in a]
                for r_b in range(1, len(rest) + 1):
                    for b in itertools.combinations(rest, r_b):
                        val = (direct_trace(pool.vectors, a, ridge)
                               + direct_trace(pool.vectors, b, ridge)
                               - direct_trace(pool.vectors, a + b, ridge)) - full
                        best = max(best, val)
        assert phi(pool, [], ridge) == pytest.approx(best, rel=1e-9)

    def test_large_pool_uses_singleton_complement_bound(self, rng):
        pool = random_pool(rng, 14, k=1)
        ridge = 2e-6
        full = direct_trace(pool.vectors, range(14), ridge)
        expected = max(
            direct_trace(pool.vectors, [x], ridge)
            + direct_trace(pool.vectors, [e for e in range(14) if e != x], ridge)
            - 2 * full
            for x in range(14))
        assert phi_empty(pool, ridge) == pytest.approx(expected, rel=1e-9)


class TestSteepness:
    def test_matches_hand_rolled_formula(self, rng):
        pool = make_pool(2.0 * np.eye(3))  # orthogonal users, identical scale
        ridge = 1e-4
        report = steepness(pool, ridge)
        f_empty = phi_empty(pool, ridge)
        ratios = []
        for x in pool.users:
            f_x = phi(pool, [x], ridge)
            f_drop = phi(pool, [u for u in pool.users if u != x], ridge)
            ratios.append(((f_empty - f_x) - f_drop) / (f_empty - f_x))
        assert report.s == pytest.approx(max(ratios), rel=1e-9)
        assert report.t == pytest.approx(report.s / (1 - report.s), rel=1e-9)

    def test_identical_users_are_steep(self):
        # All-duplicate pool: dropping one user barely moves phi at the full
        # set, so s is large; the value must match the direct formula.
        vectors = np.tile(np.array([[1.0], [0.5]]), (1, 5))
        pool = make_pool(vectors)
        ridge = 1e-6 * 2
        report = steepness(pool, ridge)
        f_empty = phi_empty(pool, ridge)
        f_x = phi(pool, [0], ridge)
        f_drop = phi(pool, pool.users[1:], ridge)
        assert report.s == pytest.approx(((f_empty - f_x) - f_drop) / (f_empty - f_x),
                                         rel=1e-6)
        assert report.s > 0.85
        assert report.argmax_user in pool.users

    def test_bound_factor_at_least_one(self, rng):
        for n in (3, 6, 9):
            pool = random_pool(rng, n, k=2)
            report = steepness(pool, ridge=1e-6 * 3)
            assert 0.0 <= report.s <= 1.0
            assert report.approximation_factor >= 1.0

    def test_degenerate_zero_pool_rejected(self):
        pool = make_pool(np.zeros((2, 4)))
        with pytest.raises((DegeneratePoolError, ValueError)):
            steepness(pool, ridge=0.1)


class TestStructureCheckers:
    def test_modular_function_has_no_violations(self):
        n = 4
        values = np.array([-bin(m).count("1") for m in range(1 << n)], dtype=float)
        report = table_supermodularity_violations(values, n)
        assert report.ok
        assert report.checked > 0

    def test_sqrt_cardinality_is_flagged(self):
        n = 4
        values = np.array([math.sqrt(bin(m).count("1")) for m in range(1 << n)])
        report = table_supermodularity_violations(values, n)
        assert not report.ok
        a, b, x, gap = report.violations[0]
        assert gap > 0
        assert (a & (1 << x)) == 0 and (b & (1 << x)) == 0 and (a & ~b) == 0

    def test_monotone_checker_flags_increases(self):
        n = 3
        good = np.array([-bin(m).count("1") for m in range(1 << n)], dtype=float)
        assert table_monotone_decreasing_violations(good, n).ok
        bad = np.array([bin(m).count("1") for m in range(1 << n)], dtype=float)
        assert not table_monotone_decreasing_violations(bad, n).ok

    def test_trace_objective_is_monotone_on_random_pools(self, rng):
        for _ in range(10):
            pool = random_pool(rng, 7, k=2)
            assert check_monotone(pool, ridge=1e-6 * 3).ok

    def test_sampled_path_runs_on_large_pools(self, rng):
        pool = random_pool(rng, 16, k=2)
        report = check_supermodular(pool, ridge=1e-6 * 3, samples=200, seed=3)
        assert report.checked == 200
        assert not report.exhaustive

    def test_exhaustive_path_counts_triples(self, rng):
        pool = random_pool(rng, 5, k=1)
        report = check_supermodular(pool, ridge=1e-6 * 2)
        assert report.exhaustive
        # Per x: every B subseteq E minus x contributes its proper submasks,
        # except B = empty which contributes one degenerate pair.
        n = 5
        per_x = 3 ** (n - 1) - 2 ** (n - 1) + 1
        assert report.checked == n * per_x


class TestArgminScaleInvariance:
    def test_brute_force_argmin_invariant_under_scaling(self, rng):
        from coldstart.selection import brute_force_optimal

        vectors = np.vstack([np.ones(7), rng.normal(size=(2, 7))])
        obj = DesignObjective(kind="a_opt", ridge=0.0)
        base = brute_force_optimal(make_pool(vectors), 4, obj)
        scaled = brute_force_optimal(make_pool(3.0 * vectors), 4, obj)
        assert base.selected == scaled.selected
        assert scaled.objective == pytest.approx(base.objective / 9.0, rel=1e-9)
