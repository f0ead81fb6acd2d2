"""Synthetic ground truth, Monte Carlo error oracles, and the budget sweep.

A sweep runs the full pipeline per new item and budget: build the rater
pool, select a subset, reveal those ratings, estimate the item, predict the
non-selected raters, and pool squared errors across items into a single
RMSE per (method, budget) row.  Items evaluate concurrently with
counter-derived RNG streams, so results do not depend on thread scheduling.
"""

from __future__ import annotations

import configparser
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import estimators, numerics, selection
from .data import RatingDataset, rater_pool, reveal
from .lfm import LatentModel, UserVariances, DEFAULT_VARIANCE_FLOOR

logger = logging.getLogger(__name__)

THREADS_ENV_VAR = "COLDSTART_THREADS"

SWEEP_CSV_COLUMNS = ("method", "budget", "rmse", "rmse_stddev", "mean_objective",
                     "items_evaluated", "items_skipped", "elapsed_ms")

# Methods whose output depends on the seed; these are repeated and averaged.
STOCHASTIC_METHODS = frozenset({"random", "cluster"})

ESTIMATOR_TAGS = ("ls", "gls", "similarity")

# Ranges for the synthetic model's global mean and biases.
_MU_RANGE = (2.5, 3.5)
_BIAS_RANGE = (-0.3, 0.3)


@dataclass(frozen=True)
class SyntheticConfig:
    """Ground-truth generator settings.

    `noise` is either a scalar (iid noise standard deviation) or a (lo, hi)
    pair from which per-user standard deviations are drawn uniformly.
    `isotropic` re-centers and whitens the user factors so the augmented
    population Gram equals n_users * I exactly.  `quantize` rounds ratings to
    integers on the 1-5 scale (which breaks the exact-formula oracles).
    """

    n_users: int
    n_items: int
    k: int
    raters_per_item: int
    noise: float | tuple = 0.5
    factor_scale: float = 1.0
    isotropic: bool = False
    quantize: bool = False
    seed: int = 0

    def __post_init__(self):
        if min(self.n_users, self.n_items, self.k, self.raters_per_item) < 1:
            raise ValueError("counts and k must be >= 1")
        if self.raters_per_item > self.n_users:
            raise ValueError("raters_per_item cannot exceed n_users")
        if self.factor_scale <= 0:
            raise ValueError("factor_scale must be positive")
        if isinstance(self.noise, tuple):
            lo, hi = self.noise
            if not 0 < lo <= hi:
                raise ValueError("noise range must satisfy 0 < lo <= hi")
        elif self.noise <= 0:
            raise ValueError("noise sigma must be positive")


def generate_synthetic(config: SyntheticConfig):
    """Sample (dataset, truth model, true per-user variances).

    Ratings follow mu + b_i + b_u + Q_i . P_u + eps with Gaussian eps; each
    item gets `raters_per_item` distinct random raters.  Timestamps count up
    in generation order.  Real-valued ratings by default.
    """
    rng = np.random.default_rng(config.seed)
    n, m, k = config.n_users, config.n_items, config.k
    mu = float(rng.uniform(*_MU_RANGE))
    bu = rng.uniform(*_BIAS_RANGE, size=n)
    bi = rng.uniform(*_BIAS_RANGE, size=m)
    P = rng.normal(0.0, config.factor_scale, size=(k, n))
    Q = rng.normal(0.0, config.factor_scale, size=(k, m))
    if config.isotropic:
        # Exact isotropy of the augmented population: zero-mean factors with
        # whitened second moment give sum_v (1,P_v)(1,P_v)^T = n * I.
        P = P - P.mean(axis=1, keepdims=True)
        _, P = numerics.whiten(P)
    if isinstance(config.noise, tuple):
        sigmas = rng.uniform(config.noise[0], config.noise[1], size=n)
    else:
        sigmas = np.full(n, float(config.noise))

    user_ids = [f"u{j}" for j in range(n)]
    item_ids = [f"i{j}" for j in range(m)]
    u_idx, i_idx, values = [], [], []
    for item in range(m):
        raters = rng.choice(n, size=config.raters_per_item, replace=False)
        eps = rng.normal(0.0, 1.0, size=config.raters_per_item) * sigmas[raters]
        vals = mu + bi[item] + bu[raters] + Q[:, item] @ P[:, raters] + eps
        u_idx.extend(int(r) for r in raters)
        i_idx.extend([item] * config.raters_per_item)
        values.extend(float(v) for v in vals)
    values = np.asarray(values)
    if config.quantize:
        values = np.clip(np.rint(values), 1.0, 5.0)
        scale = (1.0, 5.0)
    else:
        scale = (math.floor(values.min()), math.ceil(values.max()))
    timestamps = np.arange(len(values), dtype=np.int64)
    dataset = RatingDataset(user_ids, item_ids, u_idx, i_idx, values, timestamps, scale)
    truth = LatentModel(mu=mu, user_bias=bu, item_bias=bi, user_factors=P,
                        item_factors=Q, user_ids=user_ids, item_ids=item_ids)
    variances = UserVariances(
        values=np.maximum(sigmas**2, DEFAULT_VARIANCE_FLOOR),
        floor=DEFAULT_VARIANCE_FLOOR,
    )
    return dataset, truth, variances


def evaluate_rmse(predictions, clamp=None) -> float:
    """Root mean squared error over (predicted, actual) pairs.

    `clamp`, when given as (lo, hi), clamps predictions to the rating scale
    before squaring.
    """
    pairs = list(predictions)
    if not pairs:
        raise ValueError("evaluate_rmse needs at least one prediction")
    predicted = np.asarray([p for p, _ in pairs], dtype=np.float64)
    actual = np.asarray([a for _, a in pairs], dtype=np.float64)
    if clamp is not None:
        predicted = np.clip(predicted, clamp[0], clamp[1])
    return float(np.sqrt(np.mean((predicted - actual) ** 2)))


def _noise_sigmas(noise, model: LatentModel) -> np.ndarray:
    if isinstance(noise, UserVariances):
        return np.sqrt(noise.values)
    return np.full(model.n_users, float(noise))


def monte_carlo_expected_mse(truth: LatentModel, pool, subset, eval_users,
                             estimator: str = "ls", trials: int = 1000,
                             seed: int = 0, noise=0.5, ridge: float = 0.0) -> float:
    """Simulated expected MSE of an estimator for a fixed revealed subset.

    Per trial: draw fresh noise for the subset raters, fit the estimator,
    draw fresh noise for the evaluation users, and measure the mean squared
    prediction error on them; the trial average estimates the expectation the
    trace formulas of `design.expected_mse` predict.  `noise` is an iid sigma
    or a UserVariances giving each user's true variance.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if estimator not in ("ls", "gls"):
        raise ValueError(f"estimator must be 'ls' or 'gls', got {estimator!r}")
    item_idx = truth.item_index.get(pool.item)
    if item_idx is None:
        raise KeyError(f"item {pool.item!r} unknown to the truth model")
    true_vector = np.concatenate(([truth.item_bias[item_idx]],
                                  truth.item_factors[:, item_idx]))

    pos = {u: p for p, u in enumerate(pool.users)}
    sub = list(subset)
    sub_cols = [pos[u] for u in sub]
    vectors = pool.vectors[:, sub_cols]
    sigmas = _noise_sigmas(noise, truth)
    sub_sigma = sigmas[np.asarray(sub, dtype=np.int64)]
    sub_var = None
    if estimator == "gls":
        if pool.variances is not None:
            sub_var = pool.variances[sub_cols]
        else:
            sub_var = sub_sigma**2

    eval_idx = np.asarray(list(eval_users), dtype=np.int64)
    eval_vectors = np.vstack([np.ones(eval_idx.size), truth.user_factors[:, eval_idx]])
    eval_sigma = sigmas[eval_idx]
    clean_targets = vectors.T @ true_vector

    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(trials):
        eps_b = rng.normal(0.0, 1.0, size=len(sub)) * sub_sigma
        revealed = estimators.RevealedRatings(
            users=sub, targets=clean_targets + eps_b, vectors=vectors,
            variances=sub_var)
        if estimator == "gls":
            est = estimators.gls_estimate(revealed, ridge)
        else:
            est = estimators.least_squares_estimate(revealed, ridge)
        diff = eval_vectors.T @ (est.vector - true_vector)
        eps_u = rng.normal(0.0, 1.0, size=eval_idx.size) * eval_sigma
        total += float(np.mean((diff - eps_u) ** 2))
    return total / trials


@dataclass(frozen=True)
class SweepConfig:
    """One sweep: methods x budgets over the first `n_items_evaluated` new items.

    `estimator_override` forces every method through one estimator; the
    default pairing is least squares everywhere except bgs2, which uses the
    variance-weighted estimator when variances are available.  Stochastic
    methods (random, cluster) are repeated `repeats` times and averaged.
    """

    budgets: tuple
    methods: tuple
    n_items_evaluated: int
    repeats: int = 1
    seed: int = 0
    estimator_override: str | None = None
    gamma: float = 4.0
    clamp: bool = False
    ridge: float | None = None
    method_params: dict = field(default_factory=dict)

    def __post_init__(self):
        budgets = tuple(int(b) for b in self.budgets)
        if not budgets or list(budgets) != sorted(budgets):
            raise ValueError("budgets must be nonempty and ascending")
        object.__setattr__(self, "budgets", budgets)
        object.__setattr__(self, "methods", tuple(self.methods))
        for m in self.methods:
            if m not in selection.METHODS:
                raise ValueError(f"unknown method {m!r}")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if self.n_items_evaluated < 1:
            raise ValueError("n_items_evaluated must be >= 1")
        if (self.estimator_override is not None
                and self.estimator_override not in ESTIMATOR_TAGS):
            raise ValueError(f"unknown estimator {self.estimator_override!r}")


@dataclass(frozen=True)
class SweepRow:
    """One (method, budget) cell: pooled RMSE over all evaluated items."""

    method: str
    budget: int
    rmse: float
    rmse_stddev: float
    mean_objective: float
    items_evaluated: int
    items_skipped: int
    elapsed: float


def _thread_count(threads=None) -> int:
    if threads is not None:
        return max(1, int(threads))
    env = os.environ.get(THREADS_ENV_VAR)
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _derived_seed(*parts) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1, np.uint64)[0])


def _pick_estimator(method: str, override: str | None, have_variances: bool) -> str:
    if override is not None:
        return override
    if method == "bgs2" and have_variances:
        return "gls"
    return "ls"


def _evaluate_item(model, pool, heldout, method, budget, estimator, gamma,
                   ridge, clamp_scale, seeds, train, variances, method_params):
    """Run selection + estimation for one item; returns per-repeat error sums."""
    sums, counts, objectives = [], [], []
    for seed in seeds:
        request = selection.SelectionRequest(
            pool=pool, budget=budget, method=method, ridge=ridge, seed=seed,
            method_params=method_params.get(method, {}))
        result = selection.select(request, train=train, heldout=heldout)
        revealed_ratings, remainder = reveal(pool, result.selected, heldout)
        est_ridge = estimators.default_estimation_ridge(len(revealed_ratings), model.k)
        revealed = estimators.build_revealed(
            model, revealed_ratings, variances if estimator == "gls" else None)
        if estimator == "gls":
            est = estimators.gls_estimate(revealed, est_ridge)
        elif estimator == "similarity":
            raw = [r.value for r in revealed_ratings]
            est = estimators.similarity_estimate(revealed, raw, model, gamma)
        else:
            est = estimators.least_squares_estimate(revealed, est_ridge)
        users = [model.user_index[r.user] for r in remainder]
        predicted = estimators.predict_new_item_batch(model, est, users)
        actual = np.asarray([r.value for r in remainder])
        if clamp_scale is not None:
            predicted = np.clip(predicted, clamp_scale[0], clamp_scale[1])
        sums.append(float(np.sum((predicted - actual) ** 2)))
        counts.append(len(remainder))
        objectives.append(result.objective)
    return sums, counts, objectives


def run_sweep(model: LatentModel, heldout: RatingDataset, new_items, config: SweepConfig,
              train: RatingDataset | None = None,
              variances: UserVariances | None = None,
              threads=None) -> list:
    """Run every (method, budget) cell and return SweepRow records in
    (method, budget) order.

    `heldout` supplies the new items' ratings (the full pre-split dataset
    works); `train` backs the frequent/edgy baselines; `variances` attach
    per-user noise variances to the pools for bgs2/gls.  Items whose pool is
    smaller than the budget are skipped with a warning and counted.
    """
    items = list(new_items)
    if len(items) < config.n_items_evaluated:
        raise ValueError(
            f"need {config.n_items_evaluated} new items, have {len(items)}")
    items = items[: config.n_items_evaluated]
    pools = [rater_pool(heldout, model, item, variances) for item in items]
    clamp_scale = heldout.scale if config.clamp else None
    workers = _thread_count(threads)

    rows = []
    for mi, method in enumerate(config.methods):
        estimator = _pick_estimator(method, config.estimator_override,
                                    variances is not None)
        repeats = config.repeats if method in STOCHASTIC_METHODS else 1
        for bi, budget in enumerate(config.budgets):
            started = time.perf_counter()

            def work(ei):
                pool = pools[ei]
                if pool.size < budget:
                    logger.warning("skipping item %s: pool %d < budget %d",
                                   items[ei], pool.size, budget)
                    return None
                seeds = [_derived_seed(config.seed, mi, bi, ei, rep)
                         for rep in range(repeats)]
                return _evaluate_item(model, pool, heldout, method, budget,
                                      estimator, config.gamma, config.ridge,
                                      clamp_scale, seeds, train, variances,
                                      config.method_params)

            if workers > 1 and len(items) > 1:
                with ThreadPoolExecutor(max_workers=workers) as pool_exec:
                    outcomes = list(pool_exec.map(work, range(len(items))))
            else:
                outcomes = [work(ei) for ei in range(len(items))]

            evaluated = [o for o in outcomes if o is not None]
            skipped = len(outcomes) - len(evaluated)
            if not evaluated:
                raise ValueError(
                    f"no item has a pool of at least {budget} raters for {method}")
            per_repeat_rmse = []
            for rep in range(repeats):
                total_sq = sum(o[0][rep] for o in evaluated)
                total_n = sum(o[1][rep] for o in evaluated)
                per_repeat_rmse.append(math.sqrt(total_sq / total_n) if total_n else 0.0)
            objectives = [obj for o in evaluated for obj in o[2]]
            rows.append(SweepRow(
                method=method,
                budget=budget,
                rmse=float(np.mean(per_repeat_rmse)),
                rmse_stddev=float(np.std(per_repeat_rmse)),
                mean_objective=float(np.mean(objectives)),
                items_evaluated=len(evaluated),
                items_skipped=skipped,
                elapsed=time.perf_counter() - started,
            ))
    return rows


def write_sweep_csv(rows, fh, full_precision: bool = False,
                    include_timing: bool = True) -> None:
    """Write sweep rows as CSV; 6 significant digits unless `full_precision`.

    `include_timing=False` zeroes the elapsed_ms column so two identically
    seeded runs produce byte-identical files.
    """
    def fmt(x: float) -> str:
        return repr(x) if full_precision else f"{x:.6g}"

    fh.write(",".join(SWEEP_CSV_COLUMNS) + "\n")
    for row in rows:
        elapsed_ms = round(row.elapsed * 1000.0) if include_timing else 0
        fh.write(",".join((
            row.method,
            str(row.budget),
            fmt(row.rmse),
            fmt(row.rmse_stddev),
            fmt(row.mean_objective),
            str(row.items_evaluated),
            str(row.items_skipped),
            str(elapsed_ms),
        )) + "\n")


@dataclass(frozen=True)
class SweepJob:
    """A sweep config file: the SweepConfig plus data/model paths and split."""

    config: SweepConfig
    ratings_path: str
    model_path: str
    format: str = "csv"
    scale: tuple = (1.0, 5.0)
    heldout_count: int = 0
    split_seed: int = 0
    variances_path: str | None = None
    estimate_variances: bool = False
    output_path: str | None = None


def load_sweep_job(path) -> SweepJob:
    """Parse the INI-style sweep config (sections [sweep], [paths], [data],
    [split]); see the README for the schema."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise FileNotFoundError(path)
    if "sweep" not in parser or "paths" not in parser:
        raise ValueError("sweep config needs [sweep] and [paths] sections")
    sweep = parser["sweep"]
    paths = parser["paths"]
    data = parser["data"] if "data" in parser else {}
    split = parser["split"] if "split" in parser else {}

    budgets = tuple(int(b) for b in sweep["budgets"].replace(",", " ").split())
    methods = tuple(m.strip() for m in sweep["methods"].replace(",", " ").split())
    config = SweepConfig(
        budgets=budgets,
        methods=methods,
        n_items_evaluated=int(sweep["n_items"]),
        repeats=int(sweep.get("repeats", "1")),
        seed=int(sweep.get("seed", "0")),
        estimator_override=sweep.get("estimator") or None,
        gamma=float(sweep.get("gamma", "4.0")),
        clamp=sweep.get("clamp", "false").strip().lower() in ("1", "true", "yes"),
        ridge=float(sweep["ridge"]) if sweep.get("ridge") else None,
    )
    scale_text = data.get("scale", "1:5")
    lo, hi = scale_text.split(":")
    return SweepJob(
        config=config,
        ratings_path=paths["ratings"],
        model_path=paths["model"],
        format=data.get("format", "csv"),
        scale=(float(lo), float(hi)),
        heldout_count=int(split.get("heldout_count", "0")),
        split_seed=int(split.get("seed", "0")),
        variances_path=paths.get("variances") or None,
        estimate_variances=(paths.get("estimate_variances", "false").strip().lower()
                            in ("1", "true", "yes")),
        output_path=paths.get("output") or None,
    )
