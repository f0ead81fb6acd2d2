"""Budget-constrained rater subset selection.

Two backward greedy eliminations drive the package: `bgs1` minimizes the
plain trace-of-inverse-Gram objective and `bgs2` its variance-weighted
counterpart.  Both start from the full pool and repeatedly drop the rater
whose removal inflates the objective least, maintaining the inverse with
Sherman-Morrison downdates (O(d^2) per candidate) and refactorizing
periodically to bound drift.  Alongside them: a forward greedy variant and
the usual field of baselines (clustering, random, frequent raters, edgy
raters, early birds) plus a brute-force optimum for small pools.

Determinism contract: every method breaks ties toward the smallest user
index and seeds all randomness explicitly, so selections are reproducible
bit for bit.
"""

from __future__ import annotations

import heapq
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics
from .data import RaterPool
from .design import DesignObjective, objective_value

METHODS = (
    "bgs1",
    "bgs2",
    "forward_greedy",
    "cluster",
    "random",
    "frequent",
    "edgy",
    "early_birds",
    "brute_force",
)

# Relative tolerance under which two candidate deltas count as tied.
TIE_RTOL = 1e-12

# Pools above this are pre-thinned to the largest-norm users before a
# backward greedy run; full Netflix-size pools would dominate the runtime.
DEFAULT_POOL_CAP = 20000

BRUTE_FORCE_GUARD = 10**6


class SelectionError(ValueError):
    pass


@dataclass(frozen=True)
class SelectionRequest:
    """One selection task: which method, on which pool, at what budget."""

    pool: RaterPool
    budget: int
    method: str
    ridge: float | None = None
    seed: int = 0
    method_params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not 1 <= self.budget <= self.pool.size:
            raise ValueError(
                f"budget must be in [1, {self.pool.size}], got {self.budget}")


@dataclass(frozen=True)
class SelectionResult:
    """Selected users (order = selection order where meaningful), the final
    objective value of the selected set, and wall time in seconds."""

    method: str
    selected: list
    objective: float | None
    elapsed: float


def _check_budget(pool: RaterPool, budget: int):
    if not 1 <= budget <= pool.size:
        raise SelectionError(f"budget must be in [1, {pool.size}], got {budget}")


def _tied(delta: float, best: float) -> bool:
    return abs(delta - best) <= TIE_RTOL * max(abs(best), abs(delta))


def _argmin_with_ties(deltas: np.ndarray, allowed: np.ndarray, users: np.ndarray):
    """Position of the smallest delta; ties go to the smallest user index."""
    candidates = np.flatnonzero(allowed)
    if candidates.size == 0:
        return None
    best = float(deltas[candidates].min())
    pick, pick_user = -1, None
    for pos in candidates:
        d = float(deltas[pos])
        if d == best or _tied(d, best):
            u = int(users[pos])
            if pick_user is None or u < pick_user:
                pick, pick_user = int(pos), u
    return pick


def _final_objective(vectors, weights, ridge) -> float:
    return numerics.invert(numerics.gram(vectors, weights, ridge)).trace_inv


def _thin_pool(pool: RaterPool, cap: int):
    """Keep the cap-many users of largest augmented-vector norm (ties by
    smallest user index).  Returns positions into the pool, in pool order."""
    if pool.size <= cap:
        return np.arange(pool.size)
    norms = np.linalg.norm(pool.vectors, axis=0)
    ranked = sorted(range(pool.size), key=lambda p: (-norms[p], pool.users[p]))
    return np.asarray(sorted(ranked[:cap]), dtype=np.int64)


def _backward_greedy(pool: RaterPool, budget: int, ridge: float | None,
                     weights: np.ndarray | None, method: str,
                     pool_cap: int = DEFAULT_POOL_CAP, on_step=None) -> SelectionResult:
    start = time.perf_counter()
    _check_budget(pool, budget)
    positions = _thin_pool(pool, max(pool_cap, budget))
    vectors = pool.vectors[:, positions]
    users = np.asarray(pool.users)[positions]
    w = np.ones(len(positions)) if weights is None else weights[positions]
    d = vectors.shape[0]
    if ridge is None:
        ridge = numerics.default_ridge(d)

    active = list(range(len(positions)))
    state = numerics.invert(numerics.gram(vectors, None if weights is None else w, ridge))
    downdates = 0

    def refactor():
        act_w = None if weights is None else w[active]
        return numerics.invert(numerics.gram(vectors[:, active], act_w, ridge))

    for _ in range(len(active) - budget):
        vact = vectors[:, active]
        wact = w[active]
        z = state.inverse @ vact
        quad_inv = np.einsum("ij,ij->j", vact, z)
        quad_inv2 = np.einsum("ij,ij->j", z, z)
        denom = 1.0 - wact * quad_inv
        allowed = denom > numerics.REMOVAL_TOLERANCE
        if not allowed.any():
            # Incremental state too stale to certify any removal: rebuild.
            state = refactor()
            downdates = 0
            z = state.inverse @ vact
            quad_inv = np.einsum("ij,ij->j", vact, z)
            quad_inv2 = np.einsum("ij,ij->j", z, z)
            denom = 1.0 - wact * quad_inv
            allowed = denom > numerics.REMOVAL_TOLERANCE
        if not allowed.any():
            raise SelectionError(
                "every candidate removal would make the design singular; "
                "increase the ridge")
        with np.errstate(divide="ignore", invalid="ignore"):
            deltas = np.where(allowed, wact * quad_inv2 / denom, np.inf)
        local = _argmin_with_ties(deltas, allowed, users[active])
        pos = active[local]
        state = numerics.apply_downdate(state, vectors[:, pos], float(w[pos]))
        active.pop(local)
        downdates += 1
        if downdates % numerics.REFACTOR_INTERVAL == 0:
            state = refactor()
        if on_step is not None:
            on_step(int(users[pos]), state.trace_inv)

    selected = [int(users[p]) for p in active]
    objective = _final_objective(vectors[:, active],
                                 None if weights is None else w[active], ridge)
    return SelectionResult(method=method, selected=selected, objective=objective,
                           elapsed=time.perf_counter() - start)


def bgs1(pool: RaterPool, budget: int, ridge: float | None = None,
         pool_cap: int = DEFAULT_POOL_CAP, on_step=None) -> SelectionResult:
    """Backward greedy elimination under the unweighted trace objective."""
    return _backward_greedy(pool, budget, ridge, None, "bgs1", pool_cap, on_step)


def bgs2(pool: RaterPool, budget: int, ridge: float | None = None,
         pool_cap: int = DEFAULT_POOL_CAP, on_step=None) -> SelectionResult:
    """Backward greedy elimination with each rater weighted 1/sigma_v^2."""
    if pool.variances is None:
        raise SelectionError("bgs2 requires per-user variances on the pool")
    return _backward_greedy(pool, budget, ridge, 1.0 / pool.variances, "bgs2",
                            pool_cap, on_step)


def forward_greedy(pool: RaterPool, budget: int, ridge: float | None = None,
                   on_step=None) -> SelectionResult:
    """Grow the design from empty, adding the rater that shrinks the trace most.

    Additions reuse the downdate algebra with negated weights; the ridge keeps
    every intermediate state nonsingular.
    """
    start = time.perf_counter()
    _check_budget(pool, budget)
    vectors = pool.vectors
    users = np.asarray(pool.users)
    d = vectors.shape[0]
    if ridge is None:
        ridge = numerics.default_ridge(d)
    if ridge <= 0:
        raise SelectionError("forward greedy requires a positive ridge")

    remaining = list(range(pool.size))
    chosen = []
    state = numerics.invert(numerics.gram(vectors[:, :0], None, ridge))
    updates = 0
    for _ in range(budget):
        vrem = vectors[:, remaining]
        z = state.inverse @ vrem
        quad_inv = np.einsum("ij,ij->j", vrem, z)
        quad_inv2 = np.einsum("ij,ij->j", z, z)
        deltas = -quad_inv2 / (1.0 + quad_inv)
        local = _argmin_with_ties(deltas, np.ones(len(remaining), dtype=bool),
                                  users[remaining])
        pos = remaining[local]
        state = numerics.apply_downdate(state, vectors[:, pos], -1.0)
        remaining.pop(local)
        chosen.append(pos)
        updates += 1
        if updates % numerics.REFACTOR_INTERVAL == 0:
            state = numerics.invert(numerics.gram(vectors[:, chosen], None, ridge))
        if on_step is not None:
            on_step(int(users[pos]), state.trace_inv)

    selected = [int(users[p]) for p in chosen]
    objective = _final_objective(vectors[:, chosen], None, ridge)
    return SelectionResult(method="forward_greedy", selected=selected,
                           objective=objective, elapsed=time.perf_counter() - start)


def _greedy_farthest_seeds(points: np.ndarray, c: int, rng) -> list:
    first = int(rng.integers(len(points)))
    seeds = [first]
    min_dist = np.linalg.norm(points - points[first], axis=1)
    while len(seeds) < c:
        nxt = int(np.argmax(min_dist))  # first occurrence = smallest index
        seeds.append(nxt)
        min_dist = np.minimum(min_dist, np.linalg.norm(points - points[nxt], axis=1))
    return seeds


def _kmeans_cosine(points: np.ndarray, c: int, rng, max_iter: int = 100,
                   tol: float = 1e-6):
    """Spherical k-means on unit vectors; returns (labels, centroids)."""
    centroids = points[_greedy_farthest_seeds(points, c, rng)].copy()
    for _ in range(max_iter):
        sims = points @ centroids.T
        labels = np.argmax(sims, axis=1)
        moved = 0.0
        for j in range(c):
            members = points[labels == j]
            if len(members) == 0:
                # Re-seed an empty cluster from the farthest point.
                dist = 1.0 - sims.max(axis=1)
                center = points[int(np.argmax(dist))].copy()
            else:
                center = members.mean(axis=0)
                norm = np.linalg.norm(center)
                center = centroids[j] if norm == 0 else center / norm
            moved = max(moved, float(np.linalg.norm(center - centroids[j])))
            centroids[j] = center
        if moved < tol:
            break
    labels = np.argmax(points @ centroids.T, axis=1)
    return labels, centroids


def cluster_select(pool: RaterPool, budget: int, mode: str = "one_per_cluster",
                   c: int | None = None, seed: int = 0) -> SelectionResult:
    """k-means the pool in cosine geometry and sample from the clusters.

    one_per_cluster: budget-many clusters, rater nearest each centroid.
    proportional: c < budget clusters, per-cluster quotas proportional to
    size (largest-remainder rounding), uniform within cluster.
    Zero factor vectors cannot be normalized and are never selected.
    """
    start = time.perf_counter()
    _check_budget(pool, budget)
    if mode not in ("one_per_cluster", "proportional"):
        raise SelectionError(f"unknown cluster mode {mode!r}")
    factors = pool.vectors[1:, :]
    norms = np.linalg.norm(factors, axis=0)
    usable = np.flatnonzero(norms > 0)
    if usable.size < budget:
        raise SelectionError(
            f"only {usable.size} pool users have nonzero factor vectors; "
            f"cannot select {budget}")
    points = (factors[:, usable] / norms[usable]).T
    users = np.asarray(pool.users)[usable]
    rng = np.random.default_rng(seed)

    if mode == "one_per_cluster":
        c = budget
    else:
        if c is None:
            c = max(2, budget // 5)
        if not 1 <= c < budget:
            raise SelectionError(f"proportional mode needs 1 <= c < budget, got c={c}")
    c = min(c, usable.size)
    labels, centroids = _kmeans_cosine(points, c, rng)

    chosen: list[int] = []
    if mode == "one_per_cluster":
        taken = np.zeros(len(users), dtype=bool)
        for j in range(c):
            members = np.flatnonzero(labels == j)
            if members.size == 0:
                continue
            sims = points[members] @ centroids[j]
            best = members[_argmin_with_ties(-sims, np.ones(members.size, dtype=bool),
                                             users[members])]
            chosen.append(int(best))
            taken[best] = True
        while len(chosen) < budget:
            # Degenerate clustering left empty clusters: fill greedily by
            # distance from the picks, deterministically.
            free = np.flatnonzero(~taken)
            min_sim = (points[free] @ points[chosen].T).max(axis=1)
            best = free[_argmin_with_ties(min_sim, np.ones(free.size, dtype=bool),
                                          users[free])]
            chosen.append(int(best))
            taken[best] = True
    else:
        sizes = np.bincount(labels, minlength=c)
        exact = budget * sizes / usable.size
        quotas = np.floor(exact).astype(int)
        shortfall = budget - int(quotas.sum())
        if shortfall:
            remainders = exact - quotas
            for j in heapq.nlargest(shortfall, range(c),
                                    key=lambda j: (remainders[j], -j)):
                quotas[j] += 1
        for j in range(c):
            members = np.flatnonzero(labels == j)
            take = min(int(quotas[j]), members.size)
            if take:
                picks = rng.choice(members, size=take, replace=False)
                chosen.extend(int(p) for p in picks)
        while len(chosen) < budget:  # quotas hit an undersized cluster
            free = np.setdiff1d(np.arange(len(users)), np.asarray(chosen))
            chosen.append(int(rng.choice(free)))

    selected = [int(users[p]) for p in chosen]
    objective = _selected_objective(pool, selected)
    return SelectionResult(method="cluster", selected=selected, objective=objective,
                           elapsed=time.perf_counter() - start)


def random_select(pool: RaterPool, budget: int, seed: int = 0) -> SelectionResult:
    """Uniform sample without replacement from the pool."""
    start = time.perf_counter()
    _check_budget(pool, budget)
    rng = np.random.default_rng(seed)
    picks = rng.choice(pool.size, size=budget, replace=False)
    selected = [int(pool.users[p]) for p in picks]
    return SelectionResult(method="random", selected=selected,
                           objective=_selected_objective(pool, selected),
                           elapsed=time.perf_counter() - start)


def _ranked_selection(pool: RaterPool, budget: int, scores: dict, method: str,
                      start: float) -> SelectionResult:
    """Top-budget pool users by descending score, ties to smallest user index."""
    order = sorted(pool.users, key=lambda u: (-scores.get(u, 0.0), u))
    selected = order[:budget]
    return SelectionResult(method=method, selected=selected,
                           objective=_selected_objective(pool, selected),
                           elapsed=time.perf_counter() - start)


def _dataset_user_stat(pool: RaterPool, dataset, stat: str) -> dict:
    """Per-pool-user rating count or rating variance in `dataset`, keyed by
    model user index, matched through external identifiers."""
    counts = np.bincount(dataset.user_idx, minlength=dataset.n_users).astype(np.float64)
    if stat == "count":
        values = counts
    else:
        sums = np.bincount(dataset.user_idx, weights=dataset.values,
                           minlength=dataset.n_users)
        sumsq = np.bincount(dataset.user_idx, weights=dataset.values**2,
                            minlength=dataset.n_users)
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = np.where(counts > 0, sums / counts, 0.0)
            values = np.where(counts >= 2, sumsq / np.maximum(counts, 1) - mean**2, 0.0)
        values = np.maximum(values, 0.0)  # guard tiny negative fp noise
    out = {}
    for midx, uid in zip(pool.users, pool.user_ids):
        j = dataset.user_index.get(uid)
        out[midx] = float(values[j]) if j is not None else 0.0
    return out


def frequent_raters(pool: RaterPool, budget: int, dataset) -> SelectionResult:
    """The pool users with the most training ratings."""
    start = time.perf_counter()
    _check_budget(pool, budget)
    return _ranked_selection(pool, budget, _dataset_user_stat(pool, dataset, "count"),
                             "frequent", start)


def edgy_raters(pool: RaterPool, budget: int, dataset) -> SelectionResult:
    """The pool users with the largest training-rating (population) variance;
    users with fewer than two ratings score zero."""
    start = time.perf_counter()
    _check_budget(pool, budget)
    return _ranked_selection(pool, budget, _dataset_user_stat(pool, dataset, "variance"),
                             "edgy", start)


def early_birds(pool: RaterPool, budget: int, heldout) -> SelectionResult:
    """The budget-many pool users with the earliest timestamps on the item.

    Ties (including the all-zero timestamps of formats without them) go to
    the smallest user index.
    """
    start = time.perf_counter()
    _check_budget(pool, budget)
    stamps = {}
    for row in heldout.item_rows(pool.item):
        stamps[heldout.user_ids[int(heldout.user_idx[row])]] = int(heldout.timestamps[row])
    keyed = []
    for midx, uid in zip(pool.users, pool.user_ids):
        if uid not in stamps:
            raise SelectionError(
                f"pool user {uid!r} has no rating of {pool.item!r} in the held-out data")
        keyed.append((stamps[uid], midx))
    keyed.sort()
    selected = [u for _, u in keyed[:budget]]
    return SelectionResult(method="early_birds", selected=selected,
                           objective=_selected_objective(pool, selected),
                           elapsed=time.perf_counter() - start)


def brute_force_optimal(pool: RaterPool, budget: int,
                        objective: DesignObjective) -> SelectionResult:
    """Exhaustive minimum of the objective over all budget-sized subsets.

    Guarded at C(|pool|, budget) <= 10^6 combinations; ties resolve to the
    lexicographically smallest subset in user-index order.
    """
    from itertools import combinations

    start = time.perf_counter()
    _check_budget(pool, budget)
    if math.comb(pool.size, budget) > BRUTE_FORCE_GUARD:
        raise SelectionError(
            f"C({pool.size}, {budget}) exceeds the enumeration guard {BRUTE_FORCE_GUARD}")
    users = sorted(pool.users)
    best_val, best_subset = None, None
    for subset in combinations(users, budget):
        val = objective_value(objective, pool, subset)
        if best_val is None or val < best_val:
            best_val, best_subset = val, subset
    return SelectionResult(method="brute_force", selected=list(best_subset),
                           objective=float(best_val),
                           elapsed=time.perf_counter() - start)


def _selected_objective(pool: RaterPool, selected, ridge: float | None = None) -> float:
    """Post-hoc unweighted trace objective of a selected set, for reporting."""
    d = pool.vectors.shape[0]
    if ridge is None:
        ridge = numerics.default_ridge(d)
    return objective_value(DesignObjective(kind="a_opt", ridge=ridge), pool, selected)


def select(request: SelectionRequest, train=None, heldout=None) -> SelectionResult:
    """Dispatch a SelectionRequest to its method.

    `train` (a RatingDataset) backs the frequent/edgy baselines; `heldout`
    backs early_birds.  Extra per-method settings ride in
    request.method_params (cluster: mode, c; brute_force: objective).
    """
    pool, budget = request.pool, request.budget
    params = request.method_params
    if request.method == "bgs1":
        return bgs1(pool, budget, request.ridge)
    if request.method == "bgs2":
        return bgs2(pool, budget, request.ridge)
    if request.method == "forward_greedy":
        return forward_greedy(pool, budget, request.ridge)
    if request.method == "cluster":
        return cluster_select(pool, budget, mode=params.get("mode", "one_per_cluster"),
                              c=params.get("c"), seed=request.seed)
    if request.method == "random":
        return random_select(pool, budget, seed=request.seed)
    if request.method == "frequent":
        if train is None:
            raise SelectionError("frequent raters need the training dataset")
        return frequent_raters(pool, budget, train)
    if request.method == "edgy":
        if train is None:
            raise SelectionError("edgy raters need the training dataset")
        return edgy_raters(pool, budget, train)
    if request.method == "early_birds":
        if heldout is None:
            raise SelectionError("early birds need the held-out ratings")
        return early_birds(pool, budget, heldout)
    if request.method == "brute_force":
        objective = params.get("objective")
        if objective is None:
            d = pool.vectors.shape[0]
            ridge = request.ridge if request.ridge is not None else numerics.default_ridge(d)
            objective = DesignObjective(kind="a_opt", ridge=ridge)
        return brute_force_optimal(pool, budget, objective)
    raise SelectionError(f"unknown method {request.method!r}")  # pragma: no cover
