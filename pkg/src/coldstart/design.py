"""Design objectives and their theory diagnostics.

The objective of a rater subset S is Trace of the inverse of the ridged
(optionally variance-weighted) Gram matrix of S's augmented vectors; it is
proportional to the expected error the least-squares fit inflicts on an
isotropic evaluation population.  `phi` shifts the objective to be zero at
the full pool.  phi is monotone decreasing and supermodular (increments grow
with the base set), which is what gives backward greedy elimination its
(e^t - 1)/t approximation factor; `steepness` measures the t, and
`check_supermodular` / `check_monotone` verify the structure by enumeration
on small pools and by sampling on large ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics
from .data import RaterPool

OBJECTIVE_KINDS = ("a_opt", "weighted_a_opt", "transductive")

# Largest pool enumerated exhaustively (2^n subset table); beyond this the
# checkers sample and the empty-set extension uses singleton/complement pairs.
MAX_EXHAUSTIVE_POOL = 12

DEFAULT_SLACK = 1e-9


class DegeneratePoolError(ValueError):
    """Steepness is undefined: no single rater moves the objective."""


class MissingObjectiveDataError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DesignObjective:
    """Which trace objective to evaluate.

    a_opt:          Trace((ridge*I + P_S P_S^T)^{-1})
    weighted_a_opt: Trace((ridge*I + P_S C_S^{-2} P_S^T)^{-1}), weights from
                    the pool's per-user variances
    transductive:   Trace(Sigma (ridge*I + P_S P_S^T)^{-1}) against a known
                    evaluation population's second-moment matrix Sigma
    """

    kind: str = "a_opt"
    ridge: float = 0.0
    sigma: float | None = None
    target_second_moment: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in OBJECTIVE_KINDS:
            raise ValueError(f"unknown objective kind {self.kind!r}")
        if self.ridge < 0:
            raise ValueError("ridge must be nonnegative")
        if self.sigma is not None and self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.kind == "transductive":
            s = self.target_second_moment
            if s is None:
                raise MissingObjectiveDataError(
                    "transductive objective needs target_second_moment")
            if s.ndim != 2 or s.shape[0] != s.shape[1]:
                raise ValueError("target_second_moment must be square")
            if not np.allclose(s, s.T, atol=1e-10 * max(1.0, float(np.abs(s).max()))):
                raise ValueError("target_second_moment must be symmetric")


def _positions(pool: RaterPool, subset) -> np.ndarray:
    order = {u: p for p, u in enumerate(pool.users)}
    positions = []
    for u in subset:
        p = order.get(u)
        if p is None:
            raise KeyError(f"user {u} not in pool")
        positions.append(p)
    if len(set(positions)) != len(positions):
        raise ValueError("subset contains duplicate users")
    return np.asarray(positions, dtype=np.int64)


def _pool_weights(pool: RaterPool) -> np.ndarray:
    if pool.variances is None:
        raise MissingObjectiveDataError(
            "weighted objective needs per-user variances on the pool")
    return 1.0 / pool.variances


def objective_value(obj: DesignObjective, pool: RaterPool, subset) -> float:
    """Evaluate the objective for a subset of pool users, from scratch."""
    pos = _positions(pool, subset)
    vectors = pool.vectors[:, pos]
    weights = _pool_weights(pool)[pos] if obj.kind == "weighted_a_opt" else None
    state = numerics.invert(numerics.gram(vectors, weights, obj.ridge))
    if obj.kind == "transductive":
        return float(np.trace(obj.target_second_moment @ state.inverse))
    return state.trace_inv


def expected_mse(obj: DesignObjective, pool: RaterPool, subset,
                 eval_variances=None) -> float:
    """Expected prediction MSE over an isotropic evaluation population.

    a_opt (iid noise, needs obj.sigma):
        sigma^2 * Trace((P_S P_S^T)^{-1}) + sigma^2
    weighted_a_opt (per-user noise, needs the evaluation users' variances):
        Trace((P_S C_S^{-2} P_S^T)^{-1}) + mean(eval_variances)
    """
    if obj.kind == "a_opt":
        if obj.sigma is None:
            raise MissingObjectiveDataError("iid expected_mse needs obj.sigma")
        s2 = obj.sigma**2
        return s2 * objective_value(obj, pool, subset) + s2
    if obj.kind == "weighted_a_opt":
        if eval_variances is None:
            raise MissingObjectiveDataError(
                "weighted expected_mse needs the evaluation users' variances")
        ev = np.asarray(eval_variances, dtype=np.float64)
        return objective_value(obj, pool, subset) + float(ev.mean())
    raise ValueError(f"expected_mse is undefined for kind {obj.kind!r}")


class _SubsetTraces:
    """Trace objective for every subset of a small pool, indexed by bitmask.

    Gram matrices are built by rank-one DP over masks and inverted in one
    batched call; requires a positive ridge so every subset (including the
    empty one) stays nonsingular.
    """

    def __init__(self, vectors: np.ndarray, weights, ridge: float):
        d, n = vectors.shape
        if n > 20:
            raise ValueError(f"subset enumeration over {n} users is too large")
        if ridge <= 0:
            raise ValueError("subset enumeration requires a positive ridge")
        w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
        terms = np.einsum("v,iv,jv->vij", w, vectors, vectors)
        grams = np.empty((1 << n, d, d))
        grams[0] = ridge * np.eye(d)
        for mask in range(1, 1 << n):
            low = mask & -mask
            grams[mask] = grams[mask ^ low] + terms[low.bit_length() - 1]
        self.n = n
        self.traces = np.trace(np.linalg.inv(grams), axis1=1, axis2=2)

    def __getitem__(self, mask: int) -> float:
        return float(self.traces[mask])


def _subset_traces(pool: RaterPool, ridge: float, kind: str) -> _SubsetTraces:
    weights = _pool_weights(pool) if kind == "weighted_a_opt" else None
    return _SubsetTraces(pool.vectors, weights, ridge)


def _extension_max(traces: np.ndarray, n: int) -> float:
    """max over disjoint nonempty A, B of T[A] + T[B] - T[A|B] (vectorized per A)."""
    masks = np.arange(1 << n)
    best = -math.inf
    for a in range(1, 1 << n):
        others = masks[(masks & a) == 0]
        others = others[others != 0]
        if others.size == 0:
            continue
        vals = traces[a] + traces[others] - traces[a | others]
        best = max(best, float(vals.max()))
    return best


def phi_empty(pool: RaterPool, ridge: float, kind: str = "a_opt") -> float:
    """Extended value of phi at the empty set.

    Defined as the tightest value consistent with supermodularity:
    max over disjoint nonempty A, B of phi(A) + phi(B) - phi(A u B).
    Exact enumeration up to MAX_EXHAUSTIVE_POOL users; above that only
    singleton/complement pairs are scanned, giving a lower-bound diagnostic.
    """
    n = pool.size
    if n < 2:
        raise ValueError("phi_empty needs at least two pool users")
    full_obj = DesignObjective(kind=kind, ridge=ridge)
    phi_full = objective_value(full_obj, pool, pool.users)
    if n <= MAX_EXHAUSTIVE_POOL:
        traces = _subset_traces(pool, ridge, kind)
        return _extension_max(traces.traces, n) - phi_full
    best = -math.inf
    for x in pool.users:
        rest = [u for u in pool.users if u != x]
        val = (objective_value(full_obj, pool, [x])
               + objective_value(full_obj, pool, rest) - 2.0 * phi_full)
        best = max(best, val)
    return best


def phi(pool: RaterPool, subset, ridge: float, kind: str = "a_opt") -> float:
    """Objective shifted to zero at the full pool; phi(empty) via the extension."""
    if len(list(subset)) == 0:
        return phi_empty(pool, ridge, kind)
    obj = DesignObjective(kind=kind, ridge=ridge)
    return objective_value(obj, pool, subset) - objective_value(obj, pool, pool.users)


@dataclass(frozen=True)
class SteepnessReport:
    """Steepness s of phi, its curvature factor t = s/(1-s), and provenance."""

    s: float
    t: float
    phi_empty: float
    argmax_user: int

    @property
    def approximation_factor(self) -> float:
        """(e^t - 1)/t, the backward-greedy guarantee; 1 in the t -> 0 limit."""
        if self.t == 0:
            return 1.0
        if not math.isfinite(self.t):
            return math.inf
        with np.errstate(over="ignore"):
            return float(np.expm1(self.t) / self.t)


def steepness(pool: RaterPool, ridge: float, kind: str = "a_opt") -> SteepnessReport:
    """s = max_x ([f(0) - f(x)] - [f(E\\x) - f(E)]) / [f(0) - f(x)] with f = phi.

    Costs one objective evaluation per pool user for the singletons and the
    drop-one sets, plus the phi_empty enumeration.
    """
    n = pool.size
    if n < 2:
        raise ValueError("steepness needs at least two pool users")
    obj = DesignObjective(kind=kind, ridge=ridge)
    phi_full = objective_value(obj, pool, pool.users)
    f_empty = phi_empty(pool, ridge, kind)
    best_s, best_user = None, None
    for pos, x in enumerate(pool.users):
        f_single = objective_value(obj, pool, [x]) - phi_full
        drop = pool.users[:pos] + pool.users[pos + 1:]
        # phi(E \ x) >= 0 exactly; clamp out negative floating-point noise.
        f_drop = max(objective_value(obj, pool, drop) - phi_full, 0.0)
        denom = f_empty - f_single
        if denom <= 1e-12:
            continue
        s = (denom - f_drop) / denom
        if best_s is None or s > best_s:
            best_s, best_user = s, x
    if best_s is None:
        raise DegeneratePoolError(
            "no pool user changes phi from the extended empty-set value")
    best_s = min(float(best_s), 1.0)
    t = math.inf if best_s >= 1.0 else best_s / (1.0 - best_s)
    return SteepnessReport(s=best_s, t=float(t),
                           phi_empty=float(f_empty), argmax_user=best_user)


@dataclass(frozen=True)
class StructureReport:
    """Outcome of a supermodularity or monotonicity scan."""

    checked: int
    violations: list = field(default_factory=list)
    exhaustive: bool = True

    @property
    def ok(self) -> bool:
        return not self.violations


def table_supermodularity_violations(values, n: int, slack: float = DEFAULT_SLACK,
                                     max_report: int = 100) -> StructureReport:
    """Exhaustive supermodularity scan of a set function given by subset table.

    `values[mask]` is f of the subset encoded by `mask` over a ground set of
    n elements.  Checks f(A|x) - f(A) <= f(B|x) - f(B) + slack for all
    A subset B subset E\\{x}; a modular function passes with equality and a
    concave-of-cardinality function like sqrt(|S|) fails.
    """
    checked = 0
    violations = []
    full = (1 << n) - 1
    for xbit in range(n):
        x = 1 << xbit
        ground = full ^ x
        b = ground
        while True:
            fb_gain = values[b | x] - values[b]
            a = (b - 1) & b
            while True:
                checked += 1
                gap = (values[a | x] - values[a]) - fb_gain
                if gap > slack and len(violations) < max_report:
                    violations.append((a, b, xbit, float(gap)))
                if a == 0:
                    break
                a = (a - 1) & b
            if b == 0:
                break
            b = (b - 1) & ground
    return StructureReport(checked=checked, violations=violations, exhaustive=True)


def table_monotone_decreasing_violations(values, n: int, slack: float = DEFAULT_SLACK,
                                         max_report: int = 100) -> StructureReport:
    """Checks f(S | {x}) <= f(S) + slack for every S and x not in S.

    Covering pairs imply monotonicity over all nested pairs by transitivity.
    """
    checked = 0
    violations = []
    for mask in range(1 << n):
        for xbit in range(n):
            x = 1 << xbit
            if mask & x:
                continue
            checked += 1
            gap = values[mask | x] - values[mask]
            if gap > slack and len(violations) < max_report:
                violations.append((mask, xbit, float(gap)))
    return StructureReport(checked=checked, violations=violations, exhaustive=True)


def check_supermodular(pool: RaterPool, ridge: float, kind: str = "a_opt",
                       slack: float = DEFAULT_SLACK, samples: int = 10000,
                       seed: int = 0) -> StructureReport:
    """Supermodularity scan of the trace objective over the pool.

    Pools up to MAX_EXHAUSTIVE_POOL users are enumerated exhaustively via the
    subset table; larger pools are sampled with `samples` random
    (A subset B, x) triples.
    """
    n = pool.size
    if n <= MAX_EXHAUSTIVE_POOL:
        traces = _subset_traces(pool, ridge, kind)
        return table_supermodularity_violations(traces.traces, n, slack)
    obj = DesignObjective(kind=kind, ridge=ridge)
    rng = np.random.default_rng(seed)
    users = np.asarray(pool.users)
    checked = 0
    violations = []

    def f(index_mask: np.ndarray) -> float:
        return objective_value(obj, pool, users[index_mask].tolist())

    for _ in range(samples):
        xpos = int(rng.integers(n))
        b_mask = rng.random(n) < 0.5
        b_mask[xpos] = False
        a_mask = b_mask & (rng.random(n) < 0.5)
        x_mask = np.zeros(n, dtype=bool)
        x_mask[xpos] = True
        checked += 1
        gap = ((f(a_mask | x_mask) - f(a_mask))
               - (f(b_mask | x_mask) - f(b_mask)))
        if gap > slack and len(violations) < 100:
            violations.append((a_mask.copy(), b_mask.copy(), xpos, float(gap)))
    return StructureReport(checked=checked, violations=violations, exhaustive=False)


def check_monotone(pool: RaterPool, ridge: float, kind: str = "a_opt",
                   slack: float = DEFAULT_SLACK) -> StructureReport:
    """Monotone-decrease scan (adding a rater never increases the objective)."""
    n = pool.size
    if n > MAX_EXHAUSTIVE_POOL:
        raise ValueError(f"exhaustive monotonicity scan capped at {MAX_EXHAUSTIVE_POOL} users")
    traces = _subset_traces(pool, ridge, kind)
    return table_monotone_decreasing_violations(traces.traces, n, slack)
