"""Small dense SPD linear algebra for design objectives.

The subset-selection objective is the trace of the inverse of a ridged,
optionally weighted Gram matrix of augmented user vectors.  Backward greedy
elimination needs that trace after removing one rank-one term, for every
candidate, at every step — so alongside plain Cholesky inversion this module
maintains inverses incrementally with Sherman-Morrison downdates and keeps a
running trace of the inverse.  Negative weights express rank-one additions
(the forward-greedy path) through the same formulas.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.linalg.lapack import dpotrf, dpotri

# Relative tolerance for the symmetry check on SpdMatrix entries.
SYMMETRY_RTOL = 1e-12

# Sherman-Morrison denominators at or below this signal that the removal
# would make the design singular.
REMOVAL_TOLERANCE = 1e-10

# Greedy loops rebuild their factorization from scratch this often to bound
# floating-point drift of the incremental path.
REFACTOR_INTERVAL = 128


class NotPositiveDefiniteError(ValueError):
    """Cholesky factorization failed; `pivot` is the 0-based failing pivot."""

    def __init__(self, pivot: int):
        super().__init__(f"matrix is not positive definite (failing pivot {pivot})")
        self.pivot = pivot


class RemovalForbiddenError(ValueError):
    """Removing this rank-one term would make the matrix (numerically) singular."""


def default_ridge(order: int) -> float:
    """Default selection-time regularization: 1e-6 times the matrix order."""
    return 1e-6 * order


@dataclass(frozen=True, eq=False)
class SpdMatrix:
    """Symmetric d x d matrix, expected positive definite once ridged."""

    entries: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.entries, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {m.shape}")
        scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
        asym = float(np.max(np.abs(m - m.T))) if m.size else 0.0
        if asym > SYMMETRY_RTOL * scale:
            raise ValueError(f"matrix is not symmetric (max asymmetry {asym:g})")
        object.__setattr__(self, "entries", m)

    @property
    def order(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True, eq=False)
class InverseState:
    """An SPD matrix with its inverse and trace-of-inverse kept in sync."""

    matrix: SpdMatrix
    inverse: np.ndarray
    trace_inv: float


def gram(vectors: np.ndarray, weights=None, ridge: float = 0.0) -> SpdMatrix:
    """Weighted Gram matrix  sum_v w_v * v v^T + ridge * I.

    `vectors` is (d, B) with one design point per column.  Weights default to
    1 everywhere; the variance-weighted path passes w_v = 1 / sigma_v^2.
    B = 0 is allowed and yields ridge * I.
    """
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError(f"vectors must be a (d, B) matrix, got shape {v.shape}")
    if ridge < 0:
        raise ValueError(f"ridge must be nonnegative, got {ridge}")
    d, b = v.shape
    if weights is None:
        g = v @ v.T
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (b,):
            raise ValueError(f"expected {b} weights, got shape {w.shape}")
        if b and float(w.min()) < 0:
            raise ValueError("weights must be nonnegative")
        g = (v * w) @ v.T
    g = g + ridge * np.eye(d)
    return SpdMatrix((g + g.T) / 2.0)


def invert(matrix: SpdMatrix) -> InverseState:
    """Cholesky-based inverse of a positive definite matrix."""
    chol, info = dpotrf(matrix.entries, lower=1)
    if info > 0:
        raise NotPositiveDefiniteError(pivot=info - 1)
    if info < 0:  # pragma: no cover - argument misuse
        raise ValueError(f"illegal argument {-info} passed to dpotrf")
    inv, info = dpotri(chol, lower=1)
    if info != 0:  # pragma: no cover - dpotrf succeeded, so pivots are nonzero
        raise ValueError(f"dpotri failed with info={info}")
    inv = np.tril(inv) + np.tril(inv, -1).T
    return InverseState(matrix=matrix, inverse=inv, trace_inv=float(np.trace(inv)))


def _sherman_morrison_terms(state: InverseState, vector, weight: float):
    """Shared pieces of the downdate: M^{-1} v and the denominator 1 - w v^T M^{-1} v."""
    v = np.asarray(vector, dtype=np.float64)
    if v.shape != (state.matrix.order,):
        raise ValueError(f"vector has shape {v.shape}, expected ({state.matrix.order},)")
    z = state.inverse @ v
    denom = 1.0 - weight * float(v @ z)
    if denom <= REMOVAL_TOLERANCE:
        raise RemovalForbiddenError(
            f"rank-one removal denominator {denom:g} at or below {REMOVAL_TOLERANCE:g}"
        )
    return v, z, denom


def downdate_trace_delta(state: InverseState, vector, weight: float) -> float:
    """Trace((M - w vv^T)^{-1}) - Trace(M^{-1}), without forming the update.

    Equals w * (v^T M^{-2} v) / (1 - w * v^T M^{-1} v), computed from the
    cached inverse as w * ||M^{-1} v||^2 / denom.  Nonnegative for w >= 0:
    removing a design point never shrinks the objective.
    """
    _, z, denom = _sherman_morrison_terms(state, vector, weight)
    return weight * float(z @ z) / denom


def apply_downdate(state: InverseState, vector, weight: float) -> InverseState:
    """New InverseState for M - w vv^T via a Sherman-Morrison update.

    Pure: the input state is unchanged.  `weight` may be negative, which
    re-adds a previously removed point (or adds a new one).
    """
    v, z, denom = _sherman_morrison_terms(state, vector, weight)
    coeff = weight / denom
    inv = state.inverse + coeff * np.outer(z, z)
    inv = (inv + inv.T) / 2.0
    entries = state.matrix.entries - weight * np.outer(v, v)
    trace_inv = state.trace_inv + weight * float(z @ z) / denom
    return InverseState(SpdMatrix((entries + entries.T) / 2.0), inv, trace_inv)


def whiten(user_factors: np.ndarray):
    """Linear transform putting the columns of a (d, n) matrix in isotropic position.

    Returns (F, whitened) with whitened = F^T @ user_factors and
    whitened @ whitened.T = n * I.  F is invertible, and pairing transformed
    user vectors with inverse-transformed item vectors preserves dot
    products: (F^T x)^T (F^{-1} y) = x^T y.
    """
    a = np.asarray(user_factors, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] == 0:
        raise ValueError(f"expected a (d, n) matrix with n >= 1, got shape {a.shape}")
    d, n = a.shape
    second_moment = (a @ a.T) / n
    chol, info = dpotrf((second_moment + second_moment.T) / 2.0, lower=1)
    if info > 0:
        raise NotPositiveDefiniteError(pivot=info - 1)
    linv = solve_triangular(chol, np.eye(d), lower=True)
    return linv.T, linv @ a
