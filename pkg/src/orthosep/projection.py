"""Projection of residuals onto the column space of a feature matrix.

For ``X`` (M x N) with thin SVD ``X = U S V^T`` the ridge projector

    P = X (X^T X + eps I)^-1 X^T = U diag(s^2 / (s^2 + eps)) U^T

is applied as ``X @ (V @ (c * (V^T @ (X^T @ e))))`` with ``c = 1/(s^2 + eps)``,
three skinny products that never form the M x M matrix. The ``pinv`` mode uses
``c = 1/s^2`` on singular values above ``rcond * s_max`` and 0 otherwise, which
gives the exact orthogonal projector.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

RIDGE_EPS = 1e-3
PINV_RCOND = 1e-10


@dataclass(frozen=True)
class ProjectorSpec:
    mode: str = "ridge"
    epsilon: float = RIDGE_EPS
    rcond: float = PINV_RCOND

    def __post_init__(self):
        if self.mode not in ("ridge", "pinv"):
            raise ValueError(f"unknown projector mode {self.mode!r}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if not 0 < self.rcond < 1:
            raise ValueError("rcond must be in (0, 1)")

    @classmethod
    def ridge(cls, epsilon: float = RIDGE_EPS) -> "ProjectorSpec":
        return cls("ridge", epsilon=epsilon)

    @classmethod
    def pinv(cls, rcond: float = PINV_RCOND) -> "ProjectorSpec":
        return cls("pinv", rcond=rcond)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "epsilon": self.epsilon, "rcond": self.rcond}


@dataclass(frozen=True)
class GramFactorization:
    V: np.ndarray        # N x N right singular vectors (columns)
    sigma: np.ndarray    # descending singular values
    filter: np.ndarray   # d_j in [0, 1], the eigenvalues of P
    coef: np.ndarray     # d_j / sigma_j^2 (0 where sigma_j = 0)
    spec: ProjectorSpec
    n_rows: int


@dataclass(frozen=True)
class ResidualDecomposition:
    e: np.ndarray
    r_par: np.ndarray
    r_perp: np.ndarray
    index_map: np.ndarray | None = None


def _as_matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("X must be 2-D")
    return X


def gram_factorize(X, spec: ProjectorSpec = ProjectorSpec()) -> GramFactorization:
    X = _as_matrix(X)
    M, N = X.shape
    if M < N:
        raise ValueError(f"need M >= N rows for the projector, got {M} x {N}")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite entries in feature matrix")
    _, sigma, vt = np.linalg.svd(X, full_matrices=False)
    s2 = sigma**2
    if spec.mode == "ridge":
        coef = 1.0 / (s2 + spec.epsilon)
        filt = s2 * coef
    else:
        keep = sigma > spec.rcond * (sigma[0] if sigma.size else 0.0)
        coef = np.zeros_like(sigma)
        coef[keep] = 1.0 / s2[keep]
        filt = keep.astype(np.float64)
    return GramFactorization(vt.T.copy(), sigma, filt, coef, spec, M)


_SPLITTER = 134217729.0  # 2**27 + 1


def _two_prod(a, b):
    """Error-free product: ``a * b == p + err`` exactly (Dekker)."""
    p = a * b
    ah = a * _SPLITTER
    ah = ah - (ah - a)
    al = a - ah
    bh = b * _SPLITTER
    bh = bh - (bh - b)
    bl = b - bh
    return p, ((ah * bh - p) + ah * bl + al * bh) + al * bl


def _two_sum(a, b):
    s = a + b
    z = s - a
    return s, (a - (s - z)) + (b - z)


def _residual(X, e, w):
    """``e - X w`` as an unevaluated pair ``hi + lo`` carrying about twice double precision."""
    hi = e.copy()
    lo = np.zeros_like(e)
    for j in range(X.shape[1]):
        p, pe = _two_prod(X[:, j], -w[j])
        hi, se = _two_sum(hi, p)
        lo += se + pe
    return hi, lo


def _refined_coefficients(X, fact: GramFactorization, e):
    """Coefficients ``w`` with ``P e = X w``, plus one refinement step.

    ``X^T r_perp`` is tiny next to ``X^T e`` (it equals ``eps w`` in ridge mode), so
    the refinement residual ``X^T (e - X w) - eps w`` is accumulated with
    error-free transformations; in plain double it is swamped by rounding.
    Refinement is skipped when ``X`` is a row block of the factorized matrix
    (global-scope batches): there the block ``X_b G^-1 X_b^T`` is wanted as is.
    """
    V, coef = fact.V, fact.coef
    w = V @ (coef * (V.T @ (X.T @ e)))
    if X.shape[0] != fact.n_rows or not np.all(np.isfinite(w)):
        return w
    eps = fact.spec.epsilon if fact.spec.mode == "ridge" else 0.0
    hi, lo = _residual(X, e, w)
    rho = np.empty_like(w)
    for j in range(X.shape[1]):
        p, pe = _two_prod(X[:, j], hi)
        rho[j] = math.fsum(np.concatenate([p, pe, X[:, j] * lo, [-eps * w[j]]]))
    return w + V @ (coef * (V.T @ rho))


def _check_dims(X, fact, e):
    if X.shape[0] != e.shape[0] or X.shape[1] != fact.V.shape[0]:
        raise ValueError(f"dimension mismatch: X {X.shape}, e {e.shape}, factorization N={fact.V.shape[0]}")


def project_parallel(X, fact: GramFactorization, e) -> np.ndarray:
    """``P e`` through skinny products only, cost O(M N); P is never formed."""
    X = _as_matrix(X)
    e = np.asarray(e, dtype=np.float64)
    _check_dims(X, fact, e)
    if e.ndim == 2:
        return np.column_stack([X @ _refined_coefficients(X, fact, col) for col in e.T])
    return X @ _refined_coefficients(X, fact, e)


def decompose_residual(X, fact: GramFactorization, e, index_map=None) -> ResidualDecomposition:
    """Split ``e`` into ``r_par = P e`` and ``r_perp = e - P e``.

    ``r_perp`` is formed by a compensated subtraction, so ``X^T r_perp`` keeps its
    accuracy even when the parallel part dominates.
    """
    X = _as_matrix(X)
    e = np.asarray(e, dtype=np.float64)
    if e.ndim != 1:
        raise ValueError("e must be a vector")
    _check_dims(X, fact, e)
    w = _refined_coefficients(X, fact, e)
    hi, lo = _residual(X, e, w)
    return ResidualDecomposition(e, X @ w, hi + lo, index_map)


def effective_rank(fact: GramFactorization, tol: float = PINV_RCOND) -> int:
    if fact.sigma.size == 0 or fact.sigma[0] == 0:
        return 0
    return int(np.count_nonzero(fact.sigma > tol * fact.sigma[0]))


def dense_projector(X, spec: ProjectorSpec = ProjectorSpec()) -> np.ndarray:
    """Explicit M x M projector; only meant for small reference checks."""
    X = _as_matrix(X)
    if spec.mode == "ridge":
        return X @ np.linalg.solve(X.T @ X + spec.epsilon * np.eye(X.shape[1]), X.T)
    return X @ np.linalg.pinv(X, rcond=spec.rcond)


class SubspaceProjector(BaseEstimator):
    """Estimator wrapper: ``fit(X)`` factorizes, ``decompose(e)`` splits residuals.

    Parameters
    ----------
    mode : {"ridge", "pinv"}
    epsilon : float
        Ridge constant added to the Gram matrix.
    rcond : float
        Relative singular-value cut-off for ``pinv``.
    """

    def __init__(self, mode="ridge", epsilon=RIDGE_EPS, rcond=PINV_RCOND):
        self.mode = mode
        self.epsilon = epsilon
        self.rcond = rcond

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.spec_ = ProjectorSpec(self.mode, self.epsilon, self.rcond)
        self.factorization_ = gram_factorize(X, self.spec_)
        self.X_ = X
        self.rank_ = effective_rank(self.factorization_)
        self.n_features_in_ = X.shape[1]
        return self

    def project(self, e):
        check_is_fitted(self, "factorization_")
        return project_parallel(self.X_, self.factorization_, e)

    def decompose(self, e, index_map=None) -> ResidualDecomposition:
        check_is_fitted(self, "factorization_")
        return decompose_residual(self.X_, self.factorization_, e, index_map)

    def transform(self, e):
        """Orthogonal part ``(I - P) e``."""
        e = np.asarray(e, dtype=np.float64)
        return e - self.project(e)
