"""Low-rank matrix estimation from noisy, uniformly sampled entries.

The estimate is built in three stages: a factored gradient-descent fit,
a one-step debiasing correction over the observed residuals, and a
rank-``r`` projection that multiplies the debiased matrix by the initial
singular subspaces before taking singular vectors.
"""

import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_indices, check_observations, check_rank


class DegenerateProjectionWarning(UserWarning):
    """Raised when a projected matrix has numerical rank below ``r``."""


@dataclass(frozen=True)
class ObservationSet:
    """Sampled entries ``y = M[i, j] + noise``; duplicates are allowed."""

    d1: int
    d2: int
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int64).ravel()
        cols = np.asarray(self.cols, dtype=np.int64).ravel()
        values = np.asarray(self.values, dtype=np.float64).ravel()
        if not (rows.shape == cols.shape == values.shape):
            raise ValueError("rows, cols and values must have equal length")
        if rows.size and (rows.min() < 0 or rows.max() >= self.d1):
            raise ValueError("row index out of range")
        if cols.size and (cols.min() < 0 or cols.max() >= self.d2):
            raise ValueError("column index out of range")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "cols", cols)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_samples(cls, d1, d2, samples):
        samples = list(samples)
        if not samples:
            return cls(d1, d2, [], [], [])
        i, j, y = zip(*samples)
        return cls(d1, d2, i, j, y)

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def shape(self):
        return (self.d1, self.d2)

    def subset(self, index):
        index = np.asarray(index)
        return ObservationSet(
            self.d1, self.d2, self.rows[index], self.cols[index], self.values[index]
        )

    def to_dense(self, weights=None, scale=1.0):
        """Zero-filled ``scale * sum_k w_k e_i e_j^T`` (duplicates summed)."""
        w = self.values if weights is None else weights
        out = np.zeros((self.d1, self.d2))
        np.add.at(out, (self.rows, self.cols), w)
        return scale * out

    def coordinates(self):
        return np.column_stack([self.rows, self.cols])


@dataclass
class FactorModel:
    """Rank-``r`` factors ``U diag(S) V^T`` with an optional dense matrix.

    ``init`` keeps the gradient-descent fit a final estimate was built from;
    variance estimates downstream are computed from those factors.
    """

    U: np.ndarray
    V: np.ndarray
    S: np.ndarray
    dense: np.ndarray | None = None
    converged: bool = True
    n_iter: int = 0
    degenerate: bool = False
    init: Optional["FactorModel"] = field(default=None, repr=False)

    @property
    def rank(self):
        return self.S.shape[0]

    @property
    def shape(self):
        return (self.U.shape[0], self.V.shape[0])

    @property
    def condition_number(self):
        if self.S[-1] <= 0:
            return np.inf
        return float(self.S[0] / self.S[-1])

    @property
    def incoherence(self):
        d1, d2 = self.shape
        row_u = np.max(np.sum(self.U**2, axis=1))
        row_v = np.max(np.sum(self.V**2, axis=1))
        return float(max(d1 * row_u, d2 * row_v) / self.rank)

    def to_dense(self):
        if self.dense is None:
            self.dense = (self.U * self.S) @ self.V.T
        return self.dense

    def check(self, atol=1e-8):
        """Assert the orthonormality and reconstruction invariants."""
        r = self.rank
        for name, Q in (("U", self.U), ("V", self.V)):
            err = np.max(np.abs(Q.T @ Q - np.eye(r)))
            if err > atol:
                raise AssertionError(f"{name} not orthonormal (max error {err:.2e})")
        if self.dense is not None:
            err = np.max(np.abs(self.dense - (self.U * self.S) @ self.V.T))
            if err > atol * max(1.0, np.max(np.abs(self.dense))):
                raise AssertionError(f"dense matrix is not U S V^T (error {err:.2e})")
        return self


@dataclass(frozen=True)
class GdConfig:
    """Settings for the factored gradient-descent initialization.

    ``step_size=None`` uses ``0.5 / s1`` with ``s1`` the top singular value of
    the spectral starting point. ``seed`` only drives the random orthonormal
    fill used when a projection is rank deficient.
    """

    rank: int = 1
    step_size: float | None = None
    max_iters: int = 400
    tol: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if int(self.rank) < 1:
            raise ValueError("rank must be >= 1")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if int(self.max_iters) < 1:
            raise ValueError("max_iters must be >= 1")


def _fix_signs(U, V=None, eps=1e-12):
    """Make the first non-negligible entry of every column of ``U`` positive."""
    U = U.copy()
    V = None if V is None else V.copy()
    for k in range(U.shape[1]):
        nz = np.flatnonzero(np.abs(U[:, k]) > eps)
        if nz.size and U[nz[0], k] < 0:
            U[:, k] = -U[:, k]
            if V is not None:
                V[:, k] = -V[:, k]
    return U, V


def _factor_from_pair(A, B):
    """Orthonormal SVD factors of ``A @ B.T`` without forming it."""
    Qa, Ra = np.linalg.qr(A)
    Qb, Rb = np.linalg.qr(B)
    P, s, Qt = np.linalg.svd(Ra @ Rb.T)
    U, V = _fix_signs(Qa @ P, Qb @ Qt.T)
    return U, V, s


def _incidence(index, dim, n):
    return sp.csr_matrix((np.ones(n), (index, np.arange(n))), shape=(dim, n))


def gradient_descent_init(obs, cfg):
    """Fit ``A B^T`` to the observations by gradient descent.

    Minimizes ``(d1 d2 / 2n) sum_k (<A B^T, e_i e_j^T> - y_k)^2
    + (1/8) ||A^T A - B^T B||_F^2`` from the rank-``r`` truncated SVD of the
    rescaled zero-filled observation matrix. Stops once the relative change
    of the objective drops below ``cfg.tol``; if ``cfg.max_iters`` is hit
    first, the last iterate is returned with ``converged=False``.
    """
    d1, d2, n = obs.d1, obs.d2, obs.n
    if n < 1:
        raise ValueError("at least one observation is required")
    r = check_rank(cfg.rank, (d1, d2))
    scale = d1 * d2 / n

    U0, s0, Vt0 = np.linalg.svd(obs.to_dense(scale=scale), full_matrices=False)
    root = np.sqrt(s0[:r])
    A = U0[:, :r] * root
    B = Vt0[:r].T * root
    step = cfg.step_size
    if step is None:
        step = 0.5 / s0[0] if s0[0] > 0 else 0.5

    rows, cols, y = obs.rows, obs.cols, obs.values
    row_op = _incidence(rows, d1, n)
    col_op = _incidence(cols, d2, n)

    def objective(A, B):
        res = np.einsum("kr,kr->k", A[rows], B[cols]) - y
        gap = A.T @ A - B.T @ B
        return 0.5 * scale * res @ res + 0.125 * np.sum(gap * gap), res, gap

    f, res, gap = objective(A, B)
    floor = 1e-30 * max(1.0, 0.5 * scale * y @ y)
    converged = f <= floor
    it = 0
    while not converged and it < cfg.max_iters:
        it += 1
        gA = scale * (row_op @ (res[:, None] * B[cols])) + 0.5 * A @ gap
        gB = scale * (col_op @ (res[:, None] * A[rows])) - 0.5 * B @ gap
        for _ in range(40):
            A_new, B_new = A - step * gA, B - step * gB
            f_new, res_new, gap_new = objective(A_new, B_new)
            if f_new <= f:
                break
            # backtrack on overshoot
            step *= 0.5
        else:
            break
        change = f - f_new
        A, B, f, res, gap = A_new, B_new, f_new, res_new, gap_new
        converged = change <= cfg.tol * max(f + change, floor) or f <= floor

    U, V, s = _factor_from_pair(A, B)
    dense = (U * s) @ V.T
    return FactorModel(U, V, s, dense, converged=bool(converged), n_iter=it)


def debias(init, obs):
    """Add the rescaled observed residuals to the initial dense estimate."""
    if init.dense is None:
        init.to_dense()
    if init.dense.shape != obs.shape:
        raise ValueError(
            f"estimate has shape {init.dense.shape}, observations are {obs.shape}"
        )
    fitted = init.dense[obs.rows, obs.cols]
    correction = obs.to_dense(obs.values - fitted, scale=obs.d1 * obs.d2 / obs.n)
    return init.dense + correction


def _top_left_singular(mat, r, rng):
    """Top-``r`` left singular vectors, padded if numerically rank deficient."""
    Q, s, _ = np.linalg.svd(mat, full_matrices=False)
    Q = Q[:, :r]
    tol = max(mat.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    k = int(np.sum(s[:r] > tol)) if s.size else 0
    degenerate = k < r
    if degenerate:
        basis = Q[:, :k]
        fill = rng.standard_normal((mat.shape[0], r - k))
        fill -= basis @ (basis.T @ fill)
        fill, _ = np.linalg.qr(fill)
        Q = np.column_stack([basis, fill])
    Q, _ = _fix_signs(Q)
    return Q, degenerate


def _project(unbs, init, seed):
    r = init.rank
    rng = np.random.default_rng(seed)
    U_hat, deg_u = _top_left_singular(unbs @ init.V, r, rng)
    V_hat, deg_v = _top_left_singular(unbs.T @ init.U, r, rng)
    return U_hat, V_hat, deg_u or deg_v


def _warn_degenerate():
    warnings.warn(
        "projected debiased matrix has rank below r; "
        "filled with an orthonormal complement",
        DegenerateProjectionWarning,
        stacklevel=3,
    )


def incoherence_projection(unbs, init, seed=0):
    """Singular subspaces of the debiased matrix seen through the init factors.

    Returns ``(U_hat, V_hat)``: the top-``r`` left singular vectors of
    ``unbs @ V_init`` and of ``unbs.T @ U_init``.
    """
    U_hat, V_hat, degenerate = _project(unbs, init, seed)
    if degenerate:
        _warn_degenerate()
    return U_hat, V_hat


def low_rank_reconstruct(unbs, U_hat, V_hat):
    """Project ``unbs`` onto ``span(U_hat) x span(V_hat)``."""
    if unbs.shape != (U_hat.shape[0], V_hat.shape[0]):
        raise ValueError("factor dimensions do not match the matrix")
    if U_hat.shape[1] != V_hat.shape[1]:
        raise ValueError("U_hat and V_hat must have the same number of columns")
    core = U_hat.T @ unbs @ V_hat
    P, s, Qt = np.linalg.svd(core)
    U, V = _fix_signs(U_hat @ P, V_hat @ Qt.T)
    dense = U_hat @ core @ V_hat.T
    return FactorModel(U, V, s, dense)


def full_estimate(obs, cfg):
    """Initialization, debiasing and projection; keeps the init on ``.init``."""
    init = gradient_descent_init(obs, cfg)
    unbs = debias(init, obs)
    U_hat, V_hat, degenerate = _project(unbs, init, cfg.seed)
    if degenerate:
        _warn_degenerate()
    model = low_rank_reconstruct(unbs, U_hat, V_hat)
    return replace(
        model,
        converged=init.converged,
        n_iter=init.n_iter,
        degenerate=degenerate,
        init=init,
    )


class MatrixCompleter(RegressorMixin, BaseEstimator):
    """Noisy matrix completion estimator.

    ``X`` holds ``(row, col)`` coordinates of the sampled entries and ``y``
    the observed values. ``predict`` returns the completed matrix at the
    requested coordinates.

    Parameters
    ----------
    rank : int
        Target rank ``r``.
    shape : tuple of int, optional
        Matrix dimensions ``(d1, d2)``; inferred from ``X`` when omitted.
    step_size : float, optional
        Gradient-descent step; defaults to ``0.5 / s1`` of the spectral start.
    max_iter : int
    tol : float
        Relative objective change used as the stopping rule.
    random_state : int
        Seed for the orthonormal fill used on rank-deficient projections.

    Attributes
    ----------
    model_ : FactorModel
        Final estimate; ``model_.init`` is the gradient-descent fit.
    estimate_ : ndarray of shape (d1, d2)
    n_samples_ : int
    """

    def __init__(
        self, rank=1, shape=None, step_size=None, max_iter=400, tol=1e-8,
        random_state=0,
    ):
        self.rank = rank
        self.shape = shape
        self.step_size = step_size
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def _gd_config(self):
        return GdConfig(
            rank=self.rank,
            step_size=self.step_size,
            max_iters=self.max_iter,
            tol=self.tol,
            seed=0 if self.random_state is None else int(self.random_state),
        )

    def fit(self, X, y):
        obs = check_observations(X, y, self.shape)
        self.model_ = full_estimate(obs, self._gd_config())
        self.estimate_ = self.model_.dense
        self.n_samples_ = obs.n
        self.shape_ = obs.shape
        self.observations_ = obs
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X, _ = check_indices(X, self.shape_)
        return self.estimate_[X[:, 0], X[:, 1]]
