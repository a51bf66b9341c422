"""Whitening and Lasso screening for strongly correlated hypothesis families."""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from sklearn.base import BaseEstimator
from sklearn.exceptions import ConvergenceWarning
from sklearn.utils.validation import check_is_fitted

from ._validation import check_alpha, check_observations
from .completion import GdConfig
from .inference import DesignStack, UntestableFormError
from .multitest import (
    HypothesisSet,
    RejectionResult,
    compute_split_statistics,
    data_driven_threshold,
    one_sided_prefilter,
    score,
)

__all__ = [
    "CovarianceEstimate",
    "DesignStack",
    "ScreeningResult",
    "WhitenedScreeningFDR",
    "classify_pairs",
    "estimate_covariance",
    "estimate_sigma",
    "inverse_sqrt",
    "lasso",
    "ols_refit",
    "run_algorithm2",
]

FORMULATIONS = ("unnormalized", "correlation")


class RankDeficientWarning(UserWarning):
    """Dependent columns were dropped from a least-squares refit."""


@dataclass
class CovarianceEstimate:
    sigma_hat: np.ndarray
    r_hat: np.ndarray
    inv_sqrt: np.ndarray
    eigen_floor: float
    n_clamped: int = 0


@dataclass
class ScreeningResult:
    """Lasso support and refit quantities; ``w2`` and ``w_rank`` vanish off the support."""

    support: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    sigma_w: np.ndarray
    w_rank: np.ndarray
    lam: float = 0.0
    lasso_converged: bool = True
    family_index: np.ndarray = None  # positions in the full family


def estimate_sigma(stack, U, V):
    """Limiting covariance ``<P(T_i), P(T_j)>`` of the family at ``(U, V)``."""
    return stack.tangent_gram(np.asarray(U, dtype=np.float64), np.asarray(V, dtype=np.float64))


def inverse_sqrt(R, floor=None):
    """Inverse square root of a symmetric matrix with eigenvalue flooring.

    Parameters
    ----------
    R : ndarray of shape (q, q)
    floor : float, optional
        Eigenvalues below ``floor`` are raised to it. Defaults to
        ``1e-6 * max(eigenvalue)``.

    Returns
    -------
    inv_sqrt : ndarray of shape (q, q)
    n_clamped : int
    """
    R = np.asarray(R, dtype=np.float64)
    if R.ndim != 2 or R.shape[0] != R.shape[1]:
        raise ValueError("R must be square")
    if R.size == 0:
        return np.zeros_like(R), 0
    R = 0.5 * (R + R.T)
    evals, evecs = linalg.eigh(R)
    if floor is None:
        floor = 1e-6 * max(evals[-1], np.finfo(float).tiny)
    if floor <= 0:
        raise ValueError("floor must be positive")
    clamped = evals < floor
    evals = np.where(clamped, floor, evals)
    out = (evecs * evals ** -0.5) @ evecs.T
    return 0.5 * (out + out.T), int(clamped.sum())


def estimate_covariance(stack, U, V, floor_rel=1e-6):
    """Covariance, correlation and whitening matrix of a family."""
    sigma = estimate_sigma(stack, U, V)
    sd = np.sqrt(np.clip(np.diag(sigma), 0.0, None))
    if np.any(sd <= 0):
        raise UntestableFormError("a form has zero tangent-space projection")
    r_hat = sigma / np.outer(sd, sd)
    np.fill_diagonal(r_hat, 1.0)
    lam_max = np.linalg.eigvalsh(r_hat)[-1] if r_hat.size else 1.0
    floor = floor_rel * lam_max
    inv, n_clamped = inverse_sqrt(r_hat, floor)
    return CovarianceEstimate(sigma, r_hat, inv, floor, n_clamped)


def _soft(x, t):
    return np.sign(x) * max(abs(x) - t, 0.0)


def lasso(design, response, lam, tol=1e-8, max_sweeps=10_000, return_info=False,
          kkt_tol=1e-7):
    """Minimize ``0.5 ||response - design w||^2 + lam ||w||_1``.

    Cyclic coordinate descent on the Gram matrix, stopped when the duality
    gap drops below ``tol * max(||response||^2, 1)`` and no optimality
    condition is violated by more than ``kkt_tol``.
    """
    X = np.asarray(design, dtype=np.float64)
    y = np.asarray(response, dtype=np.float64)
    if lam < 0:
        raise ValueError("lam must be non-negative")
    q = X.shape[1]
    gram = X.T @ X
    xty = X.T @ y
    diag = np.diag(gram).copy()
    w = np.zeros(q)
    gw = np.zeros(q)  # gram @ w, kept in sync
    yy = float(y @ y)
    gap_tol = tol * max(yy, 1.0)
    converged = False
    gap = kkt = np.inf
    for sweep in range(max_sweeps):
        for j in range(q):
            if diag[j] <= 0:
                continue
            rho = xty[j] - gw[j] + diag[j] * w[j]
            new = _soft(rho, lam) / diag[j]
            delta = new - w[j]
            if delta != 0.0:
                gw += delta * gram[:, j]
                w[j] = new
        # duality gap with the residual rescaled into the dual feasible set
        grad = xty - gw
        resid_sq = max(yy - 2 * w @ xty + w @ gw, 0.0)
        primal = 0.5 * resid_sq + lam * np.abs(w).sum()
        g_inf = np.abs(grad).max(initial=0.0)
        s = 1.0 if g_inf <= lam or g_inf == 0 else lam / g_inf
        # dual(theta) = 0.5||y||^2 - 0.5||y - theta||^2 with theta = s * residual
        r_dot_y = yy - w @ xty
        dual = s * r_dot_y - 0.5 * s * s * resid_sq
        gap = primal - dual
        on = w != 0
        kkt = max(np.abs(grad[on] - lam * np.sign(w[on])).max(initial=0.0),
                  np.abs(grad[~on]).max(initial=0.0) - lam)
        if gap <= gap_tol and kkt <= kkt_tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"lasso stopped after {max_sweeps} sweeps, gap {gap:.3g}",
                      ConvergenceWarning, stacklevel=2)
    if return_info:
        return w, {"converged": converged, "sweeps": sweep + 1, "gap": gap, "kkt": kkt}
    return w


def ols_refit(design, response, rtol=1e-10):
    """Least squares on ``design`` with per-coefficient scale factors.

    Returns ``(coef, sd, kept)``: ``sd[k]`` is the square root of the
    ``k``-th diagonal entry of ``(X^T X)^{-1}`` and ``kept`` lists the
    design columns used. Dependent columns are removed by a pivoted QR.
    """
    X = np.asarray(design, dtype=np.float64)
    y = np.asarray(response, dtype=np.float64)
    p = X.shape[1]
    if p == 0:
        return np.zeros(0), np.zeros(0), np.zeros(0, dtype=int)
    _, R, piv = linalg.qr(X, mode="economic", pivoting=True)
    rdiag = np.abs(np.diag(R))
    rank = int(np.sum(rdiag > rtol * rdiag[0])) if rdiag.size and rdiag[0] > 0 else 0
    kept = np.sort(piv[:rank])
    if rank < p:
        warnings.warn(f"dropped {p - rank} dependent column(s) from the refit",
                      RankDeficientWarning, stacklevel=2)
    if rank == 0:
        return np.zeros(0), np.zeros(0), kept
    Xk = X[:, kept]
    Q, Rk = linalg.qr(Xk, mode="economic")
    coef = linalg.solve_triangular(Rk, Q.T @ y)
    rinv = linalg.solve_triangular(Rk, np.eye(rank))
    sd = np.sqrt(np.sum(rinv * rinv, axis=1))
    return coef, sd, kept


def _max_family_size(d1, d2, r):
    return (d1 + d2) * r - r * r


def screen(z1, z2, s1, s2, sigma_hat, lam, formulation="unnormalized", whiten=True):
    """Whiten, Lasso-screen on the first split and refit on the second.

    ``z1, z2`` are normalized split statistics, ``s1, s2`` their scale
    estimates and ``sigma_hat`` the covariance at the first-split factors.
    """
    if formulation not in FORMULATIONS:
        raise ValueError(f"formulation must be one of {FORMULATIONS}")
    q = z1.size
    if formulation == "correlation" or not whiten:
        if whiten:
            r_hat = sigma_hat / np.outer(s1, s1)
            np.fill_diagonal(r_hat, 1.0)
            X, _ = inverse_sqrt(r_hat)
        else:
            X = np.eye(q)
        design1, y1, y2 = X, X @ z1, X @ z2
    else:
        X, _ = inverse_sqrt(sigma_hat)
        design1, y1, y2 = X * s1[None, :], X @ (s1 * z1), X @ (s2 * z2)
    w1, info = lasso(design1, y1, lam, return_info=True)
    support = np.flatnonzero(w1 != 0)
    w2 = np.zeros(q)
    sigma_w = np.zeros(q)
    if support.size:
        coef, sd, kept = ols_refit(X[:, support], y2)
        support = support[kept]
        w2[support] = coef
        sigma_w[support] = sd
    w_rank = np.zeros(q)
    w_rank[support] = w1[support] * w2[support] / sigma_w[support]
    return ScreeningResult(support, w1, w2, sigma_w, w_rank, lam, info["converged"])


def check_family(hypotheses, shape, rank):
    """Enforce the family-size cap and linear independence of the forms."""
    d1, d2 = shape
    cap = _max_family_size(d1, d2, rank)
    if hypotheses.q > cap:
        raise ValueError(f"family size {hypotheses.q} exceeds (d1 + d2) r - r^2 = {cap}")
    if hypotheses.stack(shape).gram_rank() < hypotheses.q:
        raise ValueError("linear forms in the family are not linearly independent")


def whitened_from_splits(z1, z2, s1, s2, sigma_hat, lam, alpha, sides="two_sided",
                         truth=None, formulation="unnormalized", whiten=True):
    """Screen and threshold precomputed split statistics.

    ``sigma_hat`` covers the whole family; rows of untestable or prefiltered
    forms are ignored.
    """
    q = z1.size
    testable = np.isfinite(z1) & np.isfinite(z2)
    keep = one_sided_prefilter(np.where(testable, z1, 0), np.where(testable, z2, 0), sides)
    active = np.flatnonzero(testable & keep)
    w1 = np.full(q, np.nan)
    w2 = np.full(q, np.nan)
    w_rank = np.full(q, np.nan)
    notes = []
    details = None
    rejected = np.zeros(0, dtype=int)
    L = np.inf
    if active.size:
        sub = np.ix_(active, active)
        details = screen(z1[active], z2[active], s1[active], s2[active], sigma_hat[sub],
                         lam, formulation, whiten)
        details.family_index = active
        w1[active] = details.w1
        w2[active] = details.w2
        w_rank[active] = details.w_rank
        if details.support.size == 0:
            notes.append("empty lasso support")
        else:
            L = data_driven_threshold(details.w_rank, alpha)
            rejected = active[details.w_rank > L]
    result = RejectionResult(
        L, rejected, w1, w2, w_rank, "whitened",
        untestable=np.flatnonzero(~testable),
        dropped=np.flatnonzero(testable & ~keep),
        notes=notes, details=details,
    )
    if truth is not None:
        result.fdp, result.power = score(rejected, truth)
    return result


def run_algorithm2(obs, hypotheses, cfg, alpha=0.1, lambda_scale=1.0, seed=0,
                   formulation="unnormalized", whiten=True):
    """Split, whiten, screen and threshold at level ``alpha``.

    The covariance is evaluated at the first split's initial factors.
    ``whiten=False`` replaces it by the identity, which with
    ``lambda_scale=0`` reproduces the product aggregation.
    """
    alpha = check_alpha(alpha)
    if lambda_scale < 0:
        raise ValueError("lambda_scale must be non-negative")
    if hypotheses.q == 0:
        e = np.zeros(0)
        return RejectionResult(np.inf, np.zeros(0, dtype=int), e, e, e, "whitened")
    check_family(hypotheses, obs.shape, cfg.rank)
    stats = compute_split_statistics(obs, hypotheses, cfg, seed)
    init1 = stats.models[0].init
    sigma_hat = estimate_sigma(stats.stack, init1.U, init1.V)
    lam = lambda_scale * np.sqrt(np.log(obs.shape[0]))
    b1, b2 = stats.batches
    return whitened_from_splits(b1.w, b2.w, b1.s_hat, b2.s_hat, sigma_hat, lam, alpha,
                                hypotheses.sides, hypotheses.truth, formulation, whiten)


def classify_pairs(hypotheses, U, V, nu, c=1.0, absolute=False):
    """Split index pairs into strongly and weakly correlated.

    A pair ``(i, j)`` (diagonal included) is strong when its correlation is
    at least ``c * q0 ** -nu``. Only null forms are used when labels exist.

    Returns
    -------
    strong, weak : ndarray of shape (k, 2)
        Pairs of indices into the full family.
    beta_s : float
        Fraction of strong pairs.
    """
    if nu <= 0:
        raise ValueError("nu must be positive")
    idx = np.arange(hypotheses.q)
    if hypotheses.truth is not None:
        idx = np.flatnonzero(~hypotheses.truth)
    q0 = idx.size
    if q0 == 0:
        return np.zeros((0, 2), dtype=int), np.zeros((0, 2), dtype=int), 0.0
    U = np.asarray(U, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    sub = DesignStack([hypotheses.forms[i] for i in idx], (U.shape[0], V.shape[0]))
    sigma = estimate_sigma(sub, U, V)
    sd = np.sqrt(np.clip(np.diag(sigma), 0.0, None))
    if np.any(sd <= 0):
        raise UntestableFormError("a form has zero tangent-space projection")
    rho = sigma / np.outer(sd, sd)
    np.fill_diagonal(rho, 1.0)
    if absolute:
        rho = np.abs(rho)
    strong_mask = rho >= c * q0 ** (-nu)
    ii, jj = np.meshgrid(idx, idx, indexing="ij")
    pairs = np.stack([ii.ravel(), jj.ravel()], axis=1)
    flat = strong_mask.ravel()
    return pairs[flat], pairs[~flat], float(flat.mean())


class WhitenedScreeningFDR(BaseEstimator):
    """Multiple testing of correlated linear forms via whitening and screening.

    Parameters
    ----------
    rank : int
    alpha : float
        Target FDR level.
    lambda_scale : float
        Lasso penalty is ``lambda_scale * sqrt(log d1)``.
    formulation : {"unnormalized", "correlation"}
        Whiten unnormalized statistics with the covariance, or normalized
        statistics with the correlation matrix.
    """

    def __init__(self, rank=1, alpha=0.1, lambda_scale=1.0, formulation="unnormalized",
                 shape=None, step_size=None, max_iter=400, tol=1e-8, random_state=0):
        self.rank = rank
        self.alpha = alpha
        self.lambda_scale = lambda_scale
        self.formulation = formulation
        self.shape = shape
        self.step_size = step_size
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def fit(self, X, y, hypotheses):
        obs = check_observations(X, y, self.shape)
        if not isinstance(hypotheses, HypothesisSet):
            hypotheses = HypothesisSet(list(hypotheses))
        seed = 0 if self.random_state is None else int(self.random_state)
        cfg = GdConfig(self.rank, self.step_size, self.max_iter, self.tol, seed)
        self.result_ = run_algorithm2(obs, hypotheses, cfg, self.alpha, self.lambda_scale,
                                      seed=seed, formulation=self.formulation)
        self.threshold_ = self.result_.threshold
        self.rejected_ = self.result_.rejected
        self.w_rank_ = self.result_.w_rank
        details = self.result_.details
        self.support_ = (details.family_index[details.support]
                         if details is not None else np.zeros(0, dtype=int))
        return self

    def predict(self, hypotheses=None):
        check_is_fitted(self, "result_")
        return self.result_.rejected_mask()
