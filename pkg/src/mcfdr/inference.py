"""Single-form test statistics, confidence intervals and pairwise correlation."""

import numbers
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import ndtr, ndtri
from sklearn.utils.validation import check_is_fitted

from ._validation import check_alpha
from .completion import MatrixCompleter

SIDES = ("two_sided", "greater", "less")


class UntestableFormError(ValueError):
    """The statistic's scale is zero, so ``W`` is undefined for this form."""


class DegenerateFormWarning(UserWarning):
    pass


def normal_cdf(x):
    return ndtr(x)


def normal_quantile(p):
    """Inverse standard normal CDF."""
    return ndtri(p)


@dataclass(frozen=True)
class LinearForm:
    """Sparse test matrix ``T`` and the hypothesized value of ``<M, T>``.

    Duplicate coordinates are summed and exact zeros dropped on construction.
    """

    rows: np.ndarray
    cols: np.ndarray
    coefs: np.ndarray
    theta: float = 0.0
    side: str = "two_sided"
    l1_norm: float = field(init=False)
    fro_norm: float = field(init=False)

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int64).ravel()
        cols = np.asarray(self.cols, dtype=np.int64).ravel()
        coefs = np.asarray(self.coefs, dtype=np.float64).ravel()
        if not (rows.shape == cols.shape == coefs.shape):
            raise ValueError("rows, cols and coefs must have equal length")
        if self.side not in SIDES:
            raise ValueError(f"side must be one of {SIDES}, got {self.side!r}")
        if rows.size:
            key = np.stack([rows, cols])
            uniq, inv = np.unique(key, axis=1, return_inverse=True)
            summed = np.zeros(uniq.shape[1])
            np.add.at(summed, inv.ravel(), coefs)
            keep = summed != 0
            rows, cols, coefs = uniq[0, keep], uniq[1, keep], summed[keep]
        if rows.size == 0:
            raise ValueError("a linear form needs at least one nonzero entry")
        if np.any(rows < 0) or np.any(cols < 0):
            raise ValueError("negative index in linear form")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "cols", cols)
        object.__setattr__(self, "coefs", coefs)
        object.__setattr__(self, "theta", float(self.theta))
        object.__setattr__(self, "l1_norm", float(np.abs(coefs).sum()))
        object.__setattr__(self, "fro_norm", float(np.sqrt(coefs @ coefs)))

    @classmethod
    def entry(cls, i, j, theta=0.0, side="two_sided"):
        return cls([i], [j], [1.0], theta, side)

    @classmethod
    def from_dense(cls, T, theta=0.0, side="two_sided"):
        T = np.asarray(T, dtype=np.float64)
        i, j = np.nonzero(T)
        return cls(i, j, T[i, j], theta, side)

    def to_dense(self, shape):
        out = np.zeros(shape)
        out[self.rows, self.cols] = self.coefs
        return out

    def inner(self, matrix):
        """``<matrix, T>``."""
        return float(matrix[self.rows, self.cols] @ self.coefs)

    def with_theta(self, theta):
        return LinearForm(self.rows, self.cols, self.coefs, theta, self.side)

    def scaled(self, c):
        return LinearForm(self.rows, self.cols, c * self.coefs, c * self.theta, self.side)


@dataclass
class TestRecord:
    """One evaluated statistic ``w = (point - theta) / (sigma_xi * s * sqrt(d1 d2 / n))``."""

    __test__ = False

    form_id: int
    w: float
    point: float
    sigma_xi_hat: float
    s_hat: float
    split_id: str = "all"
    theta: float = 0.0
    scale: float = 1.0  # sqrt(d1 d2 / n)

    @property
    def std_error(self):
        return self.sigma_xi_hat * self.s_hat * self.scale


def _as_dense(T, shape):
    if isinstance(T, LinearForm):
        return T.to_dense(shape)
    return np.asarray(T, dtype=np.float64)


def tangent_project(T, U, V):
    """Projection of ``T`` onto the tangent space at ``span(U) x span(V)``.

    Computed as ``T - (I - U U^T) T (I - V V^T)``.
    """
    Td = _as_dense(T, (U.shape[0], V.shape[0]))
    UtT = U.T @ Td
    TV = Td @ V
    return U @ UtT + TV @ V.T - U @ (UtT @ V) @ V.T


def alignment_ratio(T, U, V):
    """``||P(T)||_F / ||T||_F * sqrt(d2 / r)``; 0 (with a warning) if degenerate."""
    Td = _as_dense(T, (U.shape[0], V.shape[0]))
    fro = np.linalg.norm(Td)
    if fro == 0:
        raise ValueError("T must be nonzero")
    proj = np.linalg.norm(tangent_project(Td, U, V))
    if proj <= 1e-14 * fro:
        warnings.warn("form is orthogonal to the tangent space", DegenerateFormWarning)
        return 0.0
    return float(proj / fro * np.sqrt(V.shape[0] / U.shape[1]))


def noise_variance_estimate(obs, init):
    """Mean squared residual of the initial estimate over the samples."""
    dense = init.to_dense()
    res = obs.values - dense[obs.rows, obs.cols]
    return float(res @ res / obs.n)


def sampling_sd_estimate(T, init):
    return float(np.linalg.norm(tangent_project(T, init.U, init.V)))


def _init_of(model, init):
    if init is not None:
        return init
    if model.init is None:
        raise ValueError("model carries no init factors; pass init explicitly")
    return model.init


def test_statistic(T, model, init, obs, form_id=0, split_id="all"):
    """Studentized statistic for ``H0: <M, T> = T.theta``.

    Variances come from the initial fit ``init``: the residual mean square
    for the noise and the tangent projection at the init factors for ``T``.
    """
    init = _init_of(model, init)
    sigma = np.sqrt(noise_variance_estimate(obs, init))
    s_hat = sampling_sd_estimate(T, init)
    scale = np.sqrt(obs.d1 * obs.d2 / obs.n)
    if not (sigma > 0 and s_hat > 0):
        raise UntestableFormError(
            f"zero standard error (sigma_xi_hat={sigma:.3g}, s_hat={s_hat:.3g})"
        )
    point = T.inner(model.to_dense())
    w = (point - T.theta) / (sigma * s_hat * scale)
    return TestRecord(form_id, float(w), point, float(sigma), s_hat, split_id, T.theta, scale)


test_statistic.__test__ = False


def confidence_interval(T, model, init, obs, level=0.95):
    """Normal-theory interval for ``<M, T>`` at the given coverage level."""
    check_alpha(level, "level")
    rec = test_statistic(T, model, init, obs)
    half = normal_quantile(0.5 * (1.0 + level)) * rec.std_error
    return rec.point - half, rec.point + half


def pair_correlation(T1, T2, U, V):
    """Asymptotic correlation of the estimated forms: cosine of their projections."""
    shape = (U.shape[0], V.shape[0])
    if T1 is T2:
        P1 = P2 = tangent_project(_as_dense(T1, shape), U, V)
    else:
        P1 = tangent_project(_as_dense(T1, shape), U, V)
        P2 = tangent_project(_as_dense(T2, shape), U, V)
    n1, n2 = np.linalg.norm(P1), np.linalg.norm(P2)
    if n1 == 0 or n2 == 0:
        raise UntestableFormError("correlation undefined for a zero projection")
    if P1 is P2:
        return 1.0
    return float(np.clip(np.sum(P1 * P2) / (n1 * n2), -1.0, 1.0))


def moment_diagnostic(w_samples, k):
    """Empirical ``2k``-th moment ``mean(w ** (2k))``."""
    if not isinstance(k, numbers.Integral) or k < 2:
        raise ValueError("k must be an integer >= 2")
    w = np.asarray(w_samples, dtype=np.float64)
    if w.size == 0:
        raise ValueError("no samples")
    return float(np.mean(w ** (2 * k)))


class DesignStack:
    """Row-stacked vectorizations of ``q`` linear forms (sparse ``q x d1 d2``).

    Also evaluates tangent-space inner products between the forms at given
    factors without materializing any ``d1 d2 x d1 d2`` operator.
    """

    def __init__(self, forms, shape):
        self.forms = list(forms)
        self.shape = tuple(shape)
        d1, d2 = self.shape
        q = len(self.forms)
        lens = [f.coefs.size for f in self.forms]
        self.form_index = np.repeat(np.arange(q), lens)
        if q:
            self.rows = np.concatenate([f.rows for f in self.forms])
            self.cols = np.concatenate([f.cols for f in self.forms])
            self.coefs = np.concatenate([f.coefs for f in self.forms])
        else:
            self.rows = self.cols = np.zeros(0, dtype=np.int64)
            self.coefs = np.zeros(0)
        if self.rows.size and (self.rows.max() >= d1 or self.cols.max() >= d2):
            raise ValueError(f"linear form indexes outside a {d1}x{d2} matrix")
        self.matrix = sp.csr_matrix(
            (self.coefs, (self.form_index, self.rows * d2 + self.cols)),
            shape=(q, d1 * d2),
        )
        self.thetas = np.array([f.theta for f in self.forms], dtype=np.float64)

    @property
    def q(self):
        return len(self.forms)

    def inner(self, matrix):
        """``<matrix, T_i>`` for every form."""
        return self.matrix @ np.asarray(matrix).ravel()

    def _features(self, U, V):
        d1, d2 = self.shape
        r = U.shape[1]
        q = self.q
        f, i, j, c = self.form_index, self.rows, self.cols, self.coefs
        k = np.arange(r)
        # U^T T_f (r x d2), T_f V (d1 x r), U^T T_f V (r x r), all vectorized
        a = sp.csr_matrix(
            ((c[:, None] * U[i]).ravel(),
             (np.repeat(f, r), (k[None, :] * d2 + j[:, None]).ravel())),
            shape=(q, r * d2),
        )
        b = sp.csr_matrix(
            ((c[:, None] * V[j]).ravel(),
             (np.repeat(f, r), (i[:, None] * r + k[None, :]).ravel())),
            shape=(q, d1 * r),
        )
        core = np.zeros((q, r * r))
        np.add.at(core, f, (c[:, None, None] * U[i][:, :, None] * V[j][:, None, :]).reshape(-1, r * r))
        return a, b, core

    def tangent_gram(self, U, V):
        """``Sigma[i, j] = <P(T_i), P(T_j)>`` at the factors ``(U, V)``."""
        a, b, core = self._features(U, V)
        gram = (a @ a.T).toarray() + (b @ b.T).toarray() - core @ core.T
        return 0.5 * (gram + gram.T)

    def projected_norms(self, U, V):
        """``||P(T_i)||_F`` for every form."""
        a, b, core = self._features(U, V)
        sq = (
            np.asarray(a.multiply(a).sum(axis=1)).ravel()
            + np.asarray(b.multiply(b).sum(axis=1)).ravel()
            - np.sum(core * core, axis=1)
        )
        return np.sqrt(np.maximum(sq, 0.0))

    def gram_rank(self, tol=1e-8):
        gram = (self.matrix @ self.matrix.T).toarray()
        if gram.size == 0:
            return 0
        eig = np.linalg.eigvalsh(gram)
        return int(np.sum(eig > tol * max(eig.max(), 1.0)))


@dataclass
class StatisticBatch:
    """Vectorized statistics for a stack of forms on one data set."""

    w: np.ndarray
    point: np.ndarray
    s_hat: np.ndarray
    sigma_xi_hat: float
    scale: float
    split_id: str = "all"

    @property
    def testable(self):
        return np.isfinite(self.w)

    def at(self, thetas):
        """Statistics re-evaluated under other null values ``thetas``."""
        denom = self.sigma_xi_hat * self.s_hat * self.scale
        out = np.full(self.w.shape, np.nan)
        ok = self.testable
        out[ok] = (self.point[ok] - np.asarray(thetas, dtype=np.float64)[ok]) / denom[ok]
        return out

    def records(self, thetas):
        return [
            TestRecord(i, float(self.w[i]), float(self.point[i]), self.sigma_xi_hat,
                       float(self.s_hat[i]), self.split_id, float(thetas[i]), self.scale)
            for i in range(self.w.size)
        ]


def batch_statistics(stack, model, obs, init=None, split_id="all"):
    """Statistics for every form in ``stack``; untestable forms get ``nan``."""
    init = _init_of(model, init)
    sigma = np.sqrt(noise_variance_estimate(obs, init))
    s_hat = stack.projected_norms(init.U, init.V)
    scale = np.sqrt(obs.d1 * obs.d2 / obs.n)
    point = stack.inner(model.to_dense())
    denom = sigma * s_hat * scale
    w = np.full(stack.q, np.nan)
    ok = denom > 1e-14 * max(1.0, np.max(np.abs(stack.coefs), initial=0.0))
    w[ok] = (point[ok] - stack.thetas[ok]) / denom[ok]
    return StatisticBatch(w, point, s_hat, float(sigma), float(scale), split_id)


class LinearFormTest(MatrixCompleter):
    """Matrix completion plus per-form statistics and confidence intervals.

    After ``fit(X, y)``, ``decision_function(forms)`` returns the statistics
    ``W_T``, ``predict_forms`` the point estimates ``<M_hat, T>``, and
    ``confidence_interval(forms)`` an ``(q, 2)`` array of bounds.
    """

    def __init__(
        self, rank=1, shape=None, step_size=None, max_iter=400, tol=1e-8,
        random_state=0, level=0.95,
    ):
        super().__init__(rank, shape, step_size, max_iter, tol, random_state)
        self.level = level

    def fit(self, X, y):
        super().fit(X, y)
        self.sigma_xi_ = np.sqrt(noise_variance_estimate(self.observations_, self.model_.init))
        return self

    def _batch(self, forms):
        check_is_fitted(self, "model_")
        if isinstance(forms, LinearForm):
            forms = [forms]
        stack = DesignStack(forms, self.shape_)
        return batch_statistics(stack, self.model_, self.observations_)

    def decision_function(self, forms):
        return self._batch(forms).w

    def predict_forms(self, forms):
        return self._batch(forms).point

    def pvalues(self, forms):
        batch = self._batch(forms)
        forms = [forms] if isinstance(forms, LinearForm) else forms
        sides = np.array([f.side for f in forms])
        out = np.empty(batch.w.size)
        for side in SIDES:
            mask = sides == side
            out[mask] = pvalues(batch.w[mask], side)
        return out

    def confidence_interval(self, forms, level=None):
        level = check_alpha(self.level if level is None else level, "level")
        batch = self._batch(forms)
        half = normal_quantile(0.5 * (1.0 + level)) * batch.sigma_xi_hat * batch.s_hat * batch.scale
        return np.column_stack([batch.point - half, batch.point + half])



def pvalues(w, side="two_sided"):
    """Normal-approximation p-values for statistics ``w``."""
    w = np.asarray(w, dtype=np.float64)
    if side == "two_sided":
        return 2.0 * ndtr(-np.abs(w))
    if side == "greater":
        return ndtr(-w)
    if side == "less":
        return ndtr(w)
    raise ValueError(f"unknown side {side!r}")
