"""FDR control by data splitting and symmetric aggregation, plus the BHq baseline."""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_alpha, check_observations
from .completion import GdConfig, full_estimate
from .inference import DesignStack, LinearForm, batch_statistics, pvalues


class AggregationScheme(str, Enum):
    """How two split statistics combine into one ranking statistic."""

    MULTIPLY = "multiply"
    MIN_ABS = "min_abs"
    SUM_ABS = "sum_abs"
    NONE_BHQ = "none_bhq"


@dataclass
class HypothesisSet:
    """A family of forms; ``truth[i]`` is True when form ``i`` is non-null."""

    forms: list
    truth: np.ndarray | None = None

    def __post_init__(self):
        self.forms = list(self.forms)
        if self.truth is not None:
            self.truth = np.asarray(self.truth, dtype=bool)
            if self.truth.shape != (len(self.forms),):
                raise ValueError("truth must have one label per form")

    @property
    def q(self):
        return len(self.forms)

    @property
    def thetas(self):
        return np.array([f.theta for f in self.forms])

    @property
    def sides(self):
        return np.array([f.side for f in self.forms], dtype=object)

    def stack(self, shape):
        return DesignStack(self.forms, shape)

    def with_thetas(self, thetas, truth=None):
        forms = [f.with_theta(t) for f, t in zip(self.forms, thetas)]
        return HypothesisSet(forms, self.truth if truth is None else truth)

    def __len__(self):
        return self.q


@dataclass
class RejectionResult:
    """Outcome of one multiple-testing run.

    ``w_rank`` is ``nan`` for forms that were untestable or dropped by the
    one-sided prefilter; those never enter the threshold scan.
    """

    threshold: float
    rejected: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    w_rank: np.ndarray
    method: str = "multiply"
    untestable: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    dropped: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    fdp: float | None = None
    power: float | None = None
    notes: list = field(default_factory=list)
    details: object | None = None

    @property
    def n_rejected(self):
        return int(self.rejected.size)

    def rejected_mask(self):
        mask = np.zeros(self.w_rank.size, dtype=bool)
        mask[self.rejected] = True
        return mask


def split_observations(obs, seed):
    """Random halves of the sample; the odd sample goes to the first half."""
    if obs.n < 2:
        raise ValueError("need at least two observations to split")
    perm = np.random.default_rng(seed).permutation(obs.n)
    n1 = (obs.n + 1) // 2
    return obs.subset(np.sort(perm[:n1])), obs.subset(np.sort(perm[n1:]))


def aggregate(w1, w2, scheme="multiply"):
    """Mirror statistic ``sign(w1 w2) f(|w1|, |w2|)``."""
    scheme = AggregationScheme(scheme)
    w1 = np.asarray(w1, dtype=np.float64)
    w2 = np.asarray(w2, dtype=np.float64)
    if scheme is AggregationScheme.MULTIPLY:
        out = w1 * w2
    elif scheme is AggregationScheme.MIN_ABS:
        out = np.sign(w1 * w2) * np.minimum(np.abs(w1), np.abs(w2))
    elif scheme is AggregationScheme.SUM_ABS:
        out = np.sign(w1 * w2) * (np.abs(w1) + np.abs(w2))
    else:
        raise ValueError("the BHq baseline does not aggregate split statistics")
    return out if out.ndim else float(out)


def data_driven_threshold(w_rank, alpha):
    """Smallest ``t > 0`` with ``#{w < -t} / max(#{w > t}, 1) <= alpha``.

    Returns 0.0 when every ``t`` below ``min |w|`` already qualifies and
    ``inf`` when no ``t`` qualifies with at least one ``w > t`` (the
    rejection set is empty either way). Forms are rejected when ``w > L``.
    """
    alpha = check_alpha(alpha)
    w = np.asarray(w_rank, dtype=np.float64)
    w = w[np.isfinite(w)]
    mags = np.unique(np.abs(w[w != 0]))
    if mags.size == 0:
        return np.inf
    neg = np.sort(-w[w < 0])
    pos = np.sort(w[w > 0])
    cand = np.concatenate([[0.0], mags])
    n_neg = neg.size - np.searchsorted(neg, cand, side="right")
    n_pos = pos.size - np.searchsorted(pos, cand, side="right")
    ok = n_neg <= alpha * np.maximum(n_pos, 1)
    if not ok.any():
        return np.inf
    k = np.argmax(ok)
    # a feasible t with nothing above it rejects nothing
    return float(cand[k]) if n_pos[k] else np.inf


def bh_reject(p, alpha):
    """Benjamini-Hochberg step-up on p-values; returns rejected indices."""
    alpha = check_alpha(alpha)
    p = np.asarray(p, dtype=np.float64)
    q = p.size
    if q == 0:
        return np.zeros(0, dtype=int)
    order = np.argsort(p, kind="stable")
    below = p[order] <= alpha * np.arange(1, q + 1) / q
    if not below.any():
        return np.zeros(0, dtype=int)
    k = np.flatnonzero(below)[-1]
    return np.sort(order[: k + 1])


def bh_procedure(w_all, alpha, side="two_sided"):
    """BHq on normal p-values of the statistics ``w_all``."""
    w = np.asarray(w_all, dtype=np.float64)
    finite = np.flatnonzero(np.isfinite(w))
    return finite[bh_reject(pvalues(w[finite], side), alpha)]


def score(rejected, truth):
    """``(fdp, power)`` of a rejection set against non-null labels."""
    truth = np.asarray(truth, dtype=bool)
    rejected = np.asarray(rejected, dtype=int)
    true_rej = int(truth[rejected].sum())
    false_rej = rejected.size - true_rej
    fdp = false_rej / max(rejected.size, 1)
    q1 = int(truth.sum())
    power = true_rej / q1 if q1 else 0.0
    return fdp, power


def one_sided_prefilter(w1, w2, sides):
    """Mask of forms kept: drops one-sided forms whose split statistics both
    point away from the alternative."""
    w1 = np.asarray(w1, dtype=np.float64)
    w2 = np.asarray(w2, dtype=np.float64)
    sides = np.broadcast_to(np.asarray(sides, dtype=object), w1.shape)
    drop = ((sides == "greater") & (w1 < 0) & (w2 < 0)) | (
        (sides == "less") & (w1 > 0) & (w2 > 0)
    )
    return ~drop


@dataclass
class SplitStatistics:
    """Per-split estimates and statistics for one hypothesis family."""

    batches: tuple
    models: tuple
    splits: tuple
    stack: DesignStack

    @property
    def w1(self):
        return self.batches[0].w

    @property
    def w2(self):
        return self.batches[1].w

    def at(self, thetas):
        """Split statistics under null values ``thetas``."""
        return self.batches[0].at(thetas), self.batches[1].at(thetas)


def compute_split_statistics(obs, hypotheses, cfg, seed):
    """Split the data and evaluate every form on each half independently."""
    d1_obs, d2_obs = split_observations(obs, seed)
    stack = hypotheses.stack(obs.shape)
    models, batches = [], []
    for part, tag in ((d1_obs, "1"), (d2_obs, "2")):
        model = full_estimate(part, cfg)
        models.append(model)
        batches.append(batch_statistics(stack, model, part, split_id=tag))
    return SplitStatistics(tuple(batches), tuple(models), (d1_obs, d2_obs), stack)


def reject_from_splits(w1, w2, scheme, alpha, sides="two_sided", truth=None):
    """Aggregate, threshold and score precomputed split statistics."""
    scheme = AggregationScheme(scheme)
    w1 = np.asarray(w1, dtype=np.float64)
    w2 = np.asarray(w2, dtype=np.float64)
    testable = np.isfinite(w1) & np.isfinite(w2)
    keep = one_sided_prefilter(np.where(testable, w1, 0), np.where(testable, w2, 0), sides)
    active = testable & keep
    w_rank = np.full(w1.shape, np.nan)
    w_rank[active] = aggregate(w1[active], w2[active], scheme)
    L = data_driven_threshold(w_rank[active], alpha)
    rejected = np.flatnonzero(active & (w_rank > L))
    result = RejectionResult(
        L, rejected, w1, w2, w_rank, scheme.value,
        untestable=np.flatnonzero(~testable),
        dropped=np.flatnonzero(testable & ~keep),
    )
    if truth is not None:
        result.fdp, result.power = score(rejected, truth)
    return result


def _empty_result(method):
    e = np.zeros(0)
    return RejectionResult(np.inf, np.zeros(0, dtype=int), e, e, e, method)


def run_algorithm1(obs, hypotheses, cfg, scheme="multiply", alpha=0.1, seed=0):
    """Split, estimate each half, aggregate and threshold at level ``alpha``."""
    scheme = AggregationScheme(scheme)
    if scheme is AggregationScheme.NONE_BHQ:
        raise ValueError("use run_bhq for the BHq baseline")
    alpha = check_alpha(alpha)
    if hypotheses.q == 0:
        return _empty_result(scheme.value)
    stats = compute_split_statistics(obs, hypotheses, cfg, seed)
    return reject_from_splits(
        stats.w1, stats.w2, scheme, alpha, hypotheses.sides, hypotheses.truth
    )


def run_bhq(obs, hypotheses, cfg, alpha=0.1, model=None):
    """BHq on statistics built from the full, unsplit sample.

    One-sided forms use one-sided p-values. ``w_rank`` holds the score used
    for ranking (``|w|`` for two-sided forms, signed ``w`` otherwise).
    """
    alpha = check_alpha(alpha)
    if hypotheses.q == 0:
        return _empty_result("bhq")
    if model is None:
        model = full_estimate(obs, cfg)
    stack = hypotheses.stack(obs.shape)
    w = batch_statistics(stack, model, obs).w
    sides = hypotheses.sides
    testable = np.isfinite(w)
    p = np.full(w.shape, np.nan)
    for side in ("two_sided", "greater", "less"):
        mask = testable & (sides == side)
        p[mask] = pvalues(w[mask], side)
    idx = np.flatnonzero(testable)
    rejected = idx[bh_reject(p[idx], alpha)]
    rank = np.where(sides == "two_sided", np.abs(w), np.where(sides == "less", -w, w))
    result = RejectionResult(
        np.nan, rejected, w, np.full(w.shape, np.nan), rank, "bhq",
        untestable=np.flatnonzero(~testable),
    )
    if hypotheses.truth is not None:
        result.fdp, result.power = score(rejected, hypotheses.truth)
    return result


class SymmetricAggregationFDR(BaseEstimator):
    """Multiple testing of linear forms with FDR control at level ``alpha``.

    ``fit(X, y, hypotheses)`` takes sampled coordinates ``X`` (n x 2), values
    ``y`` and a :class:`HypothesisSet` (or list of :class:`LinearForm`).
    ``scheme="none_bhq"`` runs the unsplit BHq baseline instead.

    Attributes
    ----------
    result_ : RejectionResult
    threshold_ : float
    rejected_ : ndarray of int
    w_rank_ : ndarray
    """

    def __init__(
        self, rank=1, alpha=0.1, scheme="multiply", shape=None, step_size=None,
        max_iter=400, tol=1e-8, random_state=0,
    ):
        self.rank = rank
        self.alpha = alpha
        self.scheme = scheme
        self.shape = shape
        self.step_size = step_size
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def _gd_config(self):
        seed = 0 if self.random_state is None else int(self.random_state)
        return GdConfig(self.rank, self.step_size, self.max_iter, self.tol, seed)

    def fit(self, X, y, hypotheses):
        obs = check_observations(X, y, self.shape)
        if not isinstance(hypotheses, HypothesisSet):
            hypotheses = HypothesisSet(list(hypotheses))
        if hypotheses.forms and not all(isinstance(f, LinearForm) for f in hypotheses.forms):
            raise TypeError("hypotheses must be LinearForm instances")
        cfg = self._gd_config()
        if AggregationScheme(self.scheme) is AggregationScheme.NONE_BHQ:
            self.result_ = run_bhq(obs, hypotheses, cfg, self.alpha)
        else:
            self.result_ = run_algorithm1(
                obs, hypotheses, cfg, self.scheme, self.alpha, seed=cfg.seed
            )
        self.threshold_ = self.result_.threshold
        self.rejected_ = self.result_.rejected
        self.w_rank_ = self.result_.w_rank
        return self

    def predict(self, hypotheses=None):
        """Boolean rejection mask over the fitted family."""
        check_is_fitted(self, "result_")
        return self.result_.rejected_mask()
