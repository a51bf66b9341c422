"""Synthetic low-rank scenarios and Monte-Carlo evaluation of the testing procedures."""

import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .completion import FactorModel, GdConfig, ObservationSet, _fix_signs, full_estimate
from .inference import DesignStack, LinearForm, batch_statistics, pvalues
from .multitest import (
    HypothesisSet,
    bh_reject,
    compute_split_statistics,
    reject_from_splits,
    score,
)
from .whitening import check_family, estimate_sigma, whitened_from_splits

NOISE_KINDS = ("gaussian", "exponential_centered", "student_t")
SCHEMES = ("multiply", "min_abs", "sum_abs", "none_bhq", "whitened")


def generate_low_rank(d1, d2, rank, lambda_min, kappa=2.0, seed=0):
    """Random rank-``rank`` matrix with Haar-like singular subspaces.

    Singular values are evenly spaced between ``lambda_min`` and
    ``kappa * lambda_min``.
    """
    if not 1 <= rank <= min(d1, d2):
        raise ValueError(f"rank must lie in [1, {min(d1, d2)}]")
    if kappa < 1:
        raise ValueError("kappa must be >= 1")
    if lambda_min <= 0:
        raise ValueError("lambda_min must be positive")
    rng = np.random.default_rng(seed)
    U, _ = np.linalg.qr(rng.standard_normal((d1, rank)))
    V, _ = np.linalg.qr(rng.standard_normal((d2, rank)))
    U, V = _fix_signs(U, V)
    S = np.linspace(kappa * lambda_min, lambda_min, rank)
    model = FactorModel(U, V, S)
    model.to_dense()
    return model


def draw_noise(rng, size, sigma_xi, noise="gaussian", df=5.0):
    """Mean-zero noise with standard deviation ``sigma_xi``."""
    if sigma_xi < 0:
        raise ValueError("sigma_xi must be non-negative")
    if noise == "gaussian":
        return sigma_xi * rng.standard_normal(size)
    if noise == "exponential_centered":
        return rng.exponential(sigma_xi, size) - sigma_xi if sigma_xi > 0 else np.zeros(size)
    if noise == "student_t":
        if df <= 2:
            raise ValueError("student_t noise needs df > 2 for finite variance")
        return sigma_xi * np.sqrt((df - 2) / df) * rng.standard_t(df, size)
    raise ValueError(f"unknown noise kind {noise!r}")


def sample_observations(model, n, sigma_xi, noise="gaussian", seed=0, df=5.0):
    """``n`` uniform draws with replacement of noisy entries of ``model``."""
    if n < 1:
        raise ValueError("n must be positive")
    d1, d2 = model.shape
    rng = np.random.default_rng(seed)
    rows = rng.integers(0, d1, size=n)
    cols = rng.integers(0, d2, size=n)
    y = model.to_dense()[rows, cols] + draw_noise(rng, n, sigma_xi, noise, df)
    return ObservationSet(d1, d2, rows, cols, y)


def assign_signals(true_values, p, mu, seed, side="two_sided"):
    """Null values with random shifts on a random subset of forms.

    Each form is non-null with probability ``p``; its shift has magnitude
    ``mu * (0.5 + U[0, 1])`` and points along the alternative.

    Returns
    -------
    thetas : ndarray
    truth : ndarray of bool
    """
    if not 0 <= p <= 1:
        raise ValueError("p must lie in [0, 1]")
    if mu < 0:
        raise ValueError("mu must be non-negative")
    true_values = np.asarray(true_values, dtype=np.float64)
    q = true_values.size
    rng = np.random.default_rng(seed)
    # draw everything regardless of p and mu so levels share randomness
    truth = rng.random(q) < p
    mags = mu * (0.5 + rng.random(q))
    signs = np.where(rng.random(q) < 0.5, -1.0, 1.0)
    if side == "greater":
        signs[:] = 1.0
    elif side == "less":
        signs[:] = -1.0
    shift = np.where(truth, signs * mags, 0.0)
    return true_values - shift, truth


def _as_index(values, limit, name):
    idx = np.asarray(values, dtype=int).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= limit):
        raise ValueError(f"{name} out of range [0, {limit})")
    return idx


def build_family(kind, shape, rows=(), cols=(), groups=(), side="two_sided", anchor=(0, 0)):
    """Hypothesis families over a ``d1 x d2`` matrix.

    Parameters
    ----------
    kind : {"submatrix", "row_comparison", "block_comparison", "group_sum"}
        ``submatrix`` tests every entry ``(i, j)``; ``row_comparison`` the
        differences ``M[i, j] - M[i + 1, j]``; ``block_comparison`` the
        differences ``M[i, j] - M[anchor]`` (anchor excluded);
        ``group_sum`` the column sums ``sum_{i in G} M[i, j]`` per group.
    """
    d1, d2 = shape
    cols = _as_index(cols, d2, "cols")
    forms = []
    if kind == "submatrix":
        for i in _as_index(rows, d1, "rows"):
            forms += [LinearForm.entry(i, j, side=side) for j in cols]
    elif kind == "row_comparison":
        for i in _as_index(rows, d1 - 1, "rows"):
            forms += [LinearForm([i, i + 1], [j, j], [1.0, -1.0], side=side) for j in cols]
    elif kind == "block_comparison":
        a, b = anchor
        for i in _as_index(rows, d1, "rows"):
            forms += [LinearForm([i, a], [j, b], [1.0, -1.0], side=side)
                      for j in cols if (i, j) != (a, b)]
    elif kind == "group_sum":
        seen = set()
        for g in groups:
            g = _as_index(g, d1, "group rows")
            if g.size == 0:
                raise ValueError("groups must be non-empty")
            if seen & set(g.tolist()) or len(set(g.tolist())) != g.size:
                raise ValueError("groups must not overlap")
            seen |= set(g.tolist())
            forms += [LinearForm(g, np.full(g.size, j), np.ones(g.size), side=side)
                      for j in cols]
    else:
        raise ValueError(f"unknown family kind {kind!r}")
    return HypothesisSet(forms)


def correlation_matrix(hypotheses, U, V):
    """Asymptotic correlations of all form pairs at factors ``(U, V)``."""
    stack = DesignStack(hypotheses.forms, (U.shape[0], V.shape[0]))
    sigma = estimate_sigma(stack, U, V)
    sd = np.sqrt(np.clip(np.diag(sigma), 0.0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        rho = sigma / np.outer(sd, sd)
    np.fill_diagonal(rho, 1.0)
    return rho


def dependence_diagnostic(hypotheses, U, V, z):
    """Share of ordered pairs (diagonal included) with ``|rho| > z``."""
    if not 0 < z < 1:
        raise ValueError("z must lie in (0, 1)")
    if hypotheses.q == 0:
        return 0.0
    rho = correlation_matrix(hypotheses, np.asarray(U, float), np.asarray(V, float))
    return float(np.mean(np.abs(rho) > z))


def null_statistics(model, forms, n, sigma_xi, noise="gaussian", reps=100, seed=0,
                    cfg=None, df=5.0):
    """Statistics of true nulls over repeated sampling from a fixed model.

    Each replicate redraws the sample (stream ``(seed, rep)``), refits and
    evaluates every form at its true value.

    Returns
    -------
    ndarray of shape (reps, len(forms))
    """
    if reps < 1:
        raise ValueError("reps must be positive")
    cfg = cfg or GdConfig(model.rank)
    stack = DesignStack(list(forms), model.shape)
    true_values = stack.inner(model.to_dense())
    out = np.empty((reps, stack.q))
    for rep in range(reps):
        child = np.random.SeedSequence(seed, spawn_key=(rep,))
        obs = sample_observations(model, n, sigma_xi, noise, child, df)
        out[rep] = batch_statistics(stack, full_estimate(obs, cfg), obs).at(true_values)
    return out


def oracle_power(scores, truth, fdp_level=0.1):
    """Best power over all score cutoffs whose realized FDP is at most ``fdp_level``."""
    scores = np.where(np.isfinite(scores), scores, -np.inf)
    truth = np.asarray(truth, dtype=bool)
    q1 = int(truth.sum())
    if q1 == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    s, t = scores[order], truth[order]
    tp = np.cumsum(t)
    fp = np.cumsum(~t)
    # only cut between distinct scores
    ends = np.r_[s[1:] != s[:-1], True] & np.isfinite(s)
    ok = ends & (fp / np.maximum(tp + fp, 1) <= fdp_level)
    return float(tp[ok].max() / q1) if ok.any() else 0.0


class FamilySpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["submatrix", "row_comparison", "block_comparison", "group_sum"]
    rows: list[int] = Field(default_factory=list)
    cols: list[int] = Field(default_factory=list)
    row_range: tuple[int, int] | None = None
    col_range: tuple[int, int] | None = None
    groups: list[list[int]] = Field(default_factory=list)

    def resolve(self, shape, side):
        rows = list(self.rows) + (list(range(*self.row_range)) if self.row_range else [])
        cols = list(self.cols) + (list(range(*self.col_range)) if self.col_range else [])
        return build_family(self.kind, shape, rows, cols, self.groups, side)


class ScenarioConfig(BaseModel):
    """One simulation sweep; ``signals`` lists the signal levels to evaluate.

    With ``signal_scale="rate"`` a level ``s`` means
    ``mu = s * sigma_xi * sqrt(d1 log d1 / n)``.
    """

    model_config = ConfigDict(extra="forbid")

    d1: int = Field(gt=0)
    d2: int = Field(gt=0)
    rank: int = Field(gt=0)
    lambda_min: float = Field(gt=0)
    kappa: float = Field(default=2.0, ge=1)
    n: int = Field(gt=1)
    noise: Literal["gaussian", "exponential_centered", "student_t"] = "gaussian"
    df: float = 5.0
    sigma_xi: float = Field(default=1.0, ge=0)
    family: FamilySpec
    signal_prob: float = Field(default=0.2, ge=0, le=1)
    signals: list[float] = Field(default_factory=lambda: [8.0])
    signal_scale: Literal["absolute", "rate"] = "rate"
    side: Literal["two_sided", "greater", "less"] = "two_sided"
    schemes: list[str] = Field(default_factory=lambda: ["multiply", "min_abs", "sum_abs", "none_bhq"])
    alpha: float = Field(default=0.1, gt=0, lt=1)
    lambda_scale: float = Field(default=1.0, ge=0)
    formulation: Literal["unnormalized", "correlation"] = "unnormalized"
    reps: int = Field(default=10, ge=1)
    seed: int = Field(default=0, ge=0)
    roc: bool = False
    oracle_fdp: float = Field(default=0.1, gt=0, lt=1)
    max_iter: int = Field(default=400, gt=0)
    step_size: float | None = None
    tol: float = Field(default=1e-8, gt=0)

    @field_validator("schemes")
    @classmethod
    def _known_schemes(cls, v):
        bad = [s for s in v if s not in SCHEMES]
        if bad or not v:
            raise ValueError(f"schemes must be a non-empty subset of {SCHEMES}, got {bad}")
        return v

    @field_validator("signals")
    @classmethod
    def _nonneg_signals(cls, v):
        if not v or min(v) < 0:
            raise ValueError("signals must be a non-empty list of non-negative levels")
        return v

    @model_validator(mode="after")
    def _check(self):
        if self.rank > min(self.d1, self.d2):
            raise ValueError("rank exceeds min(d1, d2)")
        if self.noise == "student_t" and self.df <= 2:
            raise ValueError("student_t noise needs df > 2")
        return self

    def mu(self, level):
        if self.signal_scale == "absolute":
            return float(level)
        return float(level * self.sigma_xi * np.sqrt(self.d1 * np.log(self.d1) / self.n))

    def gd_config(self):
        return GdConfig(self.rank, self.step_size, self.max_iter, self.tol, 0)


@dataclass
class TrialOutcome:
    trial: int
    records: list = field(default_factory=list)  # dicts: scheme, signal, fdp, power, oracle_power
    scores: dict = field(default_factory=dict)  # (scheme, signal) -> (score, truth)
    error: str | None = None


@dataclass
class MetricsTable:
    """Aggregated FDP and power per (scheme, signal level) plus optional ROC."""

    rows: list
    roc: list = field(default_factory=list)
    trials: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    METRIC_COLUMNS = ("scheme", "signal", "alpha", "mean_fdp", "sd_fdp",
                      "mean_power", "sd_power", "reps")
    ROC_COLUMNS = ("scheme", "signal", "cutoff", "fpr", "tpr")

    def row(self, scheme, signal):
        for r in self.rows:
            if r["scheme"] == scheme and np.isclose(r["signal"], signal):
                return r
        raise KeyError((scheme, signal))

    def trial_values(self, scheme, signal, key):
        return np.array([t[key] for t in self.trials
                         if t["scheme"] == scheme and np.isclose(t["signal"], signal)])

    def write_metrics(self, path):
        _write_csv(path, self.METRIC_COLUMNS, self.rows)

    def write_roc(self, path):
        _write_csv(path, self.ROC_COLUMNS, self.roc)


def _write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                             for k, v in r.items()})


def trial_seeds(seed, trial):
    """Independent child seeds for one trial: model, signals, sample, split."""
    return np.random.SeedSequence(seed, spawn_key=(trial,)).spawn(4)


def run_trial(config, trial):
    """One Monte-Carlo replicate over every scheme and signal level."""
    out = TrialOutcome(trial)
    try:
        s_model, s_signal, s_sample, s_split = trial_seeds(config.seed, trial)
        model = generate_low_rank(config.d1, config.d2, config.rank, config.lambda_min,
                                  config.kappa, s_model)
        obs = sample_observations(model, config.n, config.sigma_xi, config.noise,
                                  s_sample, config.df)
        shape = (config.d1, config.d2)
        family = config.family.resolve(shape, config.side)
        stack = family.stack(shape)
        true_values = stack.inner(model.to_dense())
        cfg = config.gd_config()
        sides = family.sides
        schemes = config.schemes
        splits = None
        if any(s != "none_bhq" for s in schemes):
            split_seed = int(s_split.generate_state(1)[0])
            splits = compute_split_statistics(obs, family, cfg, split_seed)
        full_batch = None
        if "none_bhq" in schemes:
            full_batch = batch_statistics(stack, full_estimate(obs, cfg), obs)
        sigma_hat = None
        if "whitened" in schemes:
            check_family(family, shape, config.rank)
            init1 = splits.models[0].init
            sigma_hat = estimate_sigma(stack, init1.U, init1.V)
        lam = config.lambda_scale * np.sqrt(np.log(config.d1))
        for level in config.signals:
            thetas, truth = assign_signals(true_values, config.signal_prob,
                                           config.mu(level), s_signal, config.side)
            if splits is not None:
                w1, w2 = splits.at(thetas)
            for scheme in schemes:
                if scheme == "none_bhq":
                    w = full_batch.at(thetas)
                    rank_score, rejected = _bhq(w, sides, config.alpha)
                elif scheme == "whitened":
                    b1, b2 = splits.batches
                    res = whitened_from_splits(w1, w2, b1.s_hat, b2.s_hat, sigma_hat, lam,
                                               config.alpha, sides, None, config.formulation)
                    rank_score, rejected = res.w_rank, res.rejected
                else:
                    res = reject_from_splits(w1, w2, scheme, config.alpha, sides)
                    rank_score, rejected = res.w_rank, res.rejected
                fdp, power = score(rejected, truth)
                out.records.append({
                    "trial": trial, "scheme": scheme, "signal": float(level),
                    "fdp": fdp, "power": power, "n_rejected": int(rejected.size),
                    "oracle_power": oracle_power(rank_score, truth, config.oracle_fdp),
                })
                if config.roc:
                    out.scores[(scheme, float(level))] = (rank_score, truth)
    except Exception as exc:  # noqa: BLE001 - recorded and counted, never dropped silently
        out.error = f"{type(exc).__name__}: {exc}"
        out.records, out.scores = [], {}
    return out


def _bhq(w, sides, alpha):
    testable = np.isfinite(w)
    p = np.full(w.shape, np.nan)
    for side in ("two_sided", "greater", "less"):
        mask = testable & (sides == side)
        p[mask] = pvalues(w[mask], side)
    idx = np.flatnonzero(testable)
    rejected = idx[bh_reject(p[idx], alpha)]
    rank = np.where(sides == "two_sided", np.abs(w), np.where(sides == "less", -w, w))
    return rank, rejected


def _roc_points(pairs, n_cutoffs=200):
    scores = np.concatenate([s[np.isfinite(s)] for s, _ in pairs])
    if scores.size == 0:
        return []
    cutoffs = np.unique(np.quantile(scores, np.linspace(0, 1, n_cutoffs)))
    pts = []
    for c in np.r_[-np.inf, cutoffs]:
        fpr, tpr = [], []
        for s, truth in pairs:
            sel = np.where(np.isfinite(s), s, -np.inf) > c
            q0, q1 = int((~truth).sum()), int(truth.sum())
            fpr.append(sel[~truth].sum() / q0 if q0 else 0.0)
            tpr.append(sel[truth].sum() / q1 if q1 else 0.0)
        pts.append((float(c), float(np.mean(fpr)), float(np.mean(tpr))))
    return pts


def _run_trial_packed(args):
    payload, trial = args
    return run_trial(ScenarioConfig.model_validate(payload), trial)


def monte_carlo(config, threads=1):
    """Run ``config.reps`` independent trials and aggregate their metrics.

    Trials draw from streams keyed by ``(seed, trial)``, so serial and
    parallel runs give identical tables. Failed trials are excluded and
    listed in ``failures``.
    """
    trials = range(config.reps)
    if threads and threads > 1 and config.reps > 1:
        payload = config.model_dump()
        with ProcessPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(_run_trial_packed, [(payload, t) for t in trials]))
    else:
        outcomes = [run_trial(config, t) for t in trials]
    outcomes.sort(key=lambda o: o.trial)
    failures = [(o.trial, o.error) for o in outcomes if o.error]
    records = [r for o in outcomes if not o.error for r in o.records]
    rows, roc = [], []
    for scheme in config.schemes:
        for level in config.signals:
            sel = [r for r in records if r["scheme"] == scheme and r["signal"] == float(level)]
            fdp = np.array([r["fdp"] for r in sel])
            power = np.array([r["power"] for r in sel])
            rows.append({
                "scheme": scheme, "signal": float(level), "alpha": config.alpha,
                "mean_fdp": float(fdp.mean()) if sel else float("nan"),
                "sd_fdp": float(fdp.std(ddof=1)) if len(sel) > 1 else 0.0,
                "mean_power": float(power.mean()) if sel else float("nan"),
                "sd_power": float(power.std(ddof=1)) if len(sel) > 1 else 0.0,
                "reps": len(sel),
            })
            if config.roc:
                pairs = [o.scores[(scheme, float(level))] for o in outcomes if not o.error]
                roc += [{"scheme": scheme, "signal": float(level), "cutoff": c,
                         "fpr": f, "tpr": t} for c, f, t in _roc_points(pairs)]
    return MetricsTable(rows, roc, records, failures)


def default_threads():
    return os.cpu_count() or 1
