"""Command-line front end: ``mcfdr simulate | analyze | diagnose``."""

import argparse
import csv
import json
import subprocess
import sys
import warnings
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from scipy import stats

from . import __version__
from .completion import GdConfig
from .inference import LinearForm, moment_diagnostic, normal_cdf
from .ingest import (
    RatingsFormatError,
    adjacent_pair_family,
    filter_min_ratings,
    read_ratings,
)
from .multitest import AggregationScheme, HypothesisSet, run_algorithm1, run_bhq
from .simulation import (
    FamilySpec,
    ScenarioConfig,
    default_threads,
    dependence_diagnostic,
    generate_low_rank,
    monte_carlo,
    null_statistics,
)
from .whitening import run_algorithm2

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3

DECISION_COLUMNS = ("form_id", "w1", "w2", "w_rank", "rejected")
SUMMARY_COLUMNS = ("method", "rejections", "false", "true", "fdp")
NULL_CDF_COLUMNS = ("t", "ecdf_minus_normal")
DEPENDENCE_COLUMNS = ("z", "rho_star")
MOMENT_COLUMNS = ("k", "moment")


class UsageError(Exception):
    """Bad configuration or input; maps to exit status 2."""


class AdjacentPairs(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["adjacent_pairs"] = "adjacent_pairs"
    max_q: int = Field(default=1000, ge=0)
    side: Literal["two_sided", "greater", "less"] = "greater"


class AnalyzeConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    data: str
    format: Literal["tsv_user_item_rating", "csv_wide_matrix"] = "tsv_user_item_rating"
    min_ratings: int = Field(default=0, ge=0)
    family: AdjacentPairs = Field(default_factory=AdjacentPairs)
    rank: int = Field(default=3, gt=0)
    scheme: Literal["multiply", "min_abs", "sum_abs", "none_bhq", "whitened"] = "multiply"
    alpha: float = Field(default=0.1, gt=0, lt=1)
    lambda_scale: float = Field(default=1.0, ge=0)
    formulation: Literal["unnormalized", "correlation"] = "unnormalized"
    seed: int = Field(default=0, ge=0)
    max_iter: int = Field(default=400, gt=0)
    step_size: float | None = None
    tol: float = Field(default=1e-8, gt=0)


class FormSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    rows: list[int]
    cols: list[int]
    coefs: list[float]

    def build(self):
        return LinearForm(self.rows, self.cols, self.coefs)


class DiagnoseConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    d1: int = Field(gt=0)
    d2: int = Field(gt=0)
    rank: int = Field(gt=0)
    lambda_min: float = Field(gt=0)
    kappa: float = Field(default=2.0, ge=1)
    n: int = Field(gt=1)
    noise: Literal["gaussian", "exponential_centered", "student_t"] = "gaussian"
    df: float = 5.0
    sigma_xi: float = Field(default=1.0, gt=0)
    form: FormSpec = Field(default_factory=lambda: FormSpec(rows=[0], cols=[0], coefs=[1.0]))
    family: FamilySpec | None = None
    reps: int = Field(default=300, ge=1)
    seed: int = Field(default=0, ge=0)
    z_grid: list[float] = Field(default_factory=lambda: [0.1, 0.2, 0.3, 0.5, 0.7, 0.9])
    moment_orders: list[int] = Field(default_factory=lambda: [2, 3])


def version_string():
    """Package version with the git revision when the source tree has one."""
    try:
        rev = subprocess.run(
            ["git", "describe", "--always", "--dirty"], cwd=Path(__file__).parent, check=False,
            capture_output=True, text=True, timeout=5,
        )
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _load_config(path, model, overrides):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return model.model_validate(raw)
    except ValidationError as exc:
        raise UsageError(f"invalid config:\n{exc}") from None


def _schemes(arg):
    if arg is None:
        return None
    names = [s.strip() for s in arg.split(",") if s.strip()]
    if not names:
        raise UsageError("--scheme needs at least one name")
    return names


def _out_dir(path):
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from None
    return out


def _write_rows(path, columns, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        writer.writerows(rows)


def read_output(path):
    """Parse an output CSV into ``{column: array}``; numeric columns become floats."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    table = {}
    for k, name in enumerate(header):
        values = [r[k] for r in rows]
        try:
            table[name] = np.array([float(v) for v in values])
        except ValueError:
            table[name] = np.array(values, dtype=object)
    return table


def _fmt(x):
    return repr(float(x))


def _provenance(out, command, config, seed):
    record = {"command": command, "version": version_string(), "seed": seed,
              "config": config.model_dump(mode="json")}
    with open(out / "run.json", "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_simulate(args):
    config = _load_config(args.config, ScenarioConfig, {
        "seed": args.seed, "alpha": args.alpha, "schemes": _schemes(args.scheme)})
    out = _out_dir(args.out)
    table = monte_carlo(config, threads=args.threads)
    table.write_metrics(out / "metrics.csv")
    if config.roc:
        table.write_roc(out / "roc.csv")
    _provenance(out, "simulate", config, config.seed)
    for trial, err in table.failures:
        print(f"trial {trial} failed: {err}", file=sys.stderr)
    for r in table.rows:
        print(f"{r['scheme']:>9} signal={r['signal']:<6g} fdp={r['mean_fdp']:.4f} "
              f"power={r['mean_power']:.4f} reps={r['reps']}")
    return EXIT_OK


def _analyze(config):
    try:
        table = read_ratings(config.data, config.format)
    except FileNotFoundError:
        raise UsageError(f"data file not found: {config.data}") from None
    except RatingsFormatError as exc:
        raise UsageError(str(exc)) from None
    table = filter_min_ratings(table, config.min_ratings)
    hyp, _ = adjacent_pair_family(table, config.family.max_q, config.family.side)
    if hyp.q == 0:
        return None, hyp
    obs = table.to_observations()
    cfg = GdConfig(config.rank, config.step_size, config.max_iter, config.tol, config.seed)
    if config.scheme == "none_bhq":
        result = run_bhq(obs, hyp, cfg, config.alpha)
    elif config.scheme == "whitened":
        result = run_algorithm2(obs, hyp, cfg, config.alpha, config.lambda_scale,
                                seed=config.seed, formulation=config.formulation)
    else:
        result = run_algorithm1(obs, hyp, cfg, AggregationScheme(config.scheme),
                                config.alpha, seed=config.seed)
    return result, hyp


def cmd_analyze(args):
    schemes = _schemes(args.scheme)
    if schemes is not None and len(schemes) != 1:
        raise UsageError("analyze takes a single --scheme")
    config = _load_config(args.config, AnalyzeConfig, {
        "seed": args.seed, "alpha": args.alpha, "scheme": schemes[0] if schemes else None})
    out = _out_dir(args.out)
    result, hyp = _analyze(config)
    rows, summary = [], []
    if result is not None:
        mask = result.rejected_mask()
        rows = [(k, _fmt(result.w1[k]), _fmt(result.w2[k]), _fmt(result.w_rank[k]), int(mask[k]))
                for k in range(hyp.q)]
        n_true = int(hyp.truth[result.rejected].sum())
        n_false = result.n_rejected - n_true
        summary = [(config.scheme, result.n_rejected, n_false, n_true,
                    f"{n_false / max(result.n_rejected, 1):.4f}")]
    else:
        summary = [(config.scheme, 0, 0, 0, f"{0.0:.4f}")]
    _write_rows(out / "decisions.csv", DECISION_COLUMNS, rows)
    _write_rows(out / "summary.csv", SUMMARY_COLUMNS, summary)
    _provenance(out, "analyze", config, config.seed)
    print(f"hypotheses: {hyp.q}")
    print(f"{'method':>10} {'#false':>7} {'#true':>7} {'FDP':>7}")
    for method, _, n_false, n_true, fdp in summary:
        print(f"{method:>10} {n_false:>7} {n_true:>7} {fdp:>7}")
    return EXIT_OK


def null_cdf_rows(w):
    """Empirical CDF minus the normal CDF at each sorted sample point."""
    w = np.sort(np.asarray(w, dtype=np.float64))
    ecdf = np.arange(1, w.size + 1) / w.size
    return w, ecdf - normal_cdf(w)


def cmd_diagnose(args):
    config = _load_config(args.config, DiagnoseConfig, {"seed": args.seed})
    out = _out_dir(args.out)
    model = generate_low_rank(config.d1, config.d2, config.rank, config.lambda_min,
                              config.kappa, np.random.SeedSequence(config.seed, spawn_key=(0,)))
    cfg = GdConfig(config.rank)
    try:
        form = config.form.build()
        family = (config.family.resolve((config.d1, config.d2), "two_sided")
                  if config.family is not None else HypothesisSet([form]))
    except ValueError as exc:
        raise UsageError(f"invalid form or family: {exc}") from None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        w = null_statistics(model, [form], config.n, config.sigma_xi,
                            config.noise, config.reps, config.seed, cfg, config.df)[:, 0]
    w = w[np.isfinite(w)]
    if w.size == 0:
        raise UsageError("no testable null statistics were produced")
    t, diff = null_cdf_rows(w)
    _write_rows(out / "null_cdf.csv", NULL_CDF_COLUMNS,
                [(_fmt(a), _fmt(b)) for a, b in zip(t, diff)])
    dep = [(_fmt(z), _fmt(dependence_diagnostic(family, model.U, model.V, z)))
           for z in config.z_grid]
    _write_rows(out / "dependence.csv", DEPENDENCE_COLUMNS, dep)
    _write_rows(out / "moments.csv", MOMENT_COLUMNS,
                [(k, _fmt(moment_diagnostic(w, k))) for k in config.moment_orders])
    ks = float(stats.kstest(w, "norm").statistic)
    with open(out / "diagnose.json", "w") as fh:
        json.dump({"ks": ks, "reps": config.reps, "testable": int(w.size)}, fh, indent=2)
        fh.write("\n")
    _provenance(out, "diagnose", config, config.seed)
    print(f"KS distance to N(0,1): {ks:.4f} over {w.size} statistics")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="mcfdr", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, func, helptext in (
        ("simulate", cmd_simulate, "Monte-Carlo sweep from a scenario config"),
        ("analyze", cmd_analyze, "test adjacent-pair comparisons on a ratings file"),
        ("diagnose", cmd_diagnose, "null distribution, dependence and moment diagnostics"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=default_threads())
        p.add_argument("--alpha", type=float, default=None)
        p.add_argument("--scheme", default=None, help="comma-separated scheme names")
        p.set_defaults(func=func)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.seed is not None and args.seed < 0:
        parser.error("--seed must be non-negative")
    if args.threads < 1:
        parser.error("--threads must be positive")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
