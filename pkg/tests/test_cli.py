import json

import numpy as np
import pytest
from scipy import stats

from mcfdr.cli import (
    DECISION_COLUMNS,
    DEPENDENCE_COLUMNS,
    MOMENT_COLUMNS,
    NULL_CDF_COLUMNS,
    SUMMARY_COLUMNS,
    main,
    read_output,
)
from mcfdr.simulation import MetricsTable

SIM = {
    "d1": 20, "d2": 20, "rank": 2, "lambda_min": 20, "n": 1200, "sigma_xi": 0.5,
    "family": {"kind": "submatrix", "row_range": [0, 4], "col_range": [0, 4]},
    "signal_prob": 0.3, "signals": [10.0], "reps": 2, "seed": 1, "roc": True,
    "schemes": ["multiply", "none_bhq"],
}
DIAG = {
    "d1": 20, "d2": 20, "rank": 2, "lambda_min": 20, "n": 800, "sigma_xi": 0.5,
    "reps": 30, "seed": 2,
    "family": {"kind": "row_comparison", "rows": [0], "col_range": [0, 5]},
}


def dump(tmp_path, name, obj):
    path = tmp_path / name
    path.write_text(json.dumps(obj))
    return str(path)


def header(path):
    return path.read_text().splitlines()[0]


@pytest.fixture
def ratings(tmp_path):
    rng = np.random.default_rng(0)
    u, v = rng.standard_normal((30, 2)), rng.standard_normal((25, 2))
    full = u @ v.T
    lines = []
    for i in range(30):
        for j in range(25):
            if rng.random() < 0.6:
                lines.append(f"{i}\t{j}\t{np.clip(round(3 + full[i, j]), 1, 5)}")
    path = tmp_path / "r.tsv"
    path.write_text("\n".join(lines) + "\n")
    return str(path)


class TestSimulate:
    def test_outputs(self, tmp_path):
        out = tmp_path / "o"
        assert main(["simulate", "--config", dump(tmp_path, "c.json", SIM),
                     "--out", str(out), "--threads", "1"]) == 0
        assert header(out / "metrics.csv") == ",".join(MetricsTable.METRIC_COLUMNS)
        assert header(out / "roc.csv") == ",".join(MetricsTable.ROC_COLUMNS)
        m = read_output(out / "metrics.csv")
        assert list(m["scheme"]) == ["multiply", "none_bhq"]
        assert np.all((m["mean_fdp"] >= 0) & (m["mean_fdp"] <= 1))
        run = json.loads((out / "run.json").read_text())
        assert run["command"] == "simulate" and run["seed"] == 1 and run["version"]

    def test_run_json_reproduces(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["simulate", "--config", dump(tmp_path, "c.json", SIM),
                     "--out", str(a), "--threads", "1", "--seed", "7", "--alpha", "0.2"]) == 0
        config = json.loads((a / "run.json").read_text())["config"]
        assert config["seed"] == 7 and config["alpha"] == 0.2
        assert main(["simulate", "--config", dump(tmp_path, "r.json", config),
                     "--out", str(b), "--threads", "1"]) == 0
        for name in ("metrics.csv", "roc.csv"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_scheme_flag(self, tmp_path):
        out = tmp_path / "o"
        assert main(["simulate", "--config", dump(tmp_path, "c.json", SIM), "--out", str(out),
                     "--threads", "1", "--scheme", "min_abs"]) == 0
        assert list(read_output(out / "metrics.csv")["scheme"]) == ["min_abs"]

    @pytest.mark.parametrize("bad", [
        {**SIM, "colour": 1}, {**SIM, "reps": 0}, {**SIM, "schemes": ["knockoff"]},
    ])
    def test_invalid_schema(self, tmp_path, bad, capsys):
        assert main(["simulate", "--config", dump(tmp_path, "c.json", bad),
                     "--out", str(tmp_path)]) == 2
        assert "invalid config" in capsys.readouterr().err

    def test_missing_and_malformed_config(self, tmp_path):
        assert main(["simulate", "--config", str(tmp_path / "none.json")]) == 2
        path = tmp_path / "x.json"
        path.write_text("{not json")
        assert main(["simulate", "--config", str(path)]) == 2

    def test_usage_errors_exit_2(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["simulate"])
        assert exc.value.code == 2
        with pytest.raises(SystemExit) as exc:
            main(["simulate", "--config", "c.json", "--threads", "0"])
        assert exc.value.code == 2


class TestAnalyze:
    def config(self, tmp_path, data, **kw):
        return dump(tmp_path, "a.json", {"data": data, "rank": 2, "family": {"max_q": 40}, **kw})

    @pytest.mark.parametrize("scheme", ["multiply", "none_bhq", "whitened"])
    def test_end_to_end(self, tmp_path, ratings, scheme):
        out = tmp_path / "o"
        assert main(["analyze", "--config", self.config(tmp_path, ratings),
                     "--out", str(out), "--scheme", scheme]) == 0
        assert header(out / "decisions.csv") == ",".join(DECISION_COLUMNS)
        assert header(out / "summary.csv") == ",".join(SUMMARY_COLUMNS)
        d = read_output(out / "decisions.csv")
        s = read_output(out / "summary.csv")
        assert d["form_id"].size == 40
        assert s["rejections"][0] == d["rejected"].sum() == s["false"][0] + s["true"][0]

    def test_empty_family(self, tmp_path):
        data = tmp_path / "e.tsv"
        data.write_text("a\tx\t1\nb\ty\t2\n")
        out = tmp_path / "o"
        assert main(["analyze", "--config", self.config(tmp_path, str(data)), "--out", str(out)]) == 0
        assert (out / "decisions.csv").read_text().splitlines() == [",".join(DECISION_COLUMNS)]

    def test_missing_data(self, tmp_path):
        assert main(["analyze", "--config", self.config(tmp_path, str(tmp_path / "none.tsv")),
                     "--out", str(tmp_path)]) == 2

    def test_malformed_data(self, tmp_path):
        data = tmp_path / "bad.tsv"
        data.write_text("a\tx\n")
        assert main(["analyze", "--config", self.config(tmp_path, str(data)),
                     "--out", str(tmp_path)]) == 2

    def test_single_scheme_only(self, tmp_path, ratings):
        assert main(["analyze", "--config", self.config(tmp_path, ratings),
                     "--scheme", "multiply,min_abs"]) == 2

    def test_runtime_failure_exit_3(self, tmp_path, ratings):
        # rank above the matrix dimensions passes the schema but fails in estimation
        assert main(["analyze", "--config", self.config(tmp_path, ratings, rank=100),
                     "--out", str(tmp_path / "o")]) == 3


class TestDiagnose:
    def test_outputs_and_ks(self, tmp_path):
        out = tmp_path / "o"
        assert main(["diagnose", "--config", dump(tmp_path, "d.json", DIAG), "--out", str(out)]) == 0
        assert header(out / "null_cdf.csv") == ",".join(NULL_CDF_COLUMNS)
        assert header(out / "dependence.csv") == ",".join(DEPENDENCE_COLUMNS)
        assert header(out / "moments.csv") == ",".join(MOMENT_COLUMNS)
        cdf = read_output(out / "null_cdf.csv")
        t = cdf["t"]
        assert np.all(np.diff(t) >= 0)
        # KS distance recomputed from the written sample
        ks = stats.kstest(t, "norm").statistic
        assert json.loads((out / "diagnose.json").read_text())["ks"] == pytest.approx(ks, abs=1e-15)
        # the largest gap of the right-continuous ECDF is at a sample point or just before it
        gap = np.max(np.maximum(np.abs(cdf["ecdf_minus_normal"]),
                                np.abs(cdf["ecdf_minus_normal"] - 1 / t.size)))
        assert gap == pytest.approx(ks, abs=1e-12)
        dep = read_output(out / "dependence.csv")
        assert np.all(np.diff(dep["rho_star"]) <= 0)
        assert list(read_output(out / "moments.csv")["k"]) == [2.0, 3.0]

    def test_invalid_form(self, tmp_path):
        bad = {**DIAG, "form": {"rows": [0], "cols": [0], "coefs": [0.0]}}
        assert main(["diagnose", "--config", dump(tmp_path, "d.json", bad),
                     "--out", str(tmp_path)]) == 2

    def test_empty_sample(self, tmp_path, monkeypatch):
        monkeypatch.setattr("mcfdr.cli.null_statistics",
                            lambda model, forms, n, sd, noise, reps, *a, **k: np.full((reps, 1), np.nan))
        assert main(["diagnose", "--config", dump(tmp_path, "d.json", DIAG),
                     "--out", str(tmp_path)]) == 2
