import json
import math
import subprocess
import sys

import numpy as np
import pytest

from mnarel import io
from mnarel.cli import EXIT_IDENT, EXIT_OK, EXIT_PARSE, main, theta_names
from mnarel.errors import SpecError
from mnarel.estimation import fit_mle
from mnarel.simulation import generate, preset


@pytest.fixture(scope="module")
def ex2_files(tmp_path_factory):
    d = tmp_path_factory.mktemp("ex2")
    csv_path, spec_path = d / "ex2.csv", d / "ex2.json"
    code = main(["generate", "--example", "2", "--n", "2000", "--seed", "7",
                 "--out", str(csv_path), "--spec-out", str(spec_path)])
    assert code == EXIT_OK
    return csv_path, spec_path


@pytest.fixture(scope="module")
def ex2_report(ex2_files, tmp_path_factory):
    csv_path, spec_path = ex2_files
    out = tmp_path_factory.mktemp("rep") / "fit.json"
    code = main(["fit", "--data", str(csv_path), "--model-spec", str(spec_path),
                 "--format", "json", "--out", str(out)])
    assert code == EXIT_OK
    return json.loads(out.read_text()), out.read_text()


def run(args, capsys):
    code = main(args)
    cap = capsys.readouterr()
    return code, cap.out, cap.err


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def test_round_trip_bit_equal(ex2_files, ex2_report):
    sc = preset(2, 1, 2000)
    direct = fit_mle(generate(sc, 7), sc.fit_spec)
    report, _ = ex2_report
    est = np.array([p["estimate"] for p in report["parameters"]])
    assert np.array_equal(est, direct.theta_vector)
    assert report["mu_hat"] == direct.mu_hat
    reread = io.read_csv(ex2_files[0])
    assert np.array_equal(reread.x, generate(sc, 7).x)


def test_fit_report_gamma(ex2_report):
    report, _ = ex2_report
    gamma = next(p for p in report["parameters"] if p["name"] == "gamma")
    assert abs(gamma["estimate"] - 0.5) < 3 * gamma["se"]
    assert gamma["lower"] < gamma["estimate"] < gamma["upper"]


def test_fit_report_schema(ex2_report):
    report, text = ex2_report
    assert list(report) == [
        "report_version", "n", "n_observed", "n_missing", "parameters", "alpha_star", "eta_hat",
        "lambda_hat", "mu_hat", "sigma2_hat", "mu_intervals", "ell1", "ell2", "loglik", "bic",
        "convergence", "identifiability"]
    assert [p["name"] for p in report["parameters"]] == [
        "alpha", "beta[u]", "gamma", "xi_mean[1]", "xi_mean[u]", "xi_mean[z]", "xi_logvar[1]"]
    assert report["identifiability"]["rule"] == "InstrumentVariable"
    assert report["eta_hat"] == report["n_observed"] / report["n"]
    assert report["alpha_star"] == pytest.approx(
        report["parameters"][0]["estimate"] + math.log((1 - report["eta_hat"]) / report["eta_hat"]))
    assert "plugin" in report["mu_intervals"]
    # 17 significant digits for machine formats
    assert f'"mu_hat": {io.fmt(report["mu_hat"])}' in text
    assert len(io.fmt(report["mu_hat"]).replace("-", "").replace(".", "").lstrip("0")) >= 15


def test_fit_table_and_csv(ex2_files, capsys):
    csv_path, spec_path = ex2_files
    code, out, _ = run(["fit", "--data", str(csv_path), "--model-spec", str(spec_path)], capsys)
    assert code == EXIT_OK and "gamma" in out and "alpha_star" in out
    code, out, _ = run(["fit", "--data", str(csv_path), "--model-spec", str(spec_path),
                        "--format", "csv"], capsys)
    assert out.splitlines()[0] == "quantity,estimate,se,lower,upper"


def test_fit_with_bootstrap(ex2_files, capsys):
    csv_path, spec_path = ex2_files
    code, out, _ = run(["fit", "--data", str(csv_path), "--model-spec", str(spec_path),
                        "--boot", "50", "--seed", "3", "--format", "json"], capsys)
    assert code == EXIT_OK
    rep = json.loads(out)
    assert rep["mu_intervals"]["bootstrap"]["method"] == "WaldBootstrap"
    assert all("bootstrap_se" in p for p in rep["parameters"])


def test_bootstrap_command(ex2_files, capsys):
    csv_path, spec_path = ex2_files
    code, out, _ = run(["bootstrap", "--data", str(csv_path), "--model-spec", str(spec_path),
                        "--boot", "50", "--seed", "3", "--format", "json"], capsys)
    assert code == EXIT_OK
    assert json.loads(out)["B"] == 50


def test_malformed_csv(tmp_path, ex2_files, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("z,u,w\n0.1,1,2\n")
    code, _, err = run(["fit", "--data", str(bad), "--model-spec", str(ex2_files[1])], capsys)
    assert code == EXIT_PARSE
    assert ":1:" in err and "'y'" in err
    bad.write_text("z,u,y\n0.1,1,2\n0.3,abc,\n")
    code, _, err = run(["fit", "--data", str(bad), "--model-spec", str(ex2_files[1])], capsys)
    assert code == EXIT_PARSE and ":3:" in err


def test_quadratic_log_linear_spec(tmp_path, capsys):
    sc = preset(3, 1, 1000)
    data = generate(sc, 8)
    csv_path = tmp_path / "d.csv"
    io.write_csv(data, csv_path)
    spec_path = tmp_path / "m.yaml"
    spec_path.write_text("response: y\npropensity: [x]\nmean: ['1', x, x^2]\nlogvar: ['1', x]\n")
    code, out, _ = run(["fit", "--data", str(csv_path), "--model-spec", str(spec_path),
                        "--format", "json"], capsys)
    assert code == EXIT_OK
    rep = json.loads(out)
    assert rep["identifiability"]["rule"] == "NormalCaseI"
    assert rep["convergence"]["converged"]


def test_identifiability_gate(tmp_path, capsys):
    rng = np.random.default_rng(0)
    x = rng.normal(size=300)
    y = np.where(rng.uniform(size=300) < 0.7, 1 + x + rng.normal(size=300), np.nan)
    csv_path = tmp_path / "d.csv"
    csv_path.write_text("x,y\n" + "".join(
        f"{float(a)!r},{'' if math.isnan(b) else repr(float(b))}\n" for a, b in zip(x, y)))
    spec_path = tmp_path / "m.json"
    spec_path.write_text(json.dumps({"propensity": ["x"], "mean": ["1", "x"], "logvar": ["1"]}))
    code, _, err = run(["fit", "--data", str(csv_path), "--model-spec", str(spec_path)], capsys)
    assert code == EXIT_IDENT and "NotIdentifiable" in err
    code, _, _ = run(["fit", "--data", str(csv_path), "--model-spec", str(spec_path),
                      "--force"], capsys)
    assert code != EXIT_IDENT


def test_seed_required(ex2_files, capsys):
    csv_path, spec_path = ex2_files
    assert run(["simulate", "--example", "1", "--reps", "2"], capsys)[0] == EXIT_PARSE
    assert run(["fit", "--data", str(csv_path), "--model-spec", str(spec_path),
                "--boot", "50"], capsys)[0] == EXIT_PARSE
    assert run(["bootstrap", "--data", str(csv_path), "--model-spec", str(spec_path)],
               capsys)[0] == EXIT_PARSE
    assert run(["generate", "--example", "1", "--out", "x.csv"], capsys)[0] == EXIT_PARSE


def test_bad_arguments(capsys):
    assert run(["fit", "--level", "1.5", "--data", "a", "--model-spec", "b"], capsys)[0] == EXIT_PARSE
    assert run(["nonsense"], capsys)[0] == EXIT_PARSE
    assert run(["simulate", "--example", "7", "--seed", "1"], capsys)[0] == EXIT_PARSE


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def test_simulate_byte_identical(tmp_path, capsys):
    outs = []
    for k in range(2):
        out = tmp_path / f"sim{k}.csv"
        code = main(["simulate", "--example", "1", "--sigma2", "1", "--n", "300", "--reps", "4",
                     "--seed", "1", "--format", "csv", "--out", str(out)])
        assert code == EXIT_OK
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    header = outs[0].decode().splitlines()[0].split(",")
    assert {"estimator", "rb_pct", "mse_x100", "coverage_pct"} <= set(header)
    assert [line.split(",")[header.index("estimator")]
            for line in outs[0].decode().splitlines()[1:]] == ["mu_hat", "ybar_r", "ybar"]


def test_simulate_e07(capsys):
    code, out, _ = run(["simulate", "--example", "3", "--sigma2", "e0.7", "--n", "300",
                        "--reps", "2", "--seed", "2", "--format", "json"], capsys)
    assert code == EXIT_OK
    rep = json.loads(out)
    assert rep["sigma2"] == "e0.7" and rep["scenario"] == "Example3"


# ---------------------------------------------------------------------------
# ident and compare
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("args,status,rule", [
    (["--example", "3"], "Identifiable", "NormalCaseI"),
    (["--example", "1", "--instrument", "z"], "Identifiable", "InstrumentVariable"),
])
def test_ident_examples(args, status, rule, capsys):
    code, out, _ = run(["ident", *args, "--format", "json"], capsys)
    assert code == EXIT_OK
    v = json.loads(out)
    assert (v["status"], v["rule"]) == (status, rule)


def test_ident_linear_constant(tmp_path, capsys):
    spec_path = tmp_path / "m.yaml"
    spec_path.write_text("covariates: [x]\npropensity: [x]\nmean: ['1', x]\nlogvar: ['1']\n")
    code, out, _ = run(["ident", "--model-spec", str(spec_path), "--format", "json"], capsys)
    assert code == EXIT_OK
    v = json.loads(out)
    assert (v["status"], v["rule"]) == ("NotIdentifiable", "NormalCaseII")


def test_ident_spec_error(tmp_path, capsys):
    spec_path = tmp_path / "m.yaml"
    spec_path.write_text("covariates: [x]\npropensity: [w]\nmean: ['1', x]\nlogvar: ['1']\n")
    assert run(["ident", "--model-spec", str(spec_path)], capsys)[0] == EXIT_PARSE
    spec_path.write_text("covariates: [x]\npropensity: [x]\nmean: ['1', q^2]\nlogvar: ['1']\n")
    assert run(["ident", "--model-spec", str(spec_path)], capsys)[0] == EXIT_PARSE


def test_compare(ex2_files, tmp_path, capsys):
    csv_path, spec_path = ex2_files
    big = tmp_path / "big.json"
    cfg = json.loads(spec_path.read_text())
    cfg["mean"] = cfg["mean"] + ["u*z", "z^2"]
    big.write_text(json.dumps(cfg))
    code, out, _ = run(["compare", "--data", str(csv_path), "--model-spec", str(spec_path),
                        "--model-spec", str(big), "--format", "json"], capsys)
    assert code == EXIT_OK
    rep = json.loads(out)
    assert rep["selected"] == str(spec_path)
    assert [m["selected"] for m in rep["models"]] == [True, False]


# ---------------------------------------------------------------------------
# io details
# ---------------------------------------------------------------------------

def test_na_tokens_and_recode(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("edu,y\n1,2.5\n99,NA\n3,\n2,1\n")
    data = io.read_csv(p, recode={"edu": {"99": 6}})
    assert np.array_equal(data.x[:, 0], [1, 6, 3, 2])
    assert np.array_equal(data.d, [1, 0, 0, 1])
    out = tmp_path / "o.csv"
    io.write_csv(data, out)
    assert out.read_text().splitlines()[2] == "6,"


def test_missing_covariate_value(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("x,y\n1,2\n,3\n")
    with pytest.raises(SpecError, match=":3:"):
        io.read_csv(p)


def test_spec_files(tmp_path):
    p = tmp_path / "s.json"
    p.write_text('{"propensity": ["x"], "mean": ["1"], "logvar": ["1"], "colour": 1}')
    with pytest.raises(SpecError, match="unknown"):
        io.load_config(p)
    p.write_text('{"propensity": ["x"],\n "mean": ["1"]\n "logvar": ["1"]}')
    with pytest.raises(SpecError, match=":3:"):
        io.load_config(p)
    p.write_text('{"propensity": ["x"], "mean": ["1"], "logvar": ["1"], "family": "gamma"}')
    with pytest.raises(SpecError):
        io.build_spec(io.load_config(p), ("x",))
    spec = preset(1).fit_spec
    again = io.build_spec(io.spec_config(spec), spec.columns)
    assert theta_names(again) == theta_names(spec)
    assert again.outcome.mean_link == "log" and again.instrument == "z"


def test_fmt_round_trip():
    rng = np.random.default_rng(0)
    for v in rng.normal(size=100) * 10.0 ** rng.integers(-20, 20, 100):
        assert float(io.fmt(v)) == v
    assert io.to_json({"a": math.inf, "b": math.nan}).count("null") == 2


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "mnarel", "ident", "--example", "3",
                          "--format", "json"], capture_output=True, text=True, timeout=120)
    assert res.returncode == 0
    assert json.loads(res.stdout)["rule"] == "NormalCaseI"
