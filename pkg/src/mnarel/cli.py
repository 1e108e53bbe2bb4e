"""Command-line interface: ``mnarel {fit,bootstrap,compare,ident,generate,simulate}``.

Exit codes: 0 success, 2 parse/spec error, 3 non-convergence, 4 model not
identifiable (override with ``--force``).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import io
from .errors import BootstrapFailure, DegenerateData, MnarelError, NonConvergence, SpecError
from .estimation import bic, fit_mle
from .identifiability import IDENTIFIABLE, check
from .inference import WALD_BOOTSTRAP, bootstrap, wald_ci_mu, wald_ci_theta
from .simulation import MCOptions, generate, population_truth, preset, run_mc

EXIT_OK, EXIT_PARSE, EXIT_NONCONV, EXIT_IDENT = 0, 2, 3, 4
REPORT_VERSION = 1

log = logging.getLogger("mnarel")


class UsageError(SpecError):
    pass


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def _emit(args, payload: dict, rows: list[dict]):
    """Write ``payload`` (json) or ``rows`` (csv/table) to ``--out`` or stdout."""
    if args.format == "json":
        text = io.to_json(payload)
    elif args.format == "csv":
        text = io.rows_to_csv(rows)
    else:
        text = io.rows_to_table(rows)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
        sys.stdout.flush()


def _load(args):
    if not args.data or not args.model_spec:
        raise UsageError("--data and --model-spec are required")
    cfg = io.load_config(args.model_spec)
    data = io.read_csv(args.data, response=cfg.get("response", "y"),
                       covariates=cfg.get("covariates"), recode=cfg.get("recode"))
    spec = io.build_spec(cfg, data.columns, instrument=args.instrument)
    return cfg, data, spec


def _require_seed(args):
    if args.seed is None:
        raise UsageError("--seed is required for resampling and simulation")


def theta_names(spec) -> list[str]:
    names = ["alpha"] + [f"beta[{spec.columns[j]}]" for j in spec.propensity] + ["gamma"]
    names += [f"xi_mean[{t}]" for t in spec.mean_text]
    names += [f"xi_logvar[{t}]" for t in spec.logvar_text]
    return names


def _interval(ci) -> dict:
    return {"estimate": ci.estimate, "se": ci.se, "lower": ci.lower, "upper": ci.upper,
            "level": ci.level, "method": ci.method, "bootstrap_failures": ci.bootstrap_failures}


def fit_report(data, spec, fit, level=0.95, boot=None, verdict=None) -> dict:
    """Schema-stable report for one fit."""
    names = theta_names(spec)
    se = fit.theta_se()
    params = []
    for j, name in enumerate(names):
        row = {"name": name, "estimate": float(fit.theta_vector[j]),
               "se": None if se is None else float(se[j]), "lower": None, "upper": None}
        if fit.theta_cov is not None and fit.theta_cov[j, j] > 0:
            ci = wald_ci_theta(fit, j, level)
            row["lower"], row["upper"] = ci.lower, ci.upper
        if boot is not None:
            row["bootstrap_se"] = float(boot.se_theta[j])
        params.append(row)
    intervals = {}
    if fit.mu_se is not None:
        intervals["plugin"] = _interval(wald_ci_mu(fit, level))
    if boot is not None:
        intervals["bootstrap"] = _interval(wald_ci_mu(fit, level, WALD_BOOTSTRAP, boot))
    return {
        "report_version": REPORT_VERSION,
        "n": data.n, "n_observed": data.n1, "n_missing": data.n2,
        "parameters": params,
        "alpha_star": fit.alpha_star,
        "eta_hat": fit.eta_hat,
        "lambda_hat": fit.lambda_hat,
        "mu_hat": fit.mu_hat,
        "sigma2_hat": fit.sigma2,
        "mu_intervals": intervals,
        "ell1": fit.ell1, "ell2": fit.ell2, "loglik": fit.loglik, "bic": bic(fit, data),
        "convergence": {"converged": fit.converged, "iterations": fit.iterations,
                        "grad_norm": fit.grad_norm, "multistart_index": fit.multistart_index,
                        "singular_vhat": fit.singular_vhat},
        "identifiability": None if verdict is None else verdict.as_dict(),
    }


def _fit_rows(report) -> list[dict]:
    rows = [{"quantity": p["name"], "estimate": p["estimate"], "se": p["se"],
             "lower": p["lower"], "upper": p["upper"]} for p in report["parameters"]]
    rows.append({"quantity": "alpha_star", "estimate": report["alpha_star"], "se": None,
                 "lower": None, "upper": None})
    rows.append({"quantity": "eta", "estimate": report["eta_hat"], "se": None,
                 "lower": None, "upper": None})
    for key, ci in report["mu_intervals"].items():
        rows.append({"quantity": f"mu ({key})", "estimate": ci["estimate"], "se": ci["se"],
                     "lower": ci["lower"], "upper": ci["upper"]})
    if not report["mu_intervals"]:
        rows.append({"quantity": "mu", "estimate": report["mu_hat"], "se": None,
                     "lower": None, "upper": None})
    for key in ("sigma2_hat", "ell1", "ell2", "bic"):
        rows.append({"quantity": key, "estimate": report[key], "se": None,
                     "lower": None, "upper": None})
    return rows


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_fit(args) -> int:
    _, data, spec = _load(args)
    verdict = check(spec, sample_points=data.x)
    if verdict.status != IDENTIFIABLE:
        msg = f"identifiability: {verdict.status} ({verdict.rule}): {verdict.explanation}"
        if not args.force:
            print(msg + "; rerun with --force to fit anyway", file=sys.stderr)
            return EXIT_IDENT
        log.warning(msg)
    if args.boot:
        _require_seed(args)
    fit = fit_mle(data, spec)
    boot = None
    if args.boot:
        boot = bootstrap(data, spec, args.boot, seed=args.seed, fit=fit)
    report = fit_report(data, spec, fit, args.level, boot, verdict)
    _emit(args, report, _fit_rows(report))
    return EXIT_OK


def cmd_bootstrap(args) -> int:
    _require_seed(args)
    _, data, spec = _load(args)
    fit = fit_mle(data, spec)
    boot = bootstrap(data, spec, args.boot or 200, seed=args.seed, fit=fit)
    ci = wald_ci_mu(fit, args.level, WALD_BOOTSTRAP, boot)
    names = theta_names(spec)
    payload = {"report_version": REPORT_VERSION, "B": boot.B, "seed": args.seed,
               "failures": boot.failures, "se_mu": boot.se_mu,
               "se_theta": dict(zip(names, map(float, boot.se_theta))),
               "mu_interval": _interval(ci)}
    rows = [{"quantity": "mu", "estimate": fit.mu_hat, "bootstrap_se": boot.se_mu}]
    rows += [{"quantity": nm, "estimate": float(v), "bootstrap_se": float(s)}
             for nm, v, s in zip(names, fit.theta_vector, boot.se_theta)]
    _emit(args, payload, rows)
    return EXIT_OK


def cmd_compare(args) -> int:
    if not args.data or not args.model_spec:
        raise UsageError("--data and at least one --model-spec are required")
    rows = []
    for path in args.model_spec:
        cfg = io.load_config(path)
        data = io.read_csv(args.data, response=cfg.get("response", "y"),
                           covariates=cfg.get("covariates"), recode=cfg.get("recode"))
        spec = io.build_spec(cfg, data.columns, instrument=args.instrument)
        fit = fit_mle(data, spec, covariance=False)
        rows.append({"model": str(path), "dim_theta": spec.dim, "loglik": fit.loglik,
                     "bic": bic(fit, data), "mu_hat": fit.mu_hat})
    best = min(range(len(rows)), key=lambda i: rows[i]["bic"])
    for i, r in enumerate(rows):
        r["selected"] = i == best
    _emit(args, {"report_version": REPORT_VERSION, "models": rows, "selected": rows[best]["model"]},
          rows)
    return EXIT_OK


def _scenario(args):
    if args.example is None:
        raise UsageError("--example is required")
    return preset(args.example, args.sigma2, args.n)


def cmd_ident(args) -> int:
    if args.example is not None:
        spec = _scenario(args).fit_spec
        if args.instrument:
            spec = io.build_spec(io.spec_config(spec), spec.columns, instrument=args.instrument)
        sample = None
    else:
        if not args.model_spec:
            raise UsageError("--model-spec or --example is required")
        cfg = io.load_config(args.model_spec[0] if isinstance(args.model_spec, list)
                             else args.model_spec)
        sample = None
        if args.data:
            data = io.read_csv(args.data, response=cfg.get("response", "y"),
                               covariates=cfg.get("covariates"), recode=cfg.get("recode"))
            columns, sample = data.columns, data.x
        elif cfg.get("covariates"):
            columns = tuple(cfg["covariates"])
        else:
            raise UsageError("declare 'covariates' in the model spec or pass --data")
        spec = io.build_spec(cfg, columns, instrument=args.instrument)
    verdict = check(spec, sample_points=sample)
    _emit(args, {"report_version": REPORT_VERSION, **verdict.as_dict()}, [verdict.as_dict()])
    return EXIT_OK


def cmd_generate(args) -> int:
    _require_seed(args)
    if not args.out:
        raise UsageError("--out is required for generate")
    sc = _scenario(args)
    data = generate(sc, args.seed)
    io.write_csv(data, args.out)
    if args.spec_out:
        Path(args.spec_out).write_text(io.to_json(io.spec_config(sc.fit_spec)))
    return EXIT_OK


def cmd_simulate(args) -> int:
    _require_seed(args)
    sc = _scenario(args)
    opts = MCOptions(variance="bootstrap" if args.boot else "plugin", B=args.boot or 200,
                     level=args.level)
    truth = population_truth(sc)
    try:
        _, reports, _ = run_mc(sc, args.reps, args.seed, opts, truth=truth.mu, full_output=True)
    except NonConvergence as exc:
        print(f"simulation failed: {exc}", file=sys.stderr)
        return EXIT_NONCONV
    rows = []
    for r in reports:
        row = {"example": args.example, "sigma2": str(args.sigma2), "n": sc.n, **r.as_row()}
        rows.append(row)
    payload = {"report_version": REPORT_VERSION, "scenario": sc.name, "sigma2": str(args.sigma2),
               "n": sc.n, "reps": args.reps, "seed": args.seed, "level": args.level,
               "variance": opts.variance, "true_mu": truth.mu, "true_missing_rate": truth.miss,
               "estimators": rows}
    _emit(args, payload, rows)
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "bootstrap": cmd_bootstrap, "compare": cmd_compare,
            "ident": cmd_ident, "generate": cmd_generate, "simulate": cmd_simulate}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--data", help="CSV with a header row; empty or NA response = missing")
    common.add_argument("--example", type=int, choices=(1, 2, 3), help="simulation preset")
    common.add_argument("--sigma2", default="1", help="preset variance, e.g. 1, 4 or e0.7")
    common.add_argument("--n", type=int, default=2000, help="sample size for presets")
    common.add_argument("--reps", type=int, default=500, help="Monte Carlo replications")
    common.add_argument("--boot", type=int, default=0, metavar="B", help="bootstrap resamples")
    common.add_argument("--level", type=float, default=0.95, help="confidence level")
    common.add_argument("--seed", type=int, help="random seed (required when resampling)")
    common.add_argument("--out", help="output file (default: standard output)")
    common.add_argument("--format", choices=("json", "csv", "table"), default="table")
    common.add_argument("--force", action="store_true",
                        help="fit even when identifiability is not established")
    common.add_argument("--instrument", metavar="COLUMN", help="declare an instrument column")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mnarel", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in [("fit", "fit a model to a CSV dataset"),
                           ("bootstrap", "bootstrap standard errors for a fit"),
                           ("ident", "identifiability verdict for a model spec"),
                           ("generate", "write a simulated preset dataset to CSV"),
                           ("simulate", "Monte Carlo study of a preset")]:
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--model-spec", help="JSON or YAML model spec")
        if name == "generate":
            p.add_argument("--spec-out", help="also write the preset's model spec here")
    p = sub.add_parser("compare", parents=[common], help="compare model specs by BIC")
    p.add_argument("--model-spec", action="append", help="repeat for each candidate model")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_PARSE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.level is not None and not 0.0 < args.level < 1.0:
        print("error: --level must lie in (0, 1)", file=sys.stderr)
        return EXIT_PARSE
    try:
        return COMMANDS[args.command](args)
    except (SpecError, DegenerateData, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (NonConvergence, BootstrapFailure) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONV
    except MnarelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
