"""Data generators for the three simulation examples and a Monte Carlo harness.

Rows are generated as ``x -> d -> y``: the missing probability given ``x``
has log-odds ``alpha* + x'beta + c(x, gamma, xi)``; observed responses are
drawn from ``f(y | x, xi)`` and missing ones from its exponential tilt
``exp(gamma y - c) f``.  This is the same joint law as drawing ``y`` first
and then ``d`` from the logistic propensity.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from numpy.polynomial.hermite import hermgauss
from numpy.polynomial.legendre import leggauss
from scipy.special import expit
from scipy.stats import norm

from .errors import MnarelError, NonConvergence, DegenerateData
from .model import (
    Dataset, ModelSpec, NormalOutcome, OutcomeModel, Theta, parse_term, t_values,
)
from .rng import parallel_map, stream


# ---------------------------------------------------------------------------
# covariate laws (module level so scenarios pickle)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Example1Covariates:
    """``z ~ U(-1, 1)``, ``u ~ Bernoulli(0.5)``, independent; columns ``(z, u)``."""

    def __call__(self, rng, n):
        z = rng.uniform(-1.0, 1.0, n)
        u = rng.binomial(1, 0.5, n).astype(float)
        return np.column_stack([z, u])

    def quadrature(self, nodes=64):
        zz, wz = leggauss(nodes)
        X = np.vstack([np.column_stack([zz, np.full(nodes, u)]) for u in (0.0, 1.0)])
        return X, np.concatenate([wz / 4.0, wz / 4.0])


@dataclass(frozen=True)
class Example2Covariates:
    """``z ~ N(0, 1)``, ``u ~ N(1, 1)``, independent; columns ``(z, u)``."""

    def __call__(self, rng, n):
        z = rng.normal(0.0, 1.0, n)
        u = rng.normal(1.0, 1.0, n)
        return np.column_stack([z, u])

    def quadrature(self, nodes=64):
        g, w = hermgauss(nodes)
        zz, uu = np.meshgrid(math.sqrt(2) * g, 1.0 + math.sqrt(2) * g, indexing="ij")
        W = np.outer(w, w) / math.pi
        return np.column_stack([zz.ravel(), uu.ravel()]), W.ravel()


@dataclass(frozen=True)
class NormalCovariate:
    """A single ``x ~ N(loc, scale^2)`` column."""

    loc: float = 0.0
    scale: float = 1.0

    def __call__(self, rng, n):
        return rng.normal(self.loc, self.scale, (n, 1))

    def quadrature(self, nodes=64):
        g, w = hermgauss(nodes)
        return (self.loc + math.sqrt(2) * self.scale * g)[:, None], w / math.sqrt(math.pi)


@dataclass(frozen=True)
class IndependentNormals:
    """``k`` independent standard normal columns."""

    k: int = 2

    def __call__(self, rng, n):
        return rng.standard_normal((n, self.k))


# ---------------------------------------------------------------------------
# scenarios
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioSpec:
    """Ground truth for a simulation scenario.

    ``beta`` is indexed by all covariate columns (zeros for excluded ones);
    ``fit_spec`` is the correctly specified model used for estimation.
    """

    name: str
    columns: tuple[str, ...]
    covariate_sampler: Callable
    alpha_star: float
    beta: np.ndarray
    gamma: float
    outcome: OutcomeModel
    xi: np.ndarray
    n: int
    fit_spec: ModelSpec
    sigma2: float | None = None

    @property
    def generating_spec(self) -> ModelSpec:
        return ModelSpec(self.columns, tuple(range(len(self.columns))), self.outcome)

    @property
    def generating_vector(self) -> np.ndarray:
        """``(alpha*, beta, gamma, xi)``: ``t`` under this vector is the log-odds of missingness."""
        return np.concatenate([[self.alpha_star], self.beta, [self.gamma], self.xi])

    def with_n(self, n: int) -> "ScenarioSpec":
        return replace(self, n=int(n))


def parse_sigma2(text) -> float:
    """``"4"`` -> 4.0, ``"e0.7"`` -> exp(0.7)."""
    s = str(text).strip().lower()
    if s.startswith("e^"):
        s = "e" + s[2:]
    if s.startswith("e"):
        return math.exp(float(s[1:]))
    return float(s)


def _example12(example, sigma2, n):
    cols = ("z", "u")
    link = "log" if example == 1 else "identity"
    xi_mean = (0.5, -1.0, 1.5) if example == 1 else (2.5, -1.0, 1.5)
    fit = ModelSpec.normal(cols, ["u"], ["1", "u", "z"], ["1"], mean_link=link, instrument="z")
    sampler = Example1Covariates() if example == 1 else Example2Covariates()
    return ScenarioSpec(
        name=f"Example{example}", columns=cols, covariate_sampler=sampler,
        alpha_star=-1.7, beta=np.array([0.0, -0.4]), gamma=0.5, outcome=fit.outcome,
        xi=np.array([*xi_mean, math.log(sigma2)]), n=n, fit_spec=fit, sigma2=sigma2)


def _example3(sigma2, n):
    cols = ("x",)
    fit = ModelSpec.normal(cols, ["x"], ["1", "x", "x^2"], ["1", "x"])
    return ScenarioSpec(
        name="Example3", columns=cols, covariate_sampler=NormalCovariate(0.0, 1.0),
        alpha_star=-2.7, beta=np.array([-0.4]), gamma=0.5, outcome=fit.outcome,
        xi=np.array([2.0, -1.0, 1.0, math.log(sigma2), 0.5]), n=n, fit_spec=fit, sigma2=sigma2)


def preset(example: int, sigma2=1.0, n: int = 2000) -> ScenarioSpec:
    """Scenario for simulation Example 1, 2 or 3.

    ``sigma2`` is ``1`` or ``4`` for Examples 1-2 and ``1`` or ``"e0.7"``
    for Example 3 (any positive value is accepted).
    """
    s2 = parse_sigma2(sigma2)
    if s2 <= 0:
        raise ValueError("sigma2 must be positive")
    if example in (1, 2):
        return _example12(int(example), s2, int(n))
    if example == 3:
        return _example3(s2, int(n))
    raise ValueError(f"unknown example {example!r}")


def quadratic_scenario(n: int = 1000) -> ScenarioSpec:
    """Quadratic mean and log-linear variance in ``x1``, plus an unused ``x2``.

    ``mu = 1 + x1 + 0.5 x1^2``, ``sigma^2 = exp(0.3 x1)``; ``x2`` affects
    neither the outcome nor the missingness, so any model using it is
    over-parameterised.
    """
    cols = ("x1", "x2")
    fit = ModelSpec.normal(cols, ["x1"], ["1", "x1", "x1^2"], ["1", "x1"])
    return ScenarioSpec(
        name="Quadratic", columns=cols, covariate_sampler=IndependentNormals(2),
        alpha_star=-1.5, beta=np.array([-0.4, 0.0]), gamma=0.3, outcome=fit.outcome,
        xi=np.array([1.0, 1.0, 0.5, 0.0, 0.3]), n=int(n), fit_spec=fit)


def custom_scenario(columns, covariate_sampler, alpha_star, beta, gamma, fit_spec: ModelSpec,
                    xi, n, outcome=None, name="Custom") -> ScenarioSpec:
    outcome = fit_spec.outcome if outcome is None else outcome
    return ScenarioSpec(name, tuple(columns), covariate_sampler, float(alpha_star),
                        np.asarray(beta, float), float(gamma), outcome, np.asarray(xi, float),
                        int(n), fit_spec)


# ---------------------------------------------------------------------------
# generation and ground truth
# ---------------------------------------------------------------------------

def _draw(scenario: ScenarioSpec, rng, n):
    X = scenario.covariate_sampler(rng, n)
    gen = scenario.generating_spec
    pi0 = expit(t_values(scenario.generating_vector, X, gen))
    missing = rng.uniform(size=n) < pi0
    out = scenario.outcome
    if isinstance(out, NormalOutcome):
        y = out.sample_tilted(X, scenario.gamma * missing, scenario.xi, rng)
    else:
        y = np.empty(n)
        y[~missing] = out.sample(X[~missing], scenario.xi, rng)
        y[missing] = out.sample_tilted(X[missing], scenario.gamma, scenario.xi, rng)
    return X, (~missing).astype(np.int8), y


def generate(scenario: ScenarioSpec, seed: int, n: int | None = None, _path=()) -> Dataset:
    """Simulate ``n`` rows (default ``scenario.n``); pre-masking ``y`` kept in ``y_full``."""
    rng = stream(seed, *_path)
    X, d, y = _draw(scenario, rng, scenario.n if n is None else int(n))
    return Dataset(X, d, np.where(d == 1, y, np.nan), scenario.columns, y_full=y)


@dataclass(frozen=True)
class Truth:
    mu: float
    miss: float
    mu_se: float = 0.0
    miss_se: float = 0.0


def true_mu_eta(scenario: ScenarioSpec, draws: int = 10**6, seed: int = 20240501) -> Truth:
    """Monte Carlo ``E[Y]`` and ``pr(D = 0)`` from ``draws`` simulated rows."""
    if draws < 10**5:
        raise ValueError("use at least 1e5 draws")
    rng = stream(seed, 7)
    mus, misses = [], []
    chunk = 250_000
    left = draws
    while left > 0:
        m = min(chunk, left)
        _, d, y = _draw(scenario, rng, m)
        mus.append(y)
        misses.append(1 - d)
        left -= m
    y = np.concatenate(mus)
    miss = np.concatenate(misses).astype(float)
    return Truth(float(y.mean()), float(miss.mean()),
                 float(y.std(ddof=1) / math.sqrt(draws)), float(miss.std(ddof=1) / math.sqrt(draws)))


def population_truth(scenario: ScenarioSpec, nodes: int = 64) -> Truth:
    """``E[Y]`` and ``pr(D = 0)`` by quadrature over ``x`` of closed-form conditionals.

    ``E[Y | x] = m1(x) + pi0(x) (E_tilt[Y | x] - m1(x))`` with ``pi0`` the
    missing probability given ``x``.  Falls back to 2e6 covariate draws when
    the covariate law has no quadrature rule.
    """
    quad = getattr(scenario.covariate_sampler, "quadrature", None)
    if quad is not None:
        X, w = quad(nodes)
    else:
        X = scenario.covariate_sampler(stream(0, 99), 2_000_000)
        w = np.full(X.shape[0], 1.0 / X.shape[0])
    from .model import t_derivatives

    gen = scenario.generating_spec
    t, gt = t_derivatives(scenario.generating_vector, X, gen)
    pi0 = expit(t)
    m1 = scenario.outcome.first_moment(X, scenario.xi)
    ey = m1 + pi0 * (gt[:, 1 + len(scenario.columns)] - m1)
    return Truth(float(w @ ey), float(w @ pi0))


def true_theta(scenario: ScenarioSpec, eta: float | None = None) -> Theta:
    """Truth in the fitting parameterisation: ``alpha = alpha* + log(eta / (1 - eta))``."""
    if eta is None:
        eta = 1.0 - population_truth(scenario).miss
    spec = scenario.fit_spec
    excluded = [j for j in range(len(scenario.columns)) if j not in spec.propensity]
    if np.any(scenario.beta[excluded] != 0):
        raise MnarelError("fit spec drops a covariate with a non-zero propensity coefficient")
    alpha = scenario.alpha_star + math.log(eta / (1.0 - eta))
    return Theta(alpha, scenario.beta[list(spec.propensity)], scenario.gamma, scenario.xi)


def baselines(data: Dataset, truth_y=None) -> dict:
    """Complete-case mean ``ybar_r`` and, if pre-masking responses exist, the full mean."""
    if data.n1 == 0:
        raise DegenerateData("no observed responses")
    full = truth_y if truth_y is not None else data.y_full
    out = {"ybar_r": float(np.mean(data.y[data.observed])), "ybar_full": None}
    if full is not None:
        out["ybar_full"] = float(np.mean(full))
    return out


# ---------------------------------------------------------------------------
# Monte Carlo harness
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MCReport:
    estimator: str
    reps: int
    rb_pct: float
    mse_x100: float
    coverage_pct: float
    failures: int
    seed: int
    truth: float = math.nan
    mean_se: float = math.nan
    sd: float = math.nan

    def as_row(self) -> dict:
        return {k: getattr(self, k) for k in (
            "estimator", "reps", "rb_pct", "mse_x100", "coverage_pct", "failures", "seed",
            "truth", "mean_se", "sd")}


@dataclass(frozen=True)
class MCOptions:
    """Inference settings for :func:`run_mc`.

    ``variance`` is ``"plugin"``, ``"bootstrap"`` or ``None`` (no intervals).
    With ``lr_at_truth`` each replication also records the likelihood ratio
    statistic at the true ``theta``.
    """

    variance: str | None = "plugin"
    B: int = 200
    level: float = 0.95
    multistarts: int = 5
    tol: float = 1e-9
    lr_at_truth: bool = False


def _one_rep(args):
    scenario, seed, rep, opts, theta0 = args
    from .estimation import lr_stat
    from .inference import bootstrap

    data = generate(scenario, seed, _path=(1, rep))
    base = baselines(data)
    rec = {"rep": rep, "failed": False, "ybar_r": base["ybar_r"], "ybar": base["ybar_full"],
           "ybar_r_se": float(np.std(data.y[data.observed], ddof=1) / math.sqrt(data.n1)),
           "ybar_se": float(np.std(data.y_full, ddof=1) / math.sqrt(data.n)),
           "mu_hat": math.nan, "se": math.nan, "plugin_se": math.nan, "gamma_hat": math.nan,
           "gamma_se": math.nan, "lr": math.nan, "boot_failures": 0}
    try:
        fit = _fit(data, scenario.fit_spec, opts, covariance=opts.variance is not None)
    except (NonConvergence, DegenerateData, ArithmeticError, np.linalg.LinAlgError):
        rec["failed"] = True
        return rec
    rec["mu_hat"] = fit.mu_hat
    rec["gamma_hat"] = fit.theta_hat.gamma
    if fit.mu_se is not None:
        rec["plugin_se"] = fit.mu_se
        rec["gamma_se"] = float(fit.theta_se()[1 + scenario.fit_spec.d_beta])
    if theta0 is not None:
        rec["lr"] = lr_stat(theta0, data, scenario.fit_spec, fit)
    if opts.variance == "plugin":
        rec["se"] = rec["plugin_se"]
    elif opts.variance == "bootstrap":
        try:
            bs = bootstrap(data, scenario.fit_spec, opts.B, seed=(seed * 1_000_003 + rep) % 2**63,
                           fit=fit, options={"tol": opts.tol}, workers=1)
            rec["se"] = bs.se_mu
            rec["boot_failures"] = bs.failures
        except MnarelError:
            pass
    return rec


def _fit(data, spec, opts, covariance):
    from .estimation import fit_mle

    return fit_mle(data, spec, multistarts=opts.multistarts, tol=opts.tol, covariance=covariance)


def _summarise(name, est, se, truth, level, seed, failures, reps):
    ok = np.isfinite(est)
    est = est[ok]
    if est.size == 0:
        return MCReport(name, reps, math.nan, math.nan, math.nan, failures, seed, truth)
    err = est - truth
    cov = math.nan
    mean_se = math.nan
    if se is not None:
        se = se[ok]
        good = np.isfinite(se)
        if good.any():
            z = norm.ppf(0.5 + level / 2)
            hit = np.abs(err[good]) <= z * se[good]
            cov = 100.0 * float(hit.mean())
            mean_se = float(se[good].mean())
    return MCReport(name, reps, 100.0 * float(err.mean()) / truth, 100.0 * float(np.mean(err**2)),
                    cov, failures, seed, truth, mean_se, float(est.std(ddof=1)) if est.size > 1 else 0.0)


def run_mc(scenario: ScenarioSpec, reps: int, seed: int, options: MCOptions | None = None,
           truth: float | None = None, workers: int | None = None, full_output: bool = False):
    """Monte Carlo study of ``mu_hat`` for ``scenario``.

    Returns the :class:`MCReport` of the proposed estimator; with
    ``full_output=True`` returns ``(report, reports, records)`` where
    ``reports`` also covers ``ybar_r`` and ``ybar`` and ``records`` holds one
    dict per replication.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    opts = options or MCOptions()
    mu0 = population_truth(scenario).mu if truth is None else float(truth)
    theta0 = true_theta(scenario).to_vector() if opts.lr_at_truth else None
    records = parallel_map(_one_rep, [(scenario, seed, r, opts, theta0) for r in range(reps)],
                           workers)
    records.sort(key=lambda r: r["rep"])
    failed = sum(r["failed"] for r in records)
    if failed > reps / 2:
        raise NonConvergence(f"{failed} of {reps} replications failed")

    def col(key):
        return np.array([r[key] if r[key] is not None else math.nan for r in records], float)

    has_ci = opts.variance is not None
    mu_rep = _summarise("mu_hat", col("mu_hat"), col("se") if has_ci else None, mu0,
                        opts.level, seed, failed, reps)
    yr = _summarise("ybar_r", col("ybar_r"), col("ybar_r_se") if has_ci else None, mu0,
                    opts.level, seed, 0, reps)
    yf = _summarise("ybar", col("ybar"), col("ybar_se") if has_ci else None, mu0,
                    opts.level, seed, 0, reps)
    if full_output:
        return mu_rep, [mu_rep, yr, yf], records
    return mu_rep
