"""Wald intervals, the empirical likelihood ratio test and the bootstrap."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import (
    BootstrapFailure, DegenerateData, MnarelError, NonConvergence, SingularVhat,
)
from .estimation import FitResult, fit_mle, lr_stat
from .model import Dataset, ModelSpec, Theta
from .rng import parallel_map, stream, worker_count

MIN_BOOT = 50
WALD_PLUGIN = "WaldPlugin"
WALD_BOOTSTRAP = "WaldBootstrap"


def normal_critical(level: float) -> float:
    """Two-sided standard normal critical value ``z_{(1+level)/2}``."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    return float(stats.norm.ppf(0.5 + 0.5 * level))


@dataclass(frozen=True)
class IntervalEstimate:
    """Symmetric Wald interval ``estimate +/- z se``."""

    estimate: float
    lower: float
    upper: float
    level: float
    method: str
    se: float
    bootstrap_failures: int = 0

    @classmethod
    def wald(cls, estimate, se, level, method, failures=0):
        half = normal_critical(level) * se
        return cls(float(estimate), float(estimate - half), float(estimate + half),
                   float(level), method, float(se), int(failures))

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def covers(self, value: float) -> bool:
        return self.lower <= value <= self.upper


@dataclass(frozen=True)
class BootstrapResult:
    """Standard deviations over successful resample refits.

    ``estimates`` has one row per successful replicate: the components of
    ``theta_hat`` followed by ``mu_hat``.
    """

    se_mu: float
    se_theta: np.ndarray
    failures: int
    estimates: np.ndarray
    B: int


def wald_ci_mu(fit: FitResult, level: float = 0.95, variance_source: str = WALD_PLUGIN,
               boot: BootstrapResult | None = None) -> IntervalEstimate:
    """Wald interval for the response mean.

    ``variance_source`` is ``"WaldPlugin"`` (``se = sigma_hat / sqrt(n)``) or
    ``"WaldBootstrap"`` (``se`` from ``boot``).
    """
    if variance_source == WALD_PLUGIN:
        if fit.mu_se is None:
            raise MnarelError("plug-in variance unavailable: refit with covariance=True")
        return IntervalEstimate.wald(fit.mu_hat, fit.mu_se, level, WALD_PLUGIN)
    if variance_source == WALD_BOOTSTRAP:
        if boot is None:
            raise MnarelError("bootstrap result required for a bootstrap interval")
        return IntervalEstimate.wald(fit.mu_hat, boot.se_mu, level, WALD_BOOTSTRAP, boot.failures)
    raise MnarelError(f"unknown variance source {variance_source!r}")


def wald_ci_theta(fit: FitResult, index: int, level: float = 0.95) -> IntervalEstimate:
    """Wald interval for component ``index`` of ``theta = (alpha, beta, gamma, xi)``."""
    if fit.theta_cov is None:
        raise SingularVhat("theta covariance unavailable (V_hat singular or not computed)")
    vec = fit.theta_vector
    if not -vec.size <= index < vec.size:
        raise IndexError(f"theta has {vec.size} components")
    var = fit.theta_cov[index, index]
    if not var > 0:
        raise SingularVhat(f"non-positive variance {var!r} for component {index}")
    return IntervalEstimate.wald(vec[index], math.sqrt(var / fit.n), level, WALD_PLUGIN)


@dataclass(frozen=True)
class LRTest:
    stat: float
    critical: float
    reject: bool
    pvalue: float
    df: int


def lr_test(theta0, data: Dataset, spec: ModelSpec, fit: FitResult,
            level: float = 0.95) -> LRTest:
    """Empirical likelihood ratio test of ``theta = theta0`` against a chi-square reference.

    ``level`` is the confidence level, so the test has size ``1 - level``.
    """
    vec = theta0.to_vector() if isinstance(theta0, Theta) else np.asarray(theta0, float)
    df = vec.size
    stat = lr_stat(vec, data, spec, fit)
    # the maximiser is only accurate to the optimiser tolerance
    stat = max(stat, 0.0)
    crit = float(stats.chi2.ppf(level, df))
    p = float(stats.chi2.sf(stat, df)) if math.isfinite(stat) else 0.0
    return LRTest(stat, crit, stat > crit, p, df)


# ---------------------------------------------------------------------------
# bootstrap
# ---------------------------------------------------------------------------

def _refit(args):
    data, spec, seed, reps, start, opts = args
    rows = []
    for b in reps:
        idx = stream(seed, b).integers(0, data.n, data.n)
        sample = data.take(idx)
        fit = None
        try:
            fit = fit_mle(sample, spec, start=start, covariance=False, **opts)
        except (NonConvergence, DegenerateData, ArithmeticError, np.linalg.LinAlgError):
            try:
                fit = fit_mle(sample, spec, covariance=False, **opts)
            except (NonConvergence, DegenerateData, ArithmeticError, np.linalg.LinAlgError):
                fit = None
        if fit is None:
            rows.append((b, None))
        else:
            rows.append((b, np.append(fit.theta_vector, fit.mu_hat)))
    return rows


def bootstrap_statistic(data: Dataset, statistic, B: int, seed: int):
    """Resample rows of ``data`` and apply ``statistic``; returns ``(values, failures)``.

    ``statistic`` maps a resampled :class:`Dataset` to a float or vector and
    may raise :class:`MnarelError` to signal failure.
    """
    vals, failures = [], 0
    for b in range(B):
        idx = stream(seed, b).integers(0, data.n, data.n)
        try:
            vals.append(np.atleast_1d(np.asarray(statistic(data.take(idx)), float)))
        except (MnarelError, ArithmeticError):
            failures += 1
    return (np.array(vals) if vals else np.empty((0, 0))), failures


def bootstrap(data: Dataset, spec: ModelSpec, B: int = 200, seed: int = 0,
              fit: FitResult | None = None, options: dict | None = None,
              workers: int | None = None) -> BootstrapResult:
    """Nonparametric bootstrap of ``theta_hat`` and ``mu_hat``.

    Replicate ``b`` resamples with the stream ``(seed, b)``, so the result is
    the same for any worker count. Refits warm-start from the full-data
    ``theta_hat`` and fall back to a cold multistart fit; replicates that
    still fail are discarded and counted.

    Raises
    ------
    BootstrapFailure
        If more than half of the replicates fail.
    """
    if B < MIN_BOOT:
        raise ValueError(f"B must be at least {MIN_BOOT}")
    opts = dict(options or {})
    if fit is None:
        fit = fit_mle(data, spec, covariance=False, **opts)
    opts.setdefault("multistarts", 3)
    start = fit.theta_vector
    workers = worker_count() if workers is None else workers
    n_chunks = max(1, min(B, 4 * workers)) if workers > 1 else 1
    chunks = [list(range(B))[i::n_chunks] for i in range(n_chunks)]
    results = parallel_map(_refit, [(data, spec, seed, c, start, opts) for c in chunks], workers)
    rows = sorted((r for chunk in results for r in chunk), key=lambda r: r[0])
    good = [v for _, v in rows if v is not None]
    failures = B - len(good)
    if failures > B / 2:
        raise BootstrapFailure(f"{failures} of {B} bootstrap refits failed", failures, B)
    est = np.array(good)
    sd = est.std(axis=0, ddof=1) if len(good) > 1 else np.zeros(est.shape[1])
    return BootstrapResult(float(sd[-1]), sd[:-1], failures, est, B)
