"""Syntactic identifiability checks for declared model specifications.

The checks inspect the declared propensity covariates and outcome bases
(plus, for the linear-independence rule, a numerical rank test on sample
points). Verdicts are advisory: :func:`mnarel.estimation.fit_mle` only warns.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import SpecError
from .model import ModelSpec, NormalOutcome, design

log = logging.getLogger(__name__)

IDENTIFIABLE = "Identifiable"
NOT_IDENTIFIABLE = "NotIdentifiable"
ONLY_IF_GAMMA_ZERO = "IdentifiableOnlyIfGammaZero"
UNKNOWN = "Unknown"

STATUSES = (IDENTIFIABLE, NOT_IDENTIFIABLE, ONLY_IF_GAMMA_ZERO, UNKNOWN)
RULES = ("InstrumentVariable", "LinearIndependenceBasis", "NormalCaseI", "NormalCaseII",
         "NormalCaseIII", "NoRuleApplies")

RANK_TOL = 1e-8


@dataclass(frozen=True)
class IdentifiabilityVerdict:
    status: str
    rule: str
    explanation: str

    def __post_init__(self):
        if self.status not in STATUSES or self.rule not in RULES:
            raise ValueError(f"bad verdict ({self.status!r}, {self.rule!r})")
        if (self.status == UNKNOWN) != (self.rule == "NoRuleApplies"):
            raise ValueError("status Unknown goes with rule NoRuleApplies and nothing else")

    def as_dict(self) -> dict:
        return {"status": self.status, "rule": self.rule, "explanation": self.explanation}


def _unknown(why: str) -> IdentifiabilityVerdict:
    return IdentifiabilityVerdict(UNKNOWN, "NoRuleApplies", why)


def _outcome_columns(out: NormalOutcome) -> set[int]:
    cols: set[int] = set()
    for term in (*out.mean_terms, *out.logvar_terms):
        cols |= set(getattr(term, "columns", ()))
    return cols


def _require_normal(spec: ModelSpec) -> NormalOutcome:
    if not isinstance(spec.outcome, NormalOutcome):
        raise SpecError("this check needs a normal outcome with declared bases")
    return spec.outcome


def check_instrument(spec: ModelSpec, instrument_index: int) -> IdentifiabilityVerdict:
    """Instrument rule: a covariate left out of the propensity but driving ``f``."""
    if not 0 <= instrument_index < len(spec.columns):
        raise SpecError(f"instrument index {instrument_index} out of range")
    name = spec.columns[instrument_index]
    if instrument_index in spec.propensity:
        return _unknown(f"{name!r} is a propensity covariate, so it cannot be an instrument")
    out = spec.outcome
    if not isinstance(out, NormalOutcome) or instrument_index not in _outcome_columns(out):
        return _unknown(f"no declared outcome basis term depends on {name!r}")
    return IdentifiabilityVerdict(
        IDENTIFIABLE, "InstrumentVariable",
        f"{name!r} is excluded from the propensity and enters the outcome model")


def check_normal_family(spec: ModelSpec, gamma_zero_hypothesis: bool = False
                        ) -> IdentifiabilityVerdict:
    """Normal model with mean ``x'b1 + b2 x'x`` and log-variance ``b3 + x'b4``.

    The shape is read off the declared bases: a degree-2 mean term plays the
    role of ``b2``, a non-constant log-variance term the role of ``b4``.
    Bases that use covariates outside the propensity, a non-identity mean
    link, or higher-degree terms fall outside this family.
    """
    out = _require_normal(spec)
    if out.mean_link != "identity":
        return _unknown(f"mean link {out.mean_link!r} is not linear in the basis")
    prop = set(spec.propensity)
    extra = _outcome_columns(out) - prop
    if extra:
        names = ", ".join(spec.columns[j] for j in sorted(extra))
        return _unknown(f"outcome bases use non-propensity covariates ({names})")
    mean_deg = [t.degree for t in out.mean_terms]
    var_deg = [t.degree for t in out.logvar_terms]
    if max(mean_deg, default=0) > 2 or max(var_deg, default=0) > 1:
        return _unknown("mean above degree 2 or log-variance above degree 1")
    quadratic = any(d == 2 for d in mean_deg)
    varying = any(d == 1 for d in var_deg)
    if quadratic:
        log.info("quadratic mean: gamma is identified up to the injectivity of 0.5 gamma^2 "
                 "only on each half-line when no instrument is present")
        return IdentifiabilityVerdict(
            IDENTIFIABLE, "NormalCaseI", "the quadratic mean term makes c(x) nonlinear in x")
    if not varying:
        return IdentifiabilityVerdict(
            NOT_IDENTIFIABLE, "NormalCaseII",
            "linear mean and constant variance: c(x) is linear in x and is absorbed "
            "by alpha and beta")
    if gamma_zero_hypothesis:
        return IdentifiabilityVerdict(
            IDENTIFIABLE, "NormalCaseIII",
            "linear mean, log-linear variance, and gamma = 0 assumed")
    return IdentifiabilityVerdict(
        ONLY_IF_GAMMA_ZERO, "NormalCaseIII",
        "linear mean with log-linear variance: identifiable only when gamma = 0")


def check_linear_independence(spec: ModelSpec, sample_points, xi=None
                              ) -> IdentifiabilityVerdict:
    """Rank test of ``{1, x_p, g_1(x), ..., g_k(x)}`` on ``sample_points``.

    For the normal family ``c = gamma mu + 0.5 gamma^2 sigma^2``; the ``g``
    functions are the non-constant mean basis terms other than plain
    propensity covariates, plus ``sigma^2(x)`` when the log-variance is not
    constant (evaluated at ``xi``, or at unit coefficients if omitted).
    Independence holds when the smallest singular value of the evaluation
    matrix exceeds ``1e-8`` times the largest.
    """
    out = _require_normal(spec)
    X = np.atleast_2d(np.asarray(sample_points, dtype=float))
    if X.shape[1] != len(spec.columns):
        raise SpecError(f"sample points need {len(spec.columns)} columns")
    if out.mean_link != "identity":
        return _unknown(f"mean link {out.mean_link!r} is not a finite basis expansion")
    prop = set(spec.propensity)
    g_terms = [t for t in out.mean_terms
               if not t.is_constant and not (t.degree == 1 and t.columns <= prop)]
    cols = [np.ones(X.shape[0]), *spec.xp(X).T, *design(X, g_terms).T]
    k = len(g_terms)
    if any(not t.is_constant for t in out.logvar_terms):
        coef = np.ones(out.d_var) if xi is None else np.asarray(xi, float)[out.d_mean:]
        cols.append(np.exp(design(X, out.logvar_terms) @ coef))
        k += 1
    if k == 0:
        return _unknown("c(x) has no component beyond 1 and x_p")
    M = np.column_stack(cols)
    if X.shape[0] < M.shape[1] + 1:
        raise SpecError(f"need at least {M.shape[1] + 1} sample points, got {X.shape[0]}")
    s = np.linalg.svd(M, compute_uv=False)
    if s[-1] > RANK_TOL * s[0]:
        return IdentifiabilityVerdict(
            IDENTIFIABLE, "LinearIndependenceBasis",
            f"1, x_p and {k} further component(s) of c(x) are linearly independent "
            f"(singular value ratio {s[-1] / s[0]:.3g})")
    return _unknown(f"evaluation matrix is rank deficient (ratio {s[-1] / s[0]:.3g})")


def instrument_candidates(spec: ModelSpec) -> list[int]:
    """Declared instrument, else every outcome covariate missing from the propensity."""
    if spec.instrument is not None:
        return [spec.columns.index(spec.instrument)]
    if not isinstance(spec.outcome, NormalOutcome):
        return []
    return sorted(_outcome_columns(spec.outcome) - set(spec.propensity))


def check(spec: ModelSpec, sample_points=None, gamma_zero_hypothesis: bool = False
          ) -> IdentifiabilityVerdict:
    """Apply the instrument rule, then the normal-family rules, then the rank test.

    The first verdict other than Unknown wins.
    """
    for j in instrument_candidates(spec):
        v = check_instrument(spec, j)
        if v.status != UNKNOWN:
            return v
    if not isinstance(spec.outcome, NormalOutcome):
        return _unknown("no syntactic rule covers a generic outcome density")
    v = check_normal_family(spec, gamma_zero_hypothesis)
    if v.status != UNKNOWN or sample_points is None:
        return v
    return check_linear_independence(spec, sample_points)
