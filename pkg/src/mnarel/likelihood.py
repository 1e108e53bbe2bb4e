"""Empirical-likelihood core: multiplier solve and profile log-likelihood.

With ``w_i = exp(t_i)`` the EL weights are ``p_i = 1 / (n (1 + lam (w_i - 1)))``
where ``lam`` solves ``sum_i (w_i - 1) / (1 + lam (w_i - 1)) = 0``.  The
profile log-likelihood of ``theta`` is

    ell2 = sum_{d=1} log f(y_i | x_i, xi) + sum_{d=0} t_i
           - sum_i log(1 + lam (w_i - 1)).

Its gradient follows from the envelope theorem (the multiplier equation is
the stationarity condition in ``lam``); the Hessian adds the implicit
``d lam / d theta`` correction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InfeasibleMultiplier, NoInteriorRoot
from .model import Dataset, ModelSpec, Theta, t_derivatives, t_values

INFEASIBLE_SCORE = -1e30
T_CLIP = 700.0
_INSET = 1e-10


def _as_vec(theta) -> np.ndarray:
    return theta.to_vector() if isinstance(theta, Theta) else np.asarray(theta, dtype=float)


def log_denominator(t, lam: float) -> np.ndarray:
    """``log(1 + lam (e^t - 1)) = log((1 - lam) + lam e^t)`` without overflow."""
    t = np.asarray(t, dtype=float)
    if lam == 0.0:
        return np.zeros_like(t)
    if 0.0 < lam < 1.0:
        return np.logaddexp(math.log1p(-lam), math.log(lam) + t)
    if lam == 1.0:
        return t.copy()
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        if lam > 1.0:
            # lam e^t (1 + (1 - lam) e^{-t} / lam)
            out = math.log(lam) + t + np.log1p((1.0 - lam) / lam * np.exp(-t))
        else:
            # (1 - lam) (1 + lam e^t / (1 - lam))
            out = math.log1p(-lam) + np.log1p(lam / (1.0 - lam) * np.exp(t))
    if not np.all(np.isfinite(out)):
        raise InfeasibleMultiplier(f"lambda={lam!r} makes some EL denominator non-positive")
    return out


def _equation(s, lam):
    D = 1.0 + lam * s
    q = s / D
    return q.sum(), -(q * q).sum()


def feasible_interval(t_values) -> tuple[float, float]:
    """Open interval of ``lam`` keeping every ``1 + lam (e^t - 1)`` positive."""
    s = np.expm1(np.minimum(np.asarray(t_values, dtype=float), T_CLIP))
    pos, neg = s[s > 0], s[s < 0]
    lo = -1.0 / pos.max() if pos.size else -math.inf
    hi = -1.0 / neg.min() if neg.size else math.inf
    return lo, hi


def solve_lambda(t_values, target: float | None = None, start: float | None = None,
                 full_output: bool = False, max_iter: int = 200):
    """Solve the EL multiplier equation for ``lam``.

    The equation is strictly decreasing in ``lam`` on the feasible interval,
    so a bracketed Newton iteration with bisection fallback converges to
    machine precision.

    Parameters
    ----------
    t_values : array_like
        ``t(x_i, theta)`` for every row.
    target : float, optional
        Value returned when every ``t_i`` is zero (the equation is then void).
    start : float, optional
        Starting point for the iteration; ``0.5`` if omitted.
    full_output : bool
        Also return a dict with ``degenerate``, ``iterations`` and ``residual``.

    Raises
    ------
    NoInteriorRoot
        If the ``t_i`` do not take both signs, or the root lies within the
        relative inset of a feasibility boundary.
    """
    t = np.asarray(t_values, dtype=float)
    s = np.expm1(np.minimum(t, T_CLIP))
    if not np.any(s != 0.0):
        lam = 0.0 if target is None else float(target)
        info = {"degenerate": True, "iterations": 0, "residual": 0.0}
        return (lam, info) if full_output else lam
    lo, hi = feasible_interval(t)
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise NoInteriorRoot(float(t.min()), float(t.max()))
    a = lo + _INSET * max(abs(lo), 1e-300)
    b = hi - _INSET * max(abs(hi), 1e-300)
    ga, _ = _equation(s, a)
    gb, _ = _equation(s, b)
    if not (ga > 0.0 and gb < 0.0):
        raise NoInteriorRoot(float(t.min()), float(t.max()))

    lam = 0.5 if start is None else float(start)
    if not a < lam < b:
        lam = 0.5 * (a + b)
    it = 0
    g = 0.0
    for it in range(1, max_iter + 1):
        g, dg = _equation(s, lam)
        if g == 0.0:
            break
        if g > 0.0:
            a = lam
        else:
            b = lam
        step = -g / dg
        if abs(step) <= 4e-16 * max(1.0, abs(lam)):
            break
        new = lam + step
        if not a < new < b:
            new = 0.5 * (a + b)
        if b - a <= 4e-16 * max(1.0, abs(lam)):
            lam = new
            g, _ = _equation(s, lam)
            break
        lam = new
    if full_output:
        return lam, {"degenerate": False, "iterations": it, "residual": float(g)}
    return lam


def ell1(n1: int, n2: int, eta: float) -> float:
    """Binomial log-likelihood of the response indicators."""
    if not 0.0 < eta < 1.0:
        raise ValueError("eta must lie in (0, 1)")
    return n1 * math.log(eta) + n2 * math.log1p(-eta)


@dataclass(frozen=True)
class Profile:
    """Profile log-likelihood value and derivatives at one ``theta``."""

    value: float
    lam: float
    t: np.ndarray
    log_denom: np.ndarray
    grad: np.ndarray | None = None
    hess: np.ndarray | None = None

    @property
    def weights(self) -> np.ndarray:
        return np.exp(-self.log_denom) / self.t.size


def profile(theta, data: Dataset, spec: ModelSpec, order: int = 0,
            lam_start: float | None = None) -> Profile:
    """Evaluate ``ell2`` (and its gradient/Hessian for ``order`` 1/2).

    Raises :class:`NoInteriorRoot` when ``theta`` is outside the EL-feasible
    region.
    """
    vec = _as_vec(theta)
    _, _, gamma, xi = spec.split(vec)
    out = spec.outcome
    obs = data.observed
    X, Xo, yo = data.x, data.x[obs], data.y[obs]

    if order == 0:
        t = t_values(vec, X, spec)
    else:
        t, gt = t_derivatives(vec, X, spec, order=1)
    lam = solve_lambda(t, start=lam_start)
    logD = log_denominator(t, lam)
    value = float(out.log_density(yo, Xo, xi).sum() + t[~obs].sum() - logD.sum())
    if order == 0:
        return Profile(value, lam, t, logD)

    k = spec.d_xi
    r = np.exp(np.minimum(t, T_CLIP) - logD)          # w / D
    grad = gt[~obs].sum(axis=0) - lam * (r @ gt)
    grad[-k:] += out.score(yo, Xo, xi).sum(axis=0)
    if order == 1:
        return Profile(value, lam, t, logD, grad)

    inv_d = np.exp(-logD)
    sd = r - inv_d                                      # (w - 1) / D
    H = -(gt * (lam * (1.0 - lam) * r * inv_d)[:, None]).T @ gt
    m = 1 + k                                           # (gamma, xi) block of t's Hessian
    H[-m:, -m:] += out.c_hessian_sum(X, gamma, xi, (~obs).astype(float) - lam * r)
    H[-k:, -k:] += out.score_hessian_sum(yo, Xo, xi)
    l_tl = -(r * inv_d) @ gt
    l_ll = float(sd @ sd)
    if l_ll > 0.0:
        H -= np.outer(l_tl, l_tl) / l_ll
    return Profile(value, lam, t, logD, grad, 0.5 * (H + H.T))


def ell2(theta, data: Dataset, spec: ModelSpec) -> float:
    """Profile log-likelihood of ``theta`` (nuisance weights maximised out)."""
    return profile(theta, data, spec).value


def ell2_score(theta, data: Dataset, spec: ModelSpec) -> float:
    """``ell2`` with infeasible ``theta`` scored as a large negative number."""
    try:
        return profile(theta, data, spec).value
    except NoInteriorRoot:
        return INFEASIBLE_SCORE


def el_weights(theta, lam: float, data: Dataset, spec: ModelSpec) -> np.ndarray:
    """``p_i = 1 / (n (1 + lam (exp(t_i) - 1)))``."""
    t = t_values(_as_vec(theta), data.x, spec)
    return np.exp(-log_denominator(t, float(lam))) / t.size


@dataclass(frozen=True)
class ELState:
    lam: float
    t_values: np.ndarray
    weights: np.ndarray
    ell1: float
    ell2: float
    degenerate: bool = False


def el_state(theta, data: Dataset, spec: ModelSpec, eta: float | None = None) -> ELState:
    """Multiplier, weights and both log-likelihood pieces at ``theta``."""
    vec = _as_vec(theta)
    t = t_values(vec, data.x, spec)
    lam, info = solve_lambda(t, full_output=True)
    logD = log_denominator(t, lam)
    obs = data.observed
    _, _, _, xi = spec.split(vec)
    l2 = float(spec.outcome.log_density(data.y[obs], data.x[obs], xi).sum()
               + t[~obs].sum() - logD.sum())
    eta = data.n1 / data.n if eta is None else eta
    return ELState(lam, t, np.exp(-logD) / t.size, ell1(data.n1, data.n2, eta), l2,
                   info["degenerate"])


def fhat_cdf(point, weights, data: Dataset) -> float:
    """Weighted empirical CDF of ``x`` in the observed arm at ``point``."""
    point = np.atleast_1d(np.asarray(point, dtype=float))
    below = np.all(data.x <= point[None, :], axis=1)
    return float(np.asarray(weights)[below].sum())
