"""Maximum semiparametric likelihood estimation.

``fit_mle`` maximises the profile log-likelihood ``ell2`` over ``theta``
(``eta`` is estimated in closed form by ``n1 / n``), then derives the
response-mean estimate and the plug-in variances.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.special import expit

from .errors import NoInteriorRoot, NonConvergence, SpecError
from .likelihood import INFEASIBLE_SCORE, ell1, profile
from .model import (
    FD_STEP, GenericOutcome, NormalOutcome, Dataset, ModelSpec, Theta, _GH_W, _GH_Z,
    log_odds_shift, marginal_propensity, t_derivatives, t_values,
)

log = logging.getLogger(__name__)

COND_LIMIT = 1e12


@dataclass(frozen=True)
class FitResult:
    """Output of :func:`fit_mle`.

    ``theta_cov`` is the estimated asymptotic covariance of
    ``sqrt(n) (theta_hat - theta)``; divide by ``n`` for standard errors.
    """

    theta_hat: Theta
    eta_hat: float
    lambda_hat: float
    ell1: float
    ell2: float
    weights: np.ndarray
    theta_cov: np.ndarray | None
    mu_hat: float
    mu_se: float | None
    converged: bool
    iterations: int
    multistart_index: int
    grad_norm: float
    n: int
    vhat: np.ndarray | None = field(default=None, repr=False)
    sigma2: float | None = None
    singular_vhat: bool = False

    @property
    def theta_vector(self) -> np.ndarray:
        return self.theta_hat.to_vector()

    @property
    def loglik(self) -> float:
        return self.ell1 + self.ell2

    @property
    def alpha_star(self) -> float:
        return self.theta_hat.alpha + log_odds_shift(self.eta_hat)

    def theta_se(self) -> np.ndarray | None:
        if self.theta_cov is None:
            return None
        return np.sqrt(np.maximum(np.diag(self.theta_cov), 0.0) / self.n)


# ---------------------------------------------------------------------------
# starting values
# ---------------------------------------------------------------------------

def logistic_mle(Z, target, max_iter=100, tol=1e-10):
    """Logistic regression of a binary ``target`` on ``Z`` (intercept included) by IRLS."""
    Z = np.column_stack([np.ones(len(target)), np.asarray(Z, float).reshape(len(target), -1)])
    b = np.zeros(Z.shape[1])
    p0 = np.clip(target.mean(), 1e-6, 1 - 1e-6)
    b[0] = math.log(p0 / (1 - p0))
    for _ in range(max_iter):
        p = expit(Z @ b)
        g = Z.T @ (target - p)
        H = (Z * (p * (1 - p))[:, None]).T @ Z
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, g, rcond=None)[0]
        b = b + step
        if np.max(np.abs(step)) < tol:
            break
    return b


def complete_case_xi(data: Dataset, spec: ModelSpec) -> np.ndarray:
    """Maximum likelihood of ``f(y | x, xi)`` on the rows with observed ``y``."""
    out = spec.outcome
    if not isinstance(out, NormalOutcome):
        raise SpecError("starting values for a generic outcome model must be supplied")
    obs = data.observed
    X, y = data.x[obs], data.y[obs]
    from .model import design

    Fm = design(X, out.mean_terms)
    Fv = design(X, out.logvar_terms)
    if out.mean_link == "identity":
        xm = np.linalg.lstsq(Fm, y, rcond=None)[0]
        resid = y - Fm @ xm
    else:
        xm = np.zeros(out.d_mean)
        pos = y > 0
        if pos.sum() > out.d_mean:
            xm = np.linalg.lstsq(Fm[pos], np.log(y[pos]), rcond=None)[0]
        resid = y - np.exp(Fm @ xm)
    # E log chi2_1 = -1.2704
    xv = np.linalg.lstsq(Fv, np.log(resid**2 + 1e-12) + 1.2704, rcond=None)[0]
    xi0 = np.concatenate([xm, xv])

    def nll(xi):
        if not np.all(np.isfinite(xi)):
            return math.inf, np.zeros_like(xi)
        with np.errstate(over="ignore", invalid="ignore"):
            v = -out.log_density(y, X, xi).sum() / y.size
            g = -out.score(y, X, xi).sum(axis=0) / y.size
        if not np.isfinite(v):
            return math.inf, np.zeros_like(xi)
        return v, g

    def hess(xi):
        return -out.score_hessian(y, X, xi).sum(axis=0) / y.size

    res = optimize.minimize(nll, xi0, jac=True, hess=hess, method="trust-exact",
                            options={"gtol": 1e-10, "maxiter": 200})
    return res.x if np.all(np.isfinite(res.x)) and res.fun <= nll(xi0)[0] else xi0


def recenter_alpha(vec, data: Dataset, spec: ModelSpec) -> np.ndarray:
    """Shift ``alpha`` so that the implied ``sum_i pi_i`` equals ``n2``.

    Such a ``theta`` is always EL-feasible: the ``t_i`` then take both signs.
    """
    vec = np.array(vec, dtype=float)
    base = t_values(vec, data.x, spec) - vec[0]
    shift = log_odds_shift(data.n1 / data.n)

    def excess(a):
        return expit(base + a + shift).sum() - data.n2

    lo, hi = -1.0, 1.0
    while excess(lo) > 0:
        lo *= 2
    while excess(hi) < 0:
        hi *= 2
    vec[0] = optimize.brentq(excess, lo, hi, xtol=1e-12)
    return vec


def initial_theta(data: Dataset, spec: ModelSpec) -> np.ndarray:
    """Ignorable-case start: ``gamma = 0``, logistic ``(alpha, beta)``, complete-case ``xi``."""
    xi0 = complete_case_xi(data, spec)
    b = logistic_mle(spec.xp(data.x), 1.0 - data.d)
    eta = data.n1 / data.n
    alpha = b[0] - log_odds_shift(eta)
    vec = np.concatenate([[alpha], b[1:], [0.0], xi0])
    return recenter_alpha(vec, data, spec)


def multistart_points(data: Dataset, spec: ModelSpec, base, count: int) -> list[np.ndarray]:
    """``base`` plus copies with ``gamma`` offset by multiples of ``0.5 / sd(y_obs)``."""
    sd = float(np.std(data.y[data.observed])) or 1.0
    offsets = [0.0]
    k = 1
    while len(offsets) < count:
        offsets += [k * 0.5 / sd, -k * 0.5 / sd]
        k += 1
    g = 1 + spec.d_beta
    starts = []
    for off in offsets[:count]:
        v = np.array(base, dtype=float)
        v[g] += off
        try:
            starts.append(recenter_alpha(v, data, spec))
        except (ValueError, FloatingPointError, ArithmeticError):
            log.debug("dropping start with gamma offset %g", off)
    return starts


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

class _Objective:
    """``-ell2 / n`` with a one-point cache shared by value, gradient and Hessian."""

    def __init__(self, data, spec, order):
        self.data, self.spec, self.order = data, spec, order
        self.n = data.n
        self._key = None
        self._prof = None
        self.lam = data.n2 / data.n

    def _eval(self, x):
        key = x.tobytes()
        if key != self._key:
            self._key = key
            try:
                with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                    self._prof = profile(x, self.data, self.spec, order=self.order,
                                         lam_start=self.lam)
                if not np.isfinite(self._prof.value):
                    self._prof = None
                else:
                    self.lam = self._prof.lam
            except (NoInteriorRoot, ArithmeticError, ValueError):
                self._prof = None
        return self._prof

    def fun(self, x):
        p = self._eval(x)
        if p is None:
            return -INFEASIBLE_SCORE, np.zeros_like(x)
        return -p.value / self.n, -p.grad / self.n

    def hess(self, x):
        p = self._eval(x)
        if p is None or p.hess is None:
            return np.eye(x.size)
        return -p.hess / self.n


def _newton(obj, x, tol, max_iter):
    """Damped Newton on ``-ell2 / n``; returns ``(x, iterations, ok)``.

    Gives up (``ok=False``) as soon as the Hessian is not positive definite
    or the line search stalls, leaving the caller to fall back to a trust
    region method.
    """
    f, g = obj.fun(x)
    if f >= -INFEASIBLE_SCORE:
        return x, 0, False
    for it in range(1, max_iter + 1):
        if np.max(np.abs(g)) < tol:
            return x, it - 1, True
        H = obj.hess(x)
        try:
            L = np.linalg.cholesky(H)
        except np.linalg.LinAlgError:
            return x, it, False
        step = -np.linalg.solve(L.T, np.linalg.solve(L, g))
        slope = float(g @ step)
        # below roundoff the sufficient-decrease test is noise; use the gradient instead
        flat = abs(slope) < 1e-11 * (1.0 + abs(f))
        gmax = np.max(np.abs(g))
        t = 1.0
        for _ in range(30):
            f_new, g_new = obj.fun(x + t * step)
            if f_new <= f + 1e-4 * t * slope:
                break
            if flat and f_new < -INFEASIBLE_SCORE and np.max(np.abs(g_new)) < gmax:
                break
            t *= 0.5
        else:
            return x, it, False
        if f_new > f - 1e-15 * abs(f) and np.max(np.abs(g_new)) >= np.max(np.abs(g)):
            # no further progress is possible at this precision
            return x + t * step, it, np.max(np.abs(g_new)) < tol
        x, f, g = x + t * step, f_new, g_new
    return x, max_iter, np.max(np.abs(g)) < tol


def _maximise(start, data, spec, tol, max_iter):
    analytic = spec.outcome.analytic_hessian
    obj = _Objective(data, spec, order=2 if analytic else 1)
    if analytic:
        x, nit, ok = _newton(obj, np.asarray(start, float), tol, max_iter)
        if not ok:
            res = optimize.minimize(obj.fun, start, jac=True, hess=obj.hess,
                                    method="trust-exact",
                                    options={"gtol": tol, "maxiter": max_iter})
            x, more, _ = _newton(obj, res.x, tol, 20)
            nit = int(res.nit) + more
    else:
        res = optimize.minimize(obj.fun, start, jac=True, method="BFGS",
                                options={"gtol": max(tol, 1e-7), "maxiter": max_iter})
        x, nit = res.x, int(res.nit)
    f, g = obj.fun(x)
    return x, -f * data.n, float(np.max(np.abs(g))), nit


def fit_mle(data: Dataset, spec: ModelSpec, multistarts: int = 5, tol: float = 1e-9,
            max_iter: int = 200, start=None, covariance: bool = True,
            check_identifiable: bool = False) -> FitResult:
    """Maximise the profile likelihood and assemble a :class:`FitResult`.

    Parameters
    ----------
    data, spec
        Dataset and model specification.
    multistarts : int
        Number of starting points (``gamma`` offsets around the ignorable
        start).  Ignored when ``start`` is given.
    tol : float
        Convergence threshold on the max-norm of the gradient of ``ell2 / n``.
    start : Theta or array, optional
        Warm start (used for bootstrap refits).
    covariance : bool
        Compute ``V_hat``, ``theta_cov`` and the plug-in variance of ``mu_hat``.
    check_identifiable : bool
        Run the syntactic identifiability checker and warn on a negative verdict.
    """
    data.require_estimable()
    if check_identifiable:
        from .identifiability import check

        verdict = check(spec)
        if verdict.status != "Identifiable":
            warnings.warn(f"model may not be identifiable: {verdict.explanation}", stacklevel=2)

    if start is not None:
        v0 = start.to_vector() if isinstance(start, Theta) else np.asarray(start, float)
        starts = [np.asarray(v0, float)]
    else:
        starts = multistart_points(data, spec, initial_theta(data, spec), max(1, multistarts))

    best = None
    for idx, s in enumerate(starts):
        try:
            x, val, gnorm, nit = _maximise(s, data, spec, tol, max_iter)
        except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
            log.debug("start %d failed: %s", idx, exc)
            continue
        if val <= INFEASIBLE_SCORE:
            continue
        cand = (gnorm <= _accept_tol(tol, spec), val, idx, x, gnorm, nit)
        if best is None or (cand[0], cand[1]) > (best[0], best[1]):
            best = cand
    if best is None or not best[0]:
        raise NonConvergence(
            "profile likelihood maximisation did not converge from any start",
            best_theta=None if best is None else spec.theta(best[3]),
            grad_norm=None if best is None else best[4])
    _, val, idx, x, gnorm, nit = best
    return _assemble(x, data, spec, idx, gnorm, nit, covariance)


def _accept_tol(tol, spec):
    return tol if spec.outcome.analytic_hessian else max(tol, 1e-5)


def _assemble(x, data, spec, idx, gnorm, nit, covariance) -> FitResult:
    prof = profile(x, data, spec)
    eta = data.n1 / data.n
    theta = spec.theta(x)
    vhat = cov = sigma2 = se = None
    singular = False
    K = K_values(x, eta, data.x, spec)
    mu = float(K.mean())
    if covariance:
        vhat = v_hat(x, eta, data, spec)
        if np.linalg.cond(vhat) > COND_LIMIT:
            singular = True
            log.warning("V_hat is numerically singular; covariance omitted")
        else:
            vinv = np.linalg.inv(vhat)
            cov = vinv.copy()
            cov[0, 0] -= 1.0 / (eta * (1.0 - eta))
            cov = 0.5 * (cov + cov.T)
            A = K_grad(x, eta, data.x, spec).mean(axis=0)
            sigma2 = float(K.var() + A @ vinv @ A)
            se = math.sqrt(max(sigma2, 0.0) / data.n)
    return FitResult(
        theta_hat=theta, eta_hat=eta, lambda_hat=prof.lam, ell1=ell1(data.n1, data.n2, eta),
        ell2=prof.value, weights=prof.weights, theta_cov=cov, mu_hat=mu, mu_se=se,
        converged=True, iterations=nit, multistart_index=idx, grad_norm=gnorm, n=data.n,
        vhat=vhat, sigma2=sigma2, singular_vhat=singular)


# ---------------------------------------------------------------------------
# mean estimator and variances
# ---------------------------------------------------------------------------

def _vec(theta):
    return theta.to_vector() if isinstance(theta, Theta) else np.asarray(theta, dtype=float)


def K_values(theta, eta, X, spec: ModelSpec) -> np.ndarray:
    """``K(x_i; theta, eta)`` for every row of ``X``.

    ``K = (1 - pi) E_f[Y] + pi E_tilt[Y]`` with ``pi`` the marginal missing
    probability; for the normal family ``E_tilt[Y] = mu + gamma sigma^2``.
    """
    vec = _vec(theta)
    _, _, gamma, xi = spec.split(vec)
    t, gt = t_derivatives(vec, X, spec)
    m1 = spec.outcome.first_moment(X, xi)
    pi = marginal_propensity(t, eta)
    return m1 + pi * (gt[:, 1 + spec.d_beta] - m1)


def K_fun(x, theta, eta: float, spec: ModelSpec) -> float:
    """Conditional-mean kernel at one covariate row."""
    return float(K_values(theta, eta, np.atleast_2d(np.asarray(x, float)), spec)[0])


def K_grad(theta, eta, X, spec: ModelSpec) -> np.ndarray:
    """Gradient of ``K`` in ``theta`` for every row, shape ``(n, d_theta)``."""
    vec = _vec(theta)
    if not spec.outcome.analytic_hessian:
        return _K_grad_fd(vec, eta, X, spec)
    _, _, gamma, xi = spec.split(vec)
    t, gt, Hc = t_derivatives(vec, X, spec, order=2)
    out = spec.outcome
    m1 = out.first_moment(X, xi)
    dm1 = np.zeros_like(gt)
    dm1[:, -spec.d_xi:] = out.first_moment_grad(X, xi)
    cg = gt[:, 1 + spec.d_beta]
    dcg = np.zeros_like(gt)
    dcg[:, 1 + spec.d_beta:] = Hc[:, 0, :]
    pi = marginal_propensity(t, eta)
    return (dm1 + (pi * (1 - pi) * (cg - m1))[:, None] * gt + pi[:, None] * (dcg - dm1))


def _K_grad_fd(vec, eta, X, spec):
    out = np.empty((np.shape(X)[0], vec.size))
    for j in range(vec.size):
        h = FD_STEP * (1.0 + abs(vec[j]))
        e = np.zeros_like(vec)
        e[j] = h
        out[:, j] = (K_values(vec + e, eta, X, spec) - K_values(vec - e, eta, X, spec)) / (2 * h)
    return out


def mu_hat(fit: FitResult, data: Dataset, spec: ModelSpec) -> float:
    """Estimated response mean: the average of ``K(x_i; theta_hat, eta_hat)``."""
    return float(K_values(fit.theta_hat, fit.eta_hat, data.x, spec).mean())


def _f_nodes(X, xi, outcome):
    """Gauss-Hermite nodes and probability weights for integrals against ``f``."""
    if isinstance(outcome, NormalOutcome):
        mu, s2, _, _ = outcome.moments(X, xi)
        y = mu[:, None] + np.sqrt(2.0 * s2)[:, None] * _GH_Z[None, :]
        w = np.broadcast_to(_GH_W / math.sqrt(math.pi), y.shape)
        return y, w
    y, logw = outcome._nodes(X, xi)
    return y, np.exp(logw)


def K_quadrature(theta, eta, X, spec: ModelSpec) -> np.ndarray:
    """``K`` by direct quadrature of the numerator and denominator integrals.

    Independent of the tilting moments; used to cross-check :func:`K_values`.
    """
    alpha, beta, gamma, xi = spec.split(_vec(theta))
    y, w = _f_nodes(X, xi, spec.outcome)
    a = alpha + spec.xp(X) @ beta
    m1 = np.sum(w * y, axis=1)
    L = a[:, None] + gamma * y + np.log(w)
    lse = np.max(L, axis=1)
    e = np.exp(L - lse[:, None])
    num_tilt = np.sum(e * y, axis=1)          # scaled by exp(-lse)
    mass = np.sum(e, axis=1)                  # scaled by exp(-lse)
    scale = np.exp(lse)
    num = eta * m1 + (1 - eta) * scale * num_tilt
    den = eta + (1 - eta) * scale * mass
    return num / den


def K_numerator(theta, eta, X, spec: ModelSpec) -> np.ndarray:
    """``integral of y {eta + (1-eta) exp(alpha + x'beta + gamma y)} f(y|x) dy`` by quadrature."""
    alpha, beta, gamma, xi = spec.split(_vec(theta))
    y, w = _f_nodes(X, xi, spec.outcome)
    a = alpha + spec.xp(X) @ beta
    return np.sum(w * y * (eta + (1 - eta) * np.exp(a[:, None] + gamma * y)), axis=1)


def v_hat(theta, eta, data: Dataset, spec: ModelSpec) -> np.ndarray:
    """Plug-in information matrix ``V_hat``."""
    vec = _vec(theta)
    _, _, _, xi = spec.split(vec)
    t, gt = t_derivatives(vec, data.x, spec)
    pi = marginal_propensity(t, eta)
    V = np.einsum("n,ni,nj->ij", pi * (1 - pi), gt, gt)
    obs = data.observed
    S = spec.outcome.score(data.y[obs], data.x[obs], xi)
    k = spec.d_xi
    V[-k:, -k:] += S.T @ S
    return V / data.n


def sigma2_hat(fit: FitResult, data: Dataset, spec: ModelSpec) -> float:
    """Plug-in asymptotic variance of ``sqrt(n) (mu_hat - mu)``."""
    vec = fit.theta_vector
    V = v_hat(vec, fit.eta_hat, data, spec)
    if np.linalg.cond(V) > COND_LIMIT:
        from .errors import SingularVhat

        raise SingularVhat("V_hat is numerically singular")
    K = K_values(vec, fit.eta_hat, data.x, spec)
    A = K_grad(vec, fit.eta_hat, data.x, spec).mean(axis=0)
    return float(K.var() + A @ np.linalg.solve(V, A))


def lr_stat(theta0, data: Dataset, spec: ModelSpec, fit: FitResult) -> float:
    """``R(theta0) = 2 (ell2(theta_hat) - ell2(theta0))``; ``inf`` if ``theta0`` is infeasible."""
    try:
        val = profile(_vec(theta0), data, spec).value
    except NoInteriorRoot:
        return math.inf
    return 2.0 * (fit.ell2 - val)


def bic(fit: FitResult, data: Dataset) -> float:
    """``-2 (ell1 + ell2) + k log n`` with ``k = d_theta + 1`` (``eta`` counted)."""
    k = fit.theta_hat.dim + 1
    return -2.0 * (fit.ell1 + fit.ell2) + k * math.log(data.n)
