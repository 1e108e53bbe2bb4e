"""Parametric pieces of the semiparametric model.

The propensity is logistic in ``(x, y)`` and the observed-response density
``f(y | x, xi)`` is parametric.  Everything the likelihood needs is built from

* ``c(x, gamma, xi) = log E_f[exp(gamma * Y)]``, the log tilting moment,
* ``t(x, theta) = alpha + x_p' beta + c(x, gamma, xi)``, the log density ratio
  of ``x`` between the missing and the observed arm.

``theta`` is laid out as ``(alpha, beta, gamma, xi)`` throughout; ``beta``
multiplies the propensity covariates ``x_p`` (a column subset of ``x``).

All array-valued methods are vectorised over rows of a covariate matrix ``X``
of shape ``(n, p)``.  Thin single-row wrappers (:func:`c_fun`, :func:`t_fun`,
...) are provided for convenience.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.special import expit, logsumexp

from .errors import DegenerateData, SamplingError, SpecError, TiltDivergence

LOG_2PI = math.log(2.0 * math.pi)
GH_NODES = 64
FD_STEP = 1e-6
MAX_PROPOSALS = 10**6

_GH_Z, _GH_W = hermgauss(GH_NODES)
_GH_LOGW = np.log(_GH_W) + _GH_Z**2   # log(w_k) + z_k^2, for integrals against Lebesgue measure


# ---------------------------------------------------------------------------
# basis terms
# ---------------------------------------------------------------------------

_FACTOR_RE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_.]*)\s*(?:\^\s*(\d+))?\s*$")


@dataclass(frozen=True)
class Term:
    """A monomial in the covariates, e.g. ``1``, ``x1``, ``x1^2``, ``x1*x2``.

    ``factors`` holds ``(column index, power)`` pairs; the empty tuple is the
    constant term.
    """

    factors: tuple[tuple[int, int], ...]
    text: str

    def __call__(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        out = np.ones(X.shape[0])
        for j, k in self.factors:
            out = out * X[:, j] ** k
        return out

    @property
    def degree(self) -> int:
        return sum(k for _, k in self.factors)

    @property
    def columns(self) -> frozenset[int]:
        return frozenset(j for j, _ in self.factors)

    @property
    def is_constant(self) -> bool:
        return not self.factors


def parse_term(text: str, columns: Sequence[str]) -> Term:
    """Parse a basis term over the declared ``columns``.

    >>> parse_term("x1*x2^2", ["x1", "x2"]).factors
    ((0, 1), (1, 2))
    """
    src = str(text).strip()
    if src == "1":
        return Term((), "1")
    powers: dict[int, int] = {}
    for part in src.split("*"):
        m = _FACTOR_RE.match(part)
        if m is None:
            raise SpecError(f"cannot parse basis term {text!r}")
        name, power = m.group(1), int(m.group(2) or 1)
        if name not in columns:
            raise SpecError(f"basis term {text!r} references undeclared column {name!r}")
        if power < 1:
            raise SpecError(f"basis term {text!r} has a non-positive power")
        j = list(columns).index(name)
        powers[j] = powers.get(j, 0) + power
    factors = tuple(sorted(powers.items()))
    return Term(factors, src)


def design(X: np.ndarray, terms: Sequence[Callable]) -> np.ndarray:
    """Evaluate basis ``terms`` on the rows of ``X`` into an ``(n, k)`` matrix."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if not terms:
        return np.empty((X.shape[0], 0))
    return np.column_stack([term(X) for term in terms])


# ---------------------------------------------------------------------------
# parameter vector and data
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Theta:
    """Full parameter ``(alpha, beta, gamma, xi)``; ``alpha`` is the DRM intercept."""

    alpha: float
    beta: np.ndarray
    gamma: float
    xi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "gamma", float(self.gamma))
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float)).copy()
        xi = np.atleast_1d(np.asarray(self.xi, dtype=float)).copy()
        beta.flags.writeable = False
        xi.flags.writeable = False
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "xi", xi)
        if not np.all(np.isfinite(self.to_vector())):
            raise ValueError("Theta entries must be finite")

    def __eq__(self, other):
        if not isinstance(other, Theta):
            return NotImplemented
        return (self.beta.size == other.beta.size and self.xi.size == other.xi.size
                and np.array_equal(self.to_vector(), other.to_vector()))

    def __hash__(self):
        return hash((self.beta.size, self.to_vector().tobytes()))

    @property
    def dim(self) -> int:
        return 2 + self.beta.size + self.xi.size

    def to_vector(self) -> np.ndarray:
        return np.concatenate([[self.alpha], self.beta, [self.gamma], self.xi])

    @classmethod
    def from_vector(cls, vec, d_beta: int) -> "Theta":
        vec = np.asarray(vec, dtype=float)
        return cls(vec[0], vec[1:1 + d_beta], vec[1 + d_beta], vec[2 + d_beta:])

    def replace(self, **changes) -> "Theta":
        kw = dict(alpha=self.alpha, beta=self.beta, gamma=self.gamma, xi=self.xi)
        kw.update(changes)
        return Theta(**kw)


@dataclass(frozen=True)
class Dataset:
    """Rows ``(x_i, d_i, y_i)``; ``y`` is NaN where ``d == 0``.

    ``y_full`` keeps the pre-masking responses when the data were simulated.
    """

    x: np.ndarray
    d: np.ndarray
    y: np.ndarray
    columns: tuple[str, ...] = ()
    y_full: np.ndarray | None = None

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        if x.shape[0] == 1 and np.ndim(self.x) == 1:
            x = x.T
        d = np.asarray(self.d).astype(np.int8)
        y = np.asarray(self.y, dtype=float).copy()
        n = x.shape[0]
        if d.shape != (n,) or y.shape != (n,):
            raise ValueError("x, d and y must have matching row counts")
        if not np.isin(d, (0, 1)).all():
            raise ValueError("d must be binary")
        if not np.all(np.isfinite(y[d == 1])):
            raise ValueError("y must be observed wherever d == 1")
        y[d == 0] = np.nan
        columns = tuple(self.columns) or tuple(f"x{j + 1}" for j in range(x.shape[1]))
        if len(columns) != x.shape[1]:
            raise ValueError("column names do not match the covariate matrix")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "columns", columns)
        if self.y_full is not None:
            object.__setattr__(self, "y_full", np.asarray(self.y_full, dtype=float))

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def n1(self) -> int:
        return int(self.d.sum())

    @property
    def n2(self) -> int:
        return self.n - self.n1

    @property
    def observed(self) -> np.ndarray:
        return self.d == 1

    def require_estimable(self):
        if self.n1 < 1 or self.n2 < 1:
            raise DegenerateData(
                f"need at least one observed and one missing response (n1={self.n1}, n2={self.n2})")

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        y_full = None if self.y_full is None else self.y_full[idx]
        return Dataset(self.x[idx], self.d[idx], self.y[idx], self.columns, y_full)


# ---------------------------------------------------------------------------
# outcome models
# ---------------------------------------------------------------------------

class OutcomeModel:
    """Interface for ``f(y | x, xi)``.

    Subclasses provide the log density, its score, the log tilting moment
    ``c`` with derivatives in ``(gamma, xi)`` and samplers for the observed
    and the tilted (missing-arm) conditional laws.
    """

    kind: str = "abstract"
    #: whether :meth:`c_derivatives` and :meth:`score_hessian` are exact
    analytic_hessian: bool = False

    @property
    def dim(self) -> int:
        raise NotImplementedError

    def log_density(self, y, X, xi):
        raise NotImplementedError

    def score(self, y, X, xi):
        raise NotImplementedError

    def score_hessian(self, y, X, xi):
        raise NotImplementedError

    def c(self, X, gamma, xi):
        raise NotImplementedError

    def c_derivatives(self, X, gamma, xi, order=1):
        raise NotImplementedError

    def c_hessian_sum(self, X, gamma, xi, weights):
        H = self.c_derivatives(X, gamma, xi, order=2)[2]
        return np.tensordot(np.asarray(weights, dtype=float), H, axes=1)

    def score_hessian_sum(self, y, X, xi):
        return self.score_hessian(y, X, xi).sum(axis=0)

    def first_moment(self, X, xi):
        raise NotImplementedError

    def first_moment_grad(self, X, xi):
        raise NotImplementedError

    def sample(self, X, xi, rng):
        return self.sample_tilted(X, 0.0, xi, rng)

    def sample_tilted(self, X, gamma, xi, rng):
        raise NotImplementedError


class NormalOutcome(OutcomeModel):
    """``N(mu(x, xi), sigma^2(x, xi))`` with declared bases.

    ``mu = <F_mean(x), xi_mean>`` (``mean_link="identity"``) or
    ``exp(<F_mean(x), xi_mean>)`` (``mean_link="log"``), and
    ``sigma^2 = exp(<F_logvar(x), xi_var>)``.  ``xi`` is ``(xi_mean, xi_var)``.
    """

    kind = "normal"
    analytic_hessian = True

    def __init__(self, mean_terms: Sequence[Callable], logvar_terms: Sequence[Callable],
                 mean_link: str = "identity"):
        if mean_link not in ("identity", "log"):
            raise SpecError(f"unknown mean link {mean_link!r}")
        if not logvar_terms:
            raise SpecError("the log-variance basis needs at least one term")
        self.mean_terms = tuple(mean_terms)
        self.logvar_terms = tuple(logvar_terms)
        self.mean_link = mean_link

    def __repr__(self):
        m = [getattr(t, "text", repr(t)) for t in self.mean_terms]
        v = [getattr(t, "text", repr(t)) for t in self.logvar_terms]
        return f"NormalOutcome(mean={m}, logvar={v}, mean_link={self.mean_link!r})"

    @property
    def d_mean(self) -> int:
        return len(self.mean_terms)

    @property
    def d_var(self) -> int:
        return len(self.logvar_terms)

    @property
    def dim(self) -> int:
        return self.d_mean + self.d_var

    def split(self, xi):
        xi = np.asarray(xi, dtype=float)
        return xi[:self.d_mean], xi[self.d_mean:]

    def moments(self, X, xi):
        """Return ``(mu, sigma2, dmu, Fv)``; ``dmu`` is the Jacobian of ``mu`` in ``xi_mean``."""
        xm, xv = self.split(xi)
        Fm = design(X, self.mean_terms)
        Fv = design(X, self.logvar_terms)
        lin = Fm @ xm
        if self.mean_link == "identity":
            mu, dmu = lin, Fm
        else:
            mu = np.exp(lin)
            dmu = mu[:, None] * Fm
        return mu, np.exp(Fv @ xv), dmu, Fv

    def mean(self, X, xi):
        return self.moments(X, xi)[0]

    def variance(self, X, xi):
        return self.moments(X, xi)[1]

    def log_density(self, y, X, xi):
        mu, s2, _, _ = self.moments(X, xi)
        r = np.asarray(y, dtype=float) - mu
        return -0.5 * (LOG_2PI + np.log(s2) + r * r / s2)

    def score(self, y, X, xi):
        mu, s2, dmu, Fv = self.moments(X, xi)
        r = np.asarray(y, dtype=float) - mu
        sm = (r / s2)[:, None] * dmu
        sv = -0.5 * (1.0 - r * r / s2)[:, None] * Fv
        return np.hstack([sm, sv])

    def score_hessian(self, y, X, xi):
        mu, s2, dmu, Fv = self.moments(X, xi)
        r = np.asarray(y, dtype=float) - mu
        n, dm = dmu.shape
        H = np.zeros((n, self.dim, self.dim))
        H[:, :dm, :dm] = -np.einsum("ni,nj->nij", dmu, dmu) / s2[:, None, None]
        if self.mean_link == "log":
            Fm = dmu / mu[:, None]
            H[:, :dm, :dm] += (r * mu / s2)[:, None, None] * np.einsum("ni,nj->nij", Fm, Fm)
        cross = -(r / s2)[:, None, None] * np.einsum("ni,nj->nij", dmu, Fv)
        H[:, :dm, dm:] = cross
        H[:, dm:, :dm] = np.transpose(cross, (0, 2, 1))
        H[:, dm:, dm:] = -0.5 * (r * r / s2)[:, None, None] * np.einsum("ni,nj->nij", Fv, Fv)
        return H

    def c(self, X, gamma, xi):
        mu, s2, _, _ = self.moments(X, xi)
        return gamma * mu + 0.5 * gamma * gamma * s2

    def c_derivatives(self, X, gamma, xi, order=1):
        """Return ``c`` and its derivatives in ``(gamma, xi)``.

        ``order=1`` gives ``(c, grad)`` with ``grad`` of shape ``(n, 1 + d_xi)``;
        ``order=2`` additionally returns the ``(n, 1 + d_xi, 1 + d_xi)`` Hessian.
        """
        mu, s2, dmu, Fv = self.moments(X, xi)
        g = float(gamma)
        n, dm = dmu.shape
        c = g * mu + 0.5 * g * g * s2
        grad = np.empty((n, 1 + self.dim))
        grad[:, 0] = mu + g * s2
        grad[:, 1:1 + dm] = g * dmu
        grad[:, 1 + dm:] = (0.5 * g * g * s2)[:, None] * Fv
        if order < 2:
            return c, grad
        H = np.zeros((n, 1 + self.dim, 1 + self.dim))
        H[:, 0, 0] = s2
        H[:, 0, 1:1 + dm] = dmu
        H[:, 1:1 + dm, 0] = dmu
        gv = (g * s2)[:, None] * Fv
        H[:, 0, 1 + dm:] = gv
        H[:, 1 + dm:, 0] = gv
        if self.mean_link == "log":
            Fm = dmu / mu[:, None]
            H[:, 1:1 + dm, 1:1 + dm] = (g * mu)[:, None, None] * np.einsum("ni,nj->nij", Fm, Fm)
        H[:, 1 + dm:, 1 + dm:] = (0.5 * g * g * s2)[:, None, None] * np.einsum("ni,nj->nij", Fv, Fv)
        return c, grad, H

    def c_hessian_sum(self, X, gamma, xi, weights):
        """``sum_i weights_i * Hessian of c(x_i)`` in ``(gamma, xi)`` without the ``(n, m, m)`` stack."""
        mu, s2, dmu, Fv = self.moments(X, xi)
        g = float(gamma)
        w = np.asarray(weights, dtype=float)
        dm = dmu.shape[1]
        H = np.zeros((1 + self.dim, 1 + self.dim))
        H[0, 0] = w @ s2
        H[0, 1:1 + dm] = w @ dmu
        H[0, 1 + dm:] = (w * g * s2) @ Fv
        H[1:, 0] = H[0, 1:]
        if self.mean_link == "log":
            Fm = dmu / mu[:, None]
            H[1:1 + dm, 1:1 + dm] = (Fm * (w * g * mu)[:, None]).T @ Fm
        H[1 + dm:, 1 + dm:] = (Fv * (w * 0.5 * g * g * s2)[:, None]).T @ Fv
        return H

    def score_hessian_sum(self, y, X, xi):
        """``sum_i`` of :meth:`score_hessian` without the ``(n, d, d)`` stack."""
        mu, s2, dmu, Fv = self.moments(X, xi)
        r = np.asarray(y, dtype=float) - mu
        dm = dmu.shape[1]
        H = np.zeros((self.dim, self.dim))
        H[:dm, :dm] = -(dmu / s2[:, None]).T @ dmu
        if self.mean_link == "log":
            Fm = dmu / mu[:, None]
            H[:dm, :dm] += (Fm * (r * mu / s2)[:, None]).T @ Fm
        H[:dm, dm:] = -(dmu * (r / s2)[:, None]).T @ Fv
        H[dm:, :dm] = H[:dm, dm:].T
        H[dm:, dm:] = -0.5 * (Fv * (r * r / s2)[:, None]).T @ Fv
        return H

    def first_moment(self, X, xi):
        return self.mean(X, xi)

    def first_moment_grad(self, X, xi):
        mu, s2, dmu, Fv = self.moments(X, xi)
        return np.hstack([dmu, np.zeros_like(Fv)])

    def sample_tilted(self, X, gamma, xi, rng):
        # the exponential tilt of a normal shifts its mean by gamma * sigma^2
        mu, s2, _, _ = self.moments(X, xi)
        return rng.normal(mu + gamma * s2, np.sqrt(s2))


@dataclass(frozen=True)
class Envelope:
    """Accept-reject envelope for tilted draws from a :class:`GenericOutcome`.

    ``sample(X, rng)`` proposes one value per row, ``logpdf(y, X)`` is the
    proposal log density and ``log_m`` bounds the log ratio of the tilted
    target to the proposal.
    """

    sample: Callable
    logpdf: Callable
    log_m: float


class GenericOutcome(OutcomeModel):
    """A user-supplied density integrated by 64-node Gauss-Hermite quadrature.

    Parameters
    ----------
    logpdf : callable
        ``logpdf(y, X, xi)`` with ``y`` of shape ``(n,)`` or ``(n, k)``
        returning log densities of matching shape.
    dim : int
        Length of ``xi``.
    loc_scale : callable
        ``loc_scale(X, xi) -> (loc, scale)`` standardising hint per row.
    envelope : Envelope, optional
        Needed only for :meth:`sample_tilted` with ``gamma != 0`` when no
        ``sampler`` is given.
    sampler : callable, optional
        ``sampler(X, xi, rng)`` drawing from ``f`` directly.
    """

    kind = "generic"
    analytic_hessian = False

    def __init__(self, logpdf, dim, loc_scale, envelope=None, sampler=None):
        self._logpdf = logpdf
        self._dim = int(dim)
        self._loc_scale = loc_scale
        self.envelope = envelope
        self.sampler = sampler

    @property
    def dim(self) -> int:
        return self._dim

    def log_density(self, y, X, xi):
        return np.asarray(self._logpdf(np.asarray(y, dtype=float), X, np.asarray(xi, float)))

    def _nodes(self, X, xi):
        loc, scale = self._loc_scale(X, np.asarray(xi, float))
        loc = np.broadcast_to(np.asarray(loc, float), (np.shape(X)[0],))
        scale = np.broadcast_to(np.asarray(scale, float), (np.shape(X)[0],))
        y = loc[:, None] + math.sqrt(2.0) * scale[:, None] * _GH_Z[None, :]
        base = np.log(math.sqrt(2.0) * scale)[:, None] + _GH_LOGW[None, :]
        return y, base + self.log_density(y, X, xi)

    def _tilt(self, X, gamma, xi):
        y, logw = self._nodes(X, xi)
        logw = logw + gamma * y
        c = logsumexp(logw, axis=1)
        if not np.all(np.isfinite(c)):
            bad = int(np.flatnonzero(~np.isfinite(c))[0])
            raise TiltDivergence(np.asarray(X)[bad])
        # mass on the outermost nodes means the tilted integrand is not decaying
        edge = np.maximum(logw[:, 0], logw[:, -1]) - c
        if np.any(edge > math.log(1e-6)):
            bad = int(np.argmax(edge))
            raise TiltDivergence(np.asarray(X)[bad])
        return y, np.exp(logw - c[:, None]), c

    def c(self, X, gamma, xi):
        return self._tilt(X, gamma, xi)[2]

    def tilted_mean(self, X, gamma, xi):
        y, w, _ = self._tilt(X, gamma, xi)
        return np.sum(w * y, axis=1)

    def c_derivatives(self, X, gamma, xi, order=1):
        if order > 1:
            raise NotImplementedError("GenericOutcome has no analytic Hessian of c")
        xi = np.asarray(xi, dtype=float)
        y, w, c = self._tilt(X, gamma, xi)
        grad = np.empty((c.size, 1 + self.dim))
        grad[:, 0] = np.sum(w * y, axis=1)
        for j in range(self.dim):
            h = FD_STEP * (1.0 + abs(xi[j]))
            e = np.zeros_like(xi)
            e[j] = h
            grad[:, 1 + j] = (self.c(X, gamma, xi + e) - self.c(X, gamma, xi - e)) / (2 * h)
        return c, grad

    def score(self, y, X, xi):
        xi = np.asarray(xi, dtype=float)
        out = np.empty((np.shape(X)[0], self.dim))
        for j in range(self.dim):
            h = FD_STEP * (1.0 + abs(xi[j]))
            e = np.zeros_like(xi)
            e[j] = h
            out[:, j] = (self.log_density(y, X, xi + e) - self.log_density(y, X, xi - e)) / (2 * h)
        return out

    def first_moment(self, X, xi):
        return self.tilted_mean(X, 0.0, xi)

    def first_moment_grad(self, X, xi):
        xi = np.asarray(xi, dtype=float)
        out = np.empty((np.shape(X)[0], self.dim))
        for j in range(self.dim):
            h = FD_STEP * (1.0 + abs(xi[j]))
            e = np.zeros_like(xi)
            e[j] = h
            out[:, j] = (self.first_moment(X, xi + e) - self.first_moment(X, xi - e)) / (2 * h)
        return out

    def sample(self, X, xi, rng):
        if self.sampler is not None:
            return np.asarray(self.sampler(X, np.asarray(xi, float), rng), dtype=float)
        return self.sample_tilted(X, 0.0, xi, rng)

    def sample_tilted(self, X, gamma, xi, rng):
        if gamma == 0.0 and self.sampler is not None:
            return self.sample(X, xi, rng)
        if self.envelope is None:
            raise SamplingError("tilted sampling from a generic density needs an envelope")
        X = np.atleast_2d(np.asarray(X, dtype=float))
        c = self.c(X, gamma, xi)
        out = np.full(X.shape[0], np.nan)
        todo = np.arange(X.shape[0])
        used = 0
        batch = 1
        while used < MAX_PROPOSALS:
            # `batch` proposals per pending row; the first accepted one is kept,
            # which is the same law as proposing one at a time
            b = min(batch, MAX_PROPOSALS - used)
            rows = np.repeat(todo, b)
            Xt = X[rows]
            cand = np.asarray(self.envelope.sample(Xt, rng), dtype=float)
            log_target = gamma * cand - c[rows] + self.log_density(cand, Xt, xi)
            log_ratio = log_target - self.envelope.logpdf(cand, Xt) - self.envelope.log_m
            ok = (np.log(rng.uniform(size=rows.size)) <= log_ratio).reshape(todo.size, b)
            hit = ok.any(axis=1)
            first = np.argmax(ok, axis=1)
            out[todo[hit]] = cand.reshape(todo.size, b)[hit, first[hit]]
            todo = todo[~hit]
            used += b
            if todo.size == 0:
                return out
            batch = min(2 * batch, max(1, 2**16 // todo.size))
        raise SamplingError(f"envelope exhausted after {MAX_PROPOSALS} proposals")


# ---------------------------------------------------------------------------
# full model specification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    """Covariate columns, propensity covariates and outcome model.

    ``propensity`` lists the column indices entering ``x_p' beta``.
    ``instrument`` optionally names a column declared as an instrument.
    """

    columns: tuple[str, ...]
    propensity: tuple[int, ...]
    outcome: OutcomeModel
    instrument: str | None = None
    mean_text: tuple[str, ...] = field(default=(), compare=False)
    logvar_text: tuple[str, ...] = field(default=(), compare=False)

    @classmethod
    def normal(cls, columns, propensity, mean, logvar, mean_link="identity", instrument=None):
        """Build a normal-family spec from basis-term strings.

        >>> spec = ModelSpec.normal(["x"], ["x"], ["1", "x", "x^2"], ["1", "x"])
        >>> spec.dim
        7
        """
        columns = tuple(columns)
        prop = []
        for name in propensity:
            if name not in columns:
                raise SpecError(f"propensity covariate {name!r} is not a declared column")
            prop.append(columns.index(name))
        if instrument is not None and instrument not in columns:
            raise SpecError(f"instrument {instrument!r} is not a declared column")
        mean_terms = [parse_term(s, columns) for s in mean]
        logvar_terms = [parse_term(s, columns) for s in logvar]
        outcome = NormalOutcome(mean_terms, logvar_terms, mean_link)
        return cls(columns, tuple(prop), outcome, instrument,
                   tuple(t.text for t in mean_terms), tuple(t.text for t in logvar_terms))

    @property
    def d_beta(self) -> int:
        return len(self.propensity)

    @property
    def d_xi(self) -> int:
        return self.outcome.dim

    @property
    def dim(self) -> int:
        return 2 + self.d_beta + self.d_xi

    def xp(self, X) -> np.ndarray:
        return np.atleast_2d(np.asarray(X, dtype=float))[:, list(self.propensity)]

    def split(self, vec):
        """Split a flat parameter vector into ``(alpha, beta, gamma, xi)``."""
        vec = np.asarray(vec, dtype=float)
        k = self.d_beta
        return vec[0], vec[1:1 + k], vec[1 + k], vec[2 + k:]

    def theta(self, vec) -> Theta:
        return Theta.from_vector(vec, self.d_beta)


# ---------------------------------------------------------------------------
# vectorised building blocks
# ---------------------------------------------------------------------------

def t_values(vec, X, spec: ModelSpec) -> np.ndarray:
    """``t(x_i, theta)`` for every row of ``X``; ``vec`` is a flat parameter."""
    alpha, beta, gamma, xi = spec.split(vec)
    return alpha + spec.xp(X) @ beta + spec.outcome.c(X, gamma, xi)


def t_derivatives(vec, X, spec: ModelSpec, order=1):
    """``t`` with its gradient ``(n, d_theta)`` and, for ``order=2``, the Hessian.

    The Hessian is returned for the trailing ``(gamma, xi)`` block only, of
    shape ``(n, 1 + d_xi, 1 + d_xi)``; ``t`` is linear in ``(alpha, beta)``.
    """
    alpha, beta, gamma, xi = spec.split(vec)
    Xp = spec.xp(X)
    res = spec.outcome.c_derivatives(X, gamma, xi, order=order)
    c, cgrad = res[0], res[1]
    t = alpha + Xp @ beta + c
    grad = np.hstack([np.ones((Xp.shape[0], 1)), Xp, cgrad])
    if order < 2:
        return t, grad
    return t, grad, res[2]


def log_odds_shift(eta: float) -> float:
    """``log((1 - eta) / eta)``, the offset turning ``t`` into the logit of ``pi``."""
    if not 0.0 < eta < 1.0:
        raise ValueError("eta must lie in (0, 1)")
    return math.log1p(-eta) - math.log(eta)


def marginal_propensity(t, eta):
    """``pi = (1-eta) e^t / (eta + (1-eta) e^t)``, evaluated as a logistic."""
    return expit(np.asarray(t, dtype=float) + log_odds_shift(eta))


# ---------------------------------------------------------------------------
# single-row operations
# ---------------------------------------------------------------------------

def _row(x) -> np.ndarray:
    return np.atleast_1d(np.asarray(x, dtype=float))[None, :]


def _vec(theta) -> np.ndarray:
    return theta.to_vector() if isinstance(theta, Theta) else np.asarray(theta, dtype=float)


def c_fun(x, gamma: float, xi, model: OutcomeModel) -> float:
    """``log of the integral of exp(gamma*y) f(y|x, xi) dy``."""
    val = float(model.c(_row(x), float(gamma), np.asarray(xi, float))[0])
    if not math.isfinite(val):
        raise TiltDivergence(x)
    return val


def t_fun(x, theta, spec: ModelSpec) -> float:
    return float(t_values(_vec(theta), _row(x), spec)[0])


def propensity_marginal(x, theta, eta: float, spec: ModelSpec) -> float:
    """``pr(D = 0 | X = x)`` implied by ``(theta, eta)``."""
    return float(marginal_propensity(t_fun(x, theta, spec), eta))


def alpha_star(theta, eta: float) -> float:
    """Intercept of the logistic propensity: ``alpha - log(eta / (1 - eta))``."""
    alpha = theta.alpha if isinstance(theta, Theta) else float(np.asarray(theta)[0])
    return alpha + log_odds_shift(eta)


def log_f(y: float, x, xi, model: OutcomeModel) -> float:
    return float(model.log_density(np.array([y], float), _row(x), np.asarray(xi, float))[0])


def score_xi(y: float, x, xi, model: OutcomeModel) -> np.ndarray:
    """Gradient of ``log f(y | x, xi)`` in ``xi``."""
    return model.score(np.array([y], float), _row(x), np.asarray(xi, float))[0]


def grad_t(x, theta, spec: ModelSpec) -> np.ndarray:
    """``(1, x_p, dc/dgamma, dc/dxi)``."""
    return t_derivatives(_vec(theta), _row(x), spec)[1][0]


def tilted_outcome_sampler(x, theta, spec: ModelSpec, rng, size=None):
    """Draw ``y`` from the missing-arm law ``exp(gamma*y - c) f(y|x, xi)``."""
    _, _, gamma, xi = spec.split(_vec(theta))
    k = 1 if size is None else int(size)
    X = np.repeat(_row(x), k, axis=0)
    draws = spec.outcome.sample_tilted(X, gamma, xi, rng)
    return float(draws[0]) if size is None else draws
