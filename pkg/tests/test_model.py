import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from mnarel.errors import SamplingError, SpecError, TiltDivergence
from mnarel.model import (
    Dataset, Envelope, GenericOutcome, ModelSpec, NormalOutcome, Theta, alpha_star, c_fun,
    grad_t, log_f, parse_term, propensity_marginal, score_xi, t_derivatives, t_fun,
    tilted_outcome_sampler,
)


def const_normal(mu, s2):
    """Spec with a single covariate and intercept-only mean/log-variance."""
    return ModelSpec.normal(["x"], ["x"], ["1"], ["1"]), np.array([mu, math.log(s2)])


def std_normal_generic():
    return GenericOutcome(lambda y, X, xi: stats.norm.logpdf(y), 0,
                          loc_scale=lambda X, xi: (np.zeros(len(X)), np.ones(len(X))))


def quad_c(gamma, mu, s2):
    """Oracle: log of the tilted integral by adaptive quadrature."""
    sd = math.sqrt(s2)
    val, _ = integrate.quad(lambda y: math.exp(gamma * y) * stats.norm.pdf(y, mu, sd),
                            mu - 40 * sd, mu + 40 * sd, limit=200, epsabs=0, epsrel=1e-13)
    return math.log(val)


# ---------------------------------------------------------------------------
# basis terms and containers
# ---------------------------------------------------------------------------

def test_parse_term_grammar():
    cols = ["x1", "x2"]
    assert parse_term("1", cols).is_constant
    assert parse_term("x1^2", cols).degree == 2
    t = parse_term("x1*x2", cols)
    assert t.factors == ((0, 1), (1, 1))
    X = np.array([[2.0, 3.0]])
    assert t(X)[0] == 6.0
    assert parse_term("x2^3", cols)(X)[0] == 27.0


@pytest.mark.parametrize("bad", ["x3", "x1^", "2*x1", "x1+x2", ""])
def test_parse_term_rejects(bad):
    with pytest.raises(SpecError):
        parse_term(bad, ["x1", "x2"])


def test_theta_roundtrip_and_dim():
    th = Theta(0.1, np.array([0.2, 0.3]), 0.4, np.array([1.0, 2.0, 3.0]))
    assert th.dim == 2 + 2 + 3
    assert Theta.from_vector(th.to_vector(), 2) == th


def test_spec_dimension():
    spec = ModelSpec.normal(["x"], ["x"], ["1", "x", "x^2"], ["1", "x"])
    assert spec.d_xi == 5 and spec.dim == 2 + 1 + 5


def test_dataset_rejects_inconsistent_missingness():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1)), np.array([1, 0]), np.array([np.nan, 1.0]), ("x",))


# ---------------------------------------------------------------------------
# c_fun
# ---------------------------------------------------------------------------

def test_c_fun_zero_tilt():
    spec, xi = const_normal(3.0, 2.0)
    assert c_fun([0.5], 0.0, xi, spec.outcome) == 0.0


def test_c_fun_normal_example():
    spec, xi = const_normal(1.0, 2.0)
    got = c_fun([0.0], 0.5, xi, spec.outcome)
    assert got == pytest.approx(0.75, abs=1e-14)
    assert got == pytest.approx(quad_c(0.5, 1.0, 2.0), rel=1e-10)


def test_c_fun_generic_standard_normal():
    out = std_normal_generic()
    assert c_fun([0.0], 1.0, np.array([]), out) == pytest.approx(0.5, rel=1e-10)


def test_c_fun_generic_divergence_raises():
    # Cauchy tails: the tilted integral does not exist for gamma != 0
    out = GenericOutcome(lambda y, X, xi: stats.cauchy.logpdf(y), 0,
                         loc_scale=lambda X, xi: (np.zeros(len(X)), np.ones(len(X))))
    with pytest.raises(TiltDivergence) as info:
        c_fun([1.5], 1.0, np.array([]), out)
    assert np.allclose(info.value.x, [1.5])


@settings(max_examples=60, deadline=None)
@given(gamma=st.floats(-2, 2), mu=st.floats(-5, 5), s2=st.floats(0.05, 10))
def test_c_fun_closed_form_matches_quadrature(gamma, mu, s2):
    spec, xi = const_normal(mu, s2)
    closed = c_fun([0.0], gamma, xi, spec.outcome)
    g, w = np.polynomial.hermite.hermgauss(64)
    quad = math.log(np.sum(w * np.exp(gamma * (mu + math.sqrt(2 * s2) * g))) / math.sqrt(math.pi))
    assert closed == pytest.approx(quad, rel=1e-8, abs=1e-12)


# ---------------------------------------------------------------------------
# t_fun, propensity, alpha*
# ---------------------------------------------------------------------------

def test_t_fun_vanishes_at_zero_theta():
    spec = ModelSpec.normal(["x"], ["x"], ["1", "x"], ["1"])
    th = Theta(0.0, np.zeros(1), 0.0, np.array([0.7, -0.2, 0.3]))
    for x in (-3.0, 0.0, 5.0):
        assert t_fun([x], th, spec) == 0.0


def test_t_fun_linear_part():
    spec = ModelSpec.normal(["x"], ["x"], ["1"], ["1"])
    th = Theta(1.0, np.array([2.0]), 0.0, np.array([5.0, 0.0]))
    assert t_fun([3.0], th, spec) == pytest.approx(7.0)


def test_t_fun_with_tilt():
    spec = ModelSpec.normal(["x"], ["x"], ["1"], ["1"])
    th = Theta(-1.0, np.array([0.5]), 0.5, np.array([1.0, math.log(2.0)]))
    assert t_fun([2.0], th, spec) == pytest.approx(0.75, abs=1e-14)


def _theta_with_t(t):
    spec = ModelSpec.normal(["x"], ["x"], ["1"], ["1"])
    return spec, Theta(float(t), np.zeros(1), 0.0, np.array([0.0, 0.0]))


@pytest.mark.parametrize("eta,expected", [(0.5, 0.5), (0.7, 0.3)])
def test_propensity_at_zero_t(eta, expected):
    spec, th = _theta_with_t(0.0)
    assert propensity_marginal([0.0], th, eta, spec) == pytest.approx(expected, abs=1e-15)


def test_propensity_no_overflow():
    spec, th = _theta_with_t(1e4)
    p = propensity_marginal([0.0], th, 0.5, spec)
    assert p == 1.0 and not math.isnan(p)
    spec, th = _theta_with_t(-1e4)
    assert propensity_marginal([0.0], th, 0.5, spec) == 0.0


@settings(max_examples=50, deadline=None)
@given(t1=st.floats(-30, 30), dt=st.floats(1e-3, 5), eta=st.floats(0.01, 0.99))
def test_propensity_monotone_in_t(t1, dt, eta):
    spec, a = _theta_with_t(t1)
    _, b = _theta_with_t(t1 + dt)
    pa = propensity_marginal([0.0], a, eta, spec)
    pb = propensity_marginal([0.0], b, eta, spec)
    assert 0.0 <= pa <= pb <= 1.0
    if abs(t1) < 20:
        assert 0.0 < pa < pb < 1.0


def test_alpha_star_examples():
    th = lambda a: Theta(a, np.zeros(0), 0.0, np.zeros(0))  # noqa: E731
    assert alpha_star(th(0.0), 0.5) == 0.0
    assert alpha_star(th(1.0), 0.5) == 1.0
    assert alpha_star(th(0.3), 0.75) == pytest.approx(0.3 - math.log(3.0), abs=1e-14)
    assert alpha_star(th(0.3), 0.75) == pytest.approx(-0.7986, abs=1e-4)


# ---------------------------------------------------------------------------
# log_f and score
# ---------------------------------------------------------------------------

def test_log_f_examples():
    spec, xi = const_normal(0.0, 1.0)
    assert log_f(0.0, [0.0], xi, spec.outcome) == pytest.approx(-0.5 * math.log(2 * math.pi))
    spec, xi = const_normal(1.0, 4.0)
    got = log_f(3.0, [0.0], xi, spec.outcome)
    assert got == pytest.approx(-0.5 * math.log(8 * math.pi) - 0.5, abs=1e-14)
    assert got == pytest.approx(-2.1121, abs=1e-4)
    assert got == pytest.approx(stats.norm.logpdf(3.0, 1.0, 2.0), abs=1e-14)


def test_log_f_integrates_to_one():
    spec = ModelSpec.normal(["x"], ["x"], ["1", "x"], ["1", "x"])
    xi = np.array([0.3, 1.2, -0.1, 0.4])
    for x in (-1.0, 0.5, 2.0):
        val, _ = integrate.quad(lambda y: math.exp(log_f(y, [x], xi, spec.outcome)),
                                -np.inf, np.inf)
        assert val == pytest.approx(1.0, abs=1e-9)


def test_score_at_mean():
    spec = ModelSpec.normal(["x"], ["x"], ["1", "x"], ["1", "x"])
    xi = np.array([0.3, 1.2, -0.1, 0.4])
    x = 0.8
    mu = 0.3 + 1.2 * x
    s = score_xi(mu, [x], xi, spec.outcome)
    assert np.allclose(s[:2], 0.0)
    assert np.allclose(s[2:], -0.5 * np.array([1.0, x]))


def test_score_standard_normal():
    spec, xi = const_normal(0.0, 1.0)
    assert score_xi(1.0, [0.0], xi, spec.outcome)[0] == pytest.approx(1.0)


def _fd(fun, v, h=1e-6):
    out = []
    for j in range(v.size):
        e = np.zeros_like(v)
        e[j] = h * (1 + abs(v[j]))
        out.append((fun(v + e) - fun(v - e)) / (2 * e[j]))
    return np.array(out).T


@pytest.mark.parametrize("link", ["identity", "log"])
def test_score_matches_finite_differences(link):
    rng = np.random.default_rng(11)
    spec = ModelSpec.normal(["x1", "x2"], ["x1"], ["1", "x1", "x2^2"], ["1", "x2"], mean_link=link)
    worst = 0.0
    for _ in range(100):
        x = rng.uniform(-1, 1, 2)
        xi = rng.normal(0, 0.5, 5)
        y = rng.normal(1, 1)
        a = score_xi(y, x, xi, spec.outcome)
        n = _fd(lambda v: log_f(y, x, v, spec.outcome), xi)
        worst = max(worst, np.max(np.abs(a - n)) / max(1.0, np.max(np.abs(n))))
    assert worst < 1e-6


@pytest.mark.parametrize("link", ["identity", "log"])
def test_grad_t_matches_finite_differences(link):
    rng = np.random.default_rng(12)
    spec = ModelSpec.normal(["x1", "x2"], ["x1", "x2"], ["1", "x1", "x1*x2"], ["1", "x1"],
                            mean_link=link)
    worst = 0.0
    for _ in range(100):
        x = rng.uniform(-1, 1, 2)
        v = rng.normal(0, 0.5, spec.dim)
        a = grad_t(x, spec.theta(v), spec)
        n = _fd(lambda w: t_fun(x, spec.theta(w), spec), v)
        assert a[0] == 1.0
        worst = max(worst, np.max(np.abs(a - n)) / max(1.0, np.max(np.abs(n))))
    assert worst < 1e-5


def test_grad_t_at_zero_tilt():
    spec = ModelSpec.normal(["x"], ["x"], ["1", "x"], ["1"])
    th = Theta(0.2, np.array([0.1]), 0.0, np.array([0.5, 2.0, 0.3]))
    g = grad_t([1.5], th, spec)
    assert np.allclose(g, [1.0, 1.5, 0.5 + 2.0 * 1.5, 0.0, 0.0, 0.0])


def test_t_hessian_matches_finite_differences():
    rng = np.random.default_rng(13)
    spec = ModelSpec.normal(["x"], ["x"], ["1", "x", "x^2"], ["1", "x"])
    X = rng.normal(size=(20, 1))
    v = rng.normal(0, 0.3, spec.dim)
    _, gt, Hc = t_derivatives(v, X, spec, order=2)
    m = 1 + spec.d_xi
    for i in range(3):
        num = _fd(lambda w: t_derivatives(w, X[i:i + 1], spec)[1][0], v)
        assert np.allclose(num[-m:, -m:], Hc[i], atol=1e-6)


# ---------------------------------------------------------------------------
# tilted sampler
# ---------------------------------------------------------------------------

def test_sampler_zero_tilt_matches_f():
    spec, xi = const_normal(0.3, 2.0)
    th = Theta(0.0, np.zeros(1), 0.0, xi)
    y = tilted_outcome_sampler([0.0], th, spec, np.random.default_rng(1), size=200_000)
    assert stats.kstest(y, stats.norm(0.3, math.sqrt(2.0)).cdf).statistic < 0.01


@pytest.mark.parametrize("mu,s2,gamma,target,tol", [(0.0, 1.0, 0.5, 0.5, 0.01),
                                                    (1.0, 4.0, 0.25, 2.0, 0.02)])
def test_sampler_tilted_mean(mu, s2, gamma, target, tol):
    spec, xi = const_normal(mu, s2)
    th = Theta(0.0, np.zeros(1), gamma, xi)
    y = tilted_outcome_sampler([0.0], th, spec, np.random.default_rng(2), size=10**6)
    assert abs(y.mean() - target) < tol
    se_mean = math.sqrt(s2 / y.size)
    se_var = s2 * math.sqrt(2.0 / (y.size - 1))
    assert abs(y.mean() - (mu + gamma * s2)) < 4 * se_mean
    assert abs(y.var(ddof=1) - s2) < 4 * se_var
    # importance-weighted oracle on untilted draws
    z = np.random.default_rng(3).normal(mu, math.sqrt(s2), 10**6)
    w = np.exp(gamma * z)
    assert abs(np.sum(w * z) / w.sum() - y.mean()) < 6 * tol


def test_generic_sampler_tilted_mean():
    # N(1, 1) tilted target under a Cauchy(1, 2) proposal; sup ratio is about 2.9
    env = Envelope(sample=lambda X, rng: rng.standard_cauchy(len(X)) * 2.0 + 1.0,
                   logpdf=lambda y, X: stats.cauchy.logpdf(y, 1.0, 2.0), log_m=math.log(4.0))
    out = GenericOutcome(lambda y, X, xi: stats.norm.logpdf(y), 0,
                         loc_scale=lambda X, xi: (np.zeros(len(X)), np.ones(len(X))),
                         envelope=env)
    spec = ModelSpec(("x",), (0,), out)
    th = Theta(0.0, np.zeros(1), 1.0, np.zeros(0))
    y = tilted_outcome_sampler([0.0], th, spec, np.random.default_rng(4), size=50_000)
    assert abs(y.mean() - 1.0) < 4 / math.sqrt(y.size)


def test_generic_sampler_exhaustion():
    # an envelope far from the target never accepts
    env = Envelope(sample=lambda X, rng: rng.normal(1e3, 1.0, len(X)),
                   logpdf=lambda y, X: stats.norm.logpdf(y, 1e3, 1.0), log_m=0.0)
    out = GenericOutcome(lambda y, X, xi: stats.norm.logpdf(y), 0,
                         loc_scale=lambda X, xi: (np.zeros(len(X)), np.ones(len(X))),
                         envelope=env)
    spec = ModelSpec(("x",), (0,), out)
    th = Theta(0.0, np.zeros(1), 0.5, np.zeros(0))
    with pytest.raises(SamplingError):
        tilted_outcome_sampler([0.0], th, spec, np.random.default_rng(5), size=1)
