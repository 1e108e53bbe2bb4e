import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mnarel.errors import SpecError
from mnarel.identifiability import (
    IDENTIFIABLE, NOT_IDENTIFIABLE, ONLY_IF_GAMMA_ZERO, RULES, STATUSES, UNKNOWN,
    IdentifiabilityVerdict, check, check_instrument, check_linear_independence,
    check_normal_family, instrument_candidates,
)
from mnarel.likelihood import ell2
from mnarel.model import GenericOutcome, ModelSpec, Theta
from mnarel.simulation import IndependentNormals, custom_scenario, generate, preset


def one_x(mean, logvar=("1",), propensity=("x",)):
    return ModelSpec.normal(["x"], list(propensity), list(mean), list(logvar))


# ---------------------------------------------------------------------------
# instrument rule
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("example", [1, 2])
def test_instrument_examples(example):
    spec = preset(example).fit_spec
    v = check_instrument(spec, spec.columns.index("z"))
    assert (v.status, v.rule) == (IDENTIFIABLE, "InstrumentVariable")


def test_instrument_in_propensity_is_unknown():
    spec = ModelSpec.normal(["z", "u"], ["z", "u"], ["1", "u", "z"], ["1"])
    v = check_instrument(spec, 0)
    assert (v.status, v.rule) == (UNKNOWN, "NoRuleApplies")


def test_instrument_absent_from_outcome_is_unknown():
    spec = ModelSpec.normal(["z", "u"], ["u"], ["1", "u"], ["1"])
    assert check_instrument(spec, 0).status == UNKNOWN


def test_instrument_in_variance_only():
    spec = ModelSpec.normal(["z", "u"], ["u"], ["1", "u"], ["1", "z"])
    assert check_instrument(spec, 0).status == IDENTIFIABLE


def test_instrument_index_out_of_range():
    spec = preset(2).fit_spec
    with pytest.raises(SpecError):
        check_instrument(spec, 5)
    with pytest.raises(SpecError):
        check_instrument(spec, -1)


def test_instrument_candidates():
    assert instrument_candidates(preset(1).fit_spec) == [0]
    spec = ModelSpec.normal(["z", "u", "w"], ["u"], ["1", "u", "z", "w"], ["1"])
    assert instrument_candidates(spec) == [0, 2]


# ---------------------------------------------------------------------------
# normal-family rules
# ---------------------------------------------------------------------------

def test_normal_case_one():
    v = check_normal_family(preset(3).fit_spec)
    assert (v.status, v.rule) == (IDENTIFIABLE, "NormalCaseI")


def test_normal_case_two():
    v = check_normal_family(one_x(["1", "x"]))
    assert (v.status, v.rule) == (NOT_IDENTIFIABLE, "NormalCaseII")


def test_normal_case_three():
    spec = one_x(["1", "x"], ["1", "x"])
    v = check_normal_family(spec)
    assert (v.status, v.rule) == (ONLY_IF_GAMMA_ZERO, "NormalCaseIII")
    assert check_normal_family(spec, gamma_zero_hypothesis=True).status == IDENTIFIABLE


@pytest.mark.parametrize("mean,logvar", [
    (["1", "x", "x^3"], ["1"]),
    (["1", "x"], ["1", "x^2"]),
])
def test_normal_other_shapes_unknown(mean, logvar):
    assert check_normal_family(one_x(mean, logvar)).status == UNKNOWN


def test_normal_family_rejects_generic_outcome():
    out = GenericOutcome(lambda y, X, xi: -0.5 * y**2, 1, lambda X, xi: (0.0, 1.0))
    spec = ModelSpec(("x",), (0,), out)
    with pytest.raises(SpecError):
        check_normal_family(spec)
    with pytest.raises(SpecError):
        check_linear_independence(spec, np.zeros((10, 1)))
    assert check(spec).status == UNKNOWN


# ---------------------------------------------------------------------------
# linear independence rule
# ---------------------------------------------------------------------------

def test_monomials_independent():
    pts = np.linspace(-1, 1, 100)[:, None]
    v = check_linear_independence(one_x(["1", "x", "x^2"]), pts)
    assert (v.status, v.rule) == (IDENTIFIABLE, "LinearIndependenceBasis")


def test_duplicated_feature_unknown():
    pts = np.linspace(-1, 1, 100)[:, None]
    v = check_linear_independence(one_x(["1", "x", "x^2", "x^2"]), pts)
    assert v.status == UNKNOWN


def test_example3_on_normal_draws():
    pts = np.random.default_rng(0).normal(2.0, 1.0, size=(100, 1))
    spec = preset(3).fit_spec
    v = check_linear_independence(spec, pts)
    assert v.status == IDENTIFIABLE
    # SVD oracle on the same evaluation matrix {1, x, x^2, exp(1 + x)}
    x = pts[:, 0]
    M = np.column_stack([np.ones(100), x, x**2, np.exp(1 + x)])
    s = np.linalg.svd(M, compute_uv=False)
    assert s[-1] / s[0] > 1e-8


def test_insufficient_points():
    with pytest.raises(SpecError):
        check_linear_independence(one_x(["1", "x", "x^2"]), np.array([[0.0], [1.0], [2.0]]))


def test_constant_variance_linear_mean_has_nothing_to_test():
    pts = np.linspace(-1, 1, 20)[:, None]
    assert check_linear_independence(one_x(["1", "x"]), pts).status == UNKNOWN


# ---------------------------------------------------------------------------
# combined check and invariants
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("example,sigma2", [(1, 1), (1, 4), (2, 1), (2, 4), (3, 1), (3, "e0.7")])
def test_preset_scenarios_identifiable(example, sigma2):
    assert check(preset(example, sigma2).fit_spec).status == IDENTIFIABLE


def test_verdict_validation():
    with pytest.raises(ValueError):
        IdentifiabilityVerdict(UNKNOWN, "NormalCaseI", "")
    with pytest.raises(ValueError):
        IdentifiabilityVerdict(IDENTIFIABLE, "NoRuleApplies", "")
    with pytest.raises(ValueError):
        IdentifiabilityVerdict("Maybe", "NormalCaseI", "")


POOL_MEAN = ["x", "w", "x^2", "x*w", "w^2", "x^3"]
POOL_VAR = ["x", "w", "x^2"]


@settings(max_examples=80, deadline=None)
@given(mean=st.lists(st.sampled_from(POOL_MEAN), unique=True, max_size=4),
       var=st.lists(st.sampled_from(POOL_VAR), unique=True, max_size=2),
       prop=st.sampled_from([["x"], ["w"], ["x", "w"]]),
       gz=st.booleans())
def test_verdicts_well_formed_and_deterministic(mean, var, prop, gz):
    spec = ModelSpec.normal(["x", "w"], prop, ["1", *mean], ["1", *var])
    pts = np.random.default_rng(1).normal(size=(60, 2))
    a = check(spec, pts, gz)
    b = check(spec, pts, gz)
    assert a == b
    assert a.status in STATUSES and a.rule in RULES
    assert (a.status == UNKNOWN) == (a.rule == "NoRuleApplies")


def test_not_identifiable_witness():
    # t = alpha + beta x + gamma (b0 + b1 x) + gamma^2 / 2 is unchanged when gamma
    # moves and alpha, beta absorb the difference
    spec = one_x(["1", "x"])
    b0, b1 = 0.5, 1.2
    xi = np.array([b0, b1, 0.0])

    def absorbed(gamma, alpha0=-0.8, beta0=0.3, gamma0=0.4):
        alpha = alpha0 + gamma0 * b0 + 0.5 * gamma0**2 - gamma * b0 - 0.5 * gamma**2
        beta = beta0 + gamma0 * b1 - gamma * b1
        return Theta(alpha, np.array([beta]), gamma, xi)

    th1, th2 = absorbed(0.4), absorbed(-0.9)
    assert th1 != th2
    for src in (th1, th2):
        sc = custom_scenario(["x"], IndependentNormals(1), src.alpha, src.beta, src.gamma, spec,
                             xi, 800)
        data = generate(sc, 3)
        l1, l2 = ell2(th1, data, spec), ell2(th2, data, spec)
        assert math.isfinite(l1)
        assert abs(l1 - l2) < 1e-6
