"""Semiparametric estimation of a response mean under nonignorable missingness.

The propensity of a missing response is logistic in the covariates and the
response itself; the covariate distribution of the respondents is left
nonparametric and profiled out by empirical likelihood.
"""
from .errors import (
    BootstrapFailure, DegenerateData, InfeasibleMultiplier, MnarelError, NoInteriorRoot,
    NonConvergence, SamplingError, SingularVhat, SpecError, TiltDivergence,
)
from .estimation import FitResult, K_fun, bic, fit_mle, lr_stat, mu_hat, sigma2_hat, v_hat
from .identifiability import (
    IdentifiabilityVerdict, check, check_instrument, check_linear_independence,
    check_normal_family,
)
from .inference import (
    BootstrapResult, IntervalEstimate, bootstrap, lr_test, wald_ci_mu, wald_ci_theta,
)
from .likelihood import el_state, ell1, ell2, fhat_cdf, solve_lambda
from .model import (
    Dataset, GenericOutcome, ModelSpec, NormalOutcome, Theta, alpha_star, c_fun, log_f,
    propensity_marginal, score_xi, t_fun,
)
from .simulation import (
    MCOptions, MCReport, ScenarioSpec, generate, population_truth, preset, run_mc, true_mu_eta,
)

__version__ = "0.1.0"
