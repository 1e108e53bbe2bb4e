"""
When is the tilted model identifiable?
======================================

The checker reads the declared bases and reports which rule, if any,
guarantees identifiability.  For a model it rejects, two different
parameter vectors give exactly the same likelihood.
"""

import numpy as np

from mnarel import ModelSpec, Theta, check, ell2, generate, preset
from mnarel.simulation import IndependentNormals, custom_scenario

specs = {
    "preset 1 (instrument z)": preset(1).fit_spec,
    "preset 3 (quadratic mean)": preset(3).fit_spec,
    "linear mean, constant variance": ModelSpec.normal(["x"], ["x"], ["1", "x"], ["1"]),
    "linear mean, log-linear variance": ModelSpec.normal(["x"], ["x"], ["1", "x"], ["1", "x"]),
    "cubic mean": ModelSpec.normal(["x"], ["x"], ["1", "x", "x^3"], ["1"]),
}
for label, spec in specs.items():
    v = check(spec)
    print(f"{label:34s} {v.status:28s} {v.rule}")

# the cubic mean falls outside the syntactic rules; a rank test on sample points decides it
pts = np.random.default_rng(0).normal(size=(50, 1))
print("cubic mean with sample points:", check(specs["cubic mean"], sample_points=pts).status)

# linear mean + constant variance: gamma trades off against alpha and beta
spec = specs["linear mean, constant variance"]
xi = np.array([0.5, 1.2, 0.0])           # mean 0.5 + 1.2 x, variance 1


def same_t(gamma):
    # t = alpha + beta x + gamma (0.5 + 1.2 x) + gamma^2 / 2, held fixed
    alpha = -0.8 + 0.4 * 0.5 + 0.08 - gamma * 0.5 - 0.5 * gamma**2
    beta = 0.3 + 0.4 * 1.2 - gamma * 1.2
    return Theta(alpha, np.array([beta]), gamma, xi)


sc = custom_scenario(["x"], IndependentNormals(1), -0.8, [0.3], 0.4, spec, xi, 1000)
data = generate(sc, 3)
for g in (0.4, 0.0, -0.9):
    print(f"gamma = {g:5.2f}   ell2 = {ell2(same_t(g), data, spec):.10f}")
