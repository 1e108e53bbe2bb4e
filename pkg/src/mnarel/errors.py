"""Exception types raised across the package."""


class MnarelError(Exception):
    """Base class for package errors."""


class TiltDivergence(MnarelError, ArithmeticError):
    """The tilted integral of the outcome density is not finite at ``x``."""

    def __init__(self, x, message=None):
        self.x = x
        super().__init__(message or f"tilted integral diverged at x={x!r}")


class NoInteriorRoot(MnarelError, ValueError):
    """The Lagrange multiplier equation has no root inside the feasible interval."""

    def __init__(self, t_min, t_max):
        self.t_min = t_min
        self.t_max = t_max
        super().__init__(
            "no interior root for the multiplier equation "
            f"(min t = {t_min:.6g}, max t = {t_max:.6g}); t must take both signs"
        )


class InfeasibleMultiplier(MnarelError, ValueError):
    """A multiplier value makes some EL denominator non-positive."""


class SamplingError(MnarelError, RuntimeError):
    """Accept-reject sampling exhausted its proposal budget."""


class NonConvergence(MnarelError, RuntimeError):
    """The profile likelihood maximisation failed from every start."""

    def __init__(self, message, best_theta=None, grad_norm=None):
        self.best_theta = best_theta
        self.grad_norm = grad_norm
        super().__init__(message)


class SingularVhat(MnarelError, ArithmeticError):
    """The estimated information matrix is numerically singular."""


class DegenerateData(MnarelError, ValueError):
    """The dataset cannot support estimation (e.g. no missing rows)."""


class BootstrapFailure(MnarelError, RuntimeError):
    """More than half of the bootstrap refits failed."""

    def __init__(self, message, failures, B):
        self.failures = failures
        self.B = B
        super().__init__(message)


class SpecError(MnarelError, ValueError):
    """A model specification or data file could not be parsed."""
