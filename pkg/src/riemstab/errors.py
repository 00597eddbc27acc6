"""Exception types raised across the package."""

from __future__ import annotations


class RiemstabError(Exception):
    """Base class for all package errors."""


class NonPositiveDefinite(RiemstabError):
    """The metric is not positive definite at an evaluation point."""


class BallExceedsDomain(RiemstabError):
    """A geodesic ball reaches a non-periodic boundary of the chart."""


class SolverError(RiemstabError):
    """A nonlinear solve failed; ``state`` and ``report`` hold the last iterate."""

    def __init__(self, message, state=None, report=None):
        super().__init__(message)
        self.state = state
        self.report = report


class SingularJacobian(SolverError):
    pass


class MaxIterExceeded(SolverError):
    pass


class LineSearchFailure(SolverError):
    pass


class BlowUp(SolverError):
    pass


class NotSelfAdjoint(RiemstabError):
    """The linearized operator is not self-adjoint in the weighted inner product."""


class NoConvergence(RiemstabError):
    pass


class NegativeCouplingProduct(RiemstabError):
    """Some product d_j H_i * d_i H_j is negative, so its square root is undefined."""


class EmptyLevelSet(RiemstabError):
    pass


class GradientBelowFloor(RiemstabError):
    pass


class ConfigInvalid(RiemstabError):
    pass


class ExperimentFailure(RiemstabError):
    """An experiment raised during a run; other experiments' reports are kept."""

    def __init__(self, experiment: str, cause: BaseException):
        super().__init__(f"{type(cause).__name__}: {cause}")
        self.experiment = experiment
        self.cause = cause
