"""Exception hierarchy shared by every module."""


class SubevoError(Exception):
    """Base class for all package errors."""


class DomainError(SubevoError, ValueError):
    """An argument lies outside the domain of the operation."""


class NumericalError(SubevoError, ArithmeticError):
    """An iterative solver failed to converge or produced non-finite output."""


class RegimeError(NumericalError):
    """The asymptotic system has no solution for these parameters.

    In logistic mode this is the observable symptom of being on the wrong
    side of the MLE existence boundary.
    """


class SeparationError(RegimeError):
    """The logistic M-estimator diverged (data are linearly separable)."""


class SingularCurvatureError(NumericalError):
    """The curvature matrix ``sum_i x_i l''_i x_i^T`` is not positive definite."""
