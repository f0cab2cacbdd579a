"""Error hierarchy. Every error carries a stable exit code used by the CLI."""

from __future__ import annotations


class RenewalLabError(Exception):
    exit_code = 1
    category = "error"


class ConfigError(RenewalLabError):
    exit_code = 2
    category = "config"


class DimensionError(RenewalLabError):
    exit_code = 3
    category = "dimension"


class DecompositionError(RenewalLabError):
    exit_code = 4
    category = "decomposition"


class PreconditionError(RenewalLabError):
    exit_code = 5
    category = "precondition"


class EigenError(RenewalLabError):
    exit_code = 6
    category = "eigen"


class BoundViolation(RenewalLabError):
    """A certified bound failed when checked against directly computed data."""

    exit_code = 7
    category = "bound-violation"


class ResolutionError(RenewalLabError):
    exit_code = 8
    category = "resolution"


class GridError(RenewalLabError):
    exit_code = 9
    category = "grid"


class DegenerateSpectrumError(RenewalLabError):
    exit_code = 10
    category = "degenerate-spectrum"


class SingularError(RenewalLabError):
    exit_code = 11
    category = "singular"

    def __init__(self, message: str, smallest_singular_value: float | None = None, t: float | None = None):
        super().__init__(message)
        self.smallest_singular_value = smallest_singular_value
        self.t = t


class OutOfDomainError(RenewalLabError):
    exit_code = 12
    category = "out-of-domain"


class EmptyRegularSetError(RenewalLabError):
    exit_code = 13
    category = "empty-regular-set"


class NonTransientError(RenewalLabError):
    exit_code = 14
    category = "non-transient"


class QuadratureError(RenewalLabError):
    exit_code = 15
    category = "quadrature"


class CutoffError(RenewalLabError):
    exit_code = 16
    category = "cutoff"


class ToleranceError(RenewalLabError):
    exit_code = 17
    category = "tolerance"
