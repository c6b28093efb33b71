"""Exception types shared across the package."""

__all__ = [
    "HTSolveError",
    "InvalidDimensionError",
    "ToleranceInfeasibleError",
    "CertificateViolationError",
    "ContractionViolationError",
]


class HTSolveError(Exception):
    """Base class for package-specific errors."""


class InvalidDimensionError(HTSolveError, ValueError):
    """Raised when a dimension tree or tensor order is out of range."""


class ToleranceInfeasibleError(HTSolveError, RuntimeError):
    """Raised when a requested accuracy cannot be certified.

    Examples: an exponential-sum table would need more terms than the hard
    cap allows, or an accuracy budget cannot be split into feasible parts.
    """


class CertificateViolationError(HTSolveError, RuntimeError):
    """Raised when input data violates a precondition a certificate relies on.

    Example: applying a scaling built for a restricted support to a tensor
    with mass outside that support.
    """


class ContractionViolationError(HTSolveError, RuntimeError):
    """Raised when an iteration that should contract fails to make progress,
    which indicates inconsistent operator bounds or parameters."""
