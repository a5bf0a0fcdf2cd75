"""Exception hierarchy shared by every module.

Exit-code mapping for the CLI lives in cli.py: SolverError maps to 3,
everything else derived from PearlError maps to 2.
"""


class PearlError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(PearlError):
    """Malformed container bytes: bad magic, truncation, duplicate names."""


class SerializationError(FormatError):
    """Refusal to serialize, e.g. non-finite payload values at write time."""


class ValidationError(PearlError):
    """A value violates its documented range or an input is inconsistent."""


class DimensionError(ValidationError):
    """Array extents do not match what an operation requires."""


class PlanningError(ValidationError):
    """Window planning cannot cover the image with the requested geometry."""


class SolverError(PearlError):
    """Numerical breakdown or non-convergence in an iterative solver."""
