"""Exception hierarchy.

Errors are split by who can fix them: bad or insufficient input data
(:class:`DataError`), a model fit that cannot be completed
(:class:`EstimationError`), and everything else.  The CLI maps these onto
exit codes 2 and 3 respectively.
"""


class CovgofError(Exception):
    """Base class for all package errors."""


class DataError(CovgofError):
    """Input data is unreadable, malformed, or violates a precondition."""


class InsufficientDataError(DataError):
    """The data set is too small or too degenerate for the requested fit."""


class EstimationError(CovgofError):
    """A model fit failed (non-convergence, singular system, ...)."""
