"""Exception types shared across the package.

Argument errors are plain ``ValueError``; the classes below mark failures the
CLI maps to distinct exit codes.
"""


class FormatError(ValueError):
    """Malformed input file (IDX, CSV or snapshot)."""


class NumericError(ArithmeticError):
    """Non-finite value, failed factorization or failed decomposition."""


class PreconditionError(ValueError):
    """A mathematical precondition (rank, definiteness) does not hold."""
