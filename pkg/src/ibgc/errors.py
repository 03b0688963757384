"""Exception types shared across the package.

The command line maps these onto exit codes: usage problems exit 1,
DataError exits 2, NumericError exits 3.
"""


class NumericError(ArithmeticError):
    """A computation produced NaN/Inf or was called outside its domain."""


class DataError(ValueError):
    """A dataset, checkpoint or config file is malformed or inconsistent."""
