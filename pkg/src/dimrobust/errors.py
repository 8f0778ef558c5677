"""Exception hierarchy shared by every stage of the pipeline.

The CLI maps these onto process exit codes, so each class carries one.
"""


class DimRobustError(Exception):
    exit_code = 1


class ConfigError(DimRobustError, ValueError):
    """Bad arguments, shape mismatches, inconsistent settings."""

    exit_code = 1


class UsageError(ConfigError):
    """An API was called in a state where it cannot do anything sensible."""


class DataError(DimRobustError):
    """Unreadable or malformed input data."""

    exit_code = 2


class NumericError(DimRobustError, ArithmeticError):
    """Non-finite values, failed decompositions, diverged optimisation."""

    exit_code = 3


class DomainError(NumericError):
    """A function was evaluated outside its mathematical domain."""
