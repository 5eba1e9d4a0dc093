"""Shared exception types, mapped to CLI exit codes."""


class DataError(ValueError):
    """Bad input data: missing/malformed files, shape or value violations. Exit code 3."""


class NumericalError(FloatingPointError):
    """Non-finite values where finite ones are required. Exit code 4."""
