"""Exception types mapped to CLI exit codes (data -> 2, numerical -> 3)."""


class DataError(Exception):
    """Invalid, missing, or malformed input data."""


class NumericalError(Exception):
    """Non-finite values encountered where finite math is required."""
