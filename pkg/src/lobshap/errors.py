"""Exception types shared across the package.

The CLI maps these onto exit codes: ``DataError`` -> 3, ``NumericError`` -> 4.
"""


class LobshapError(Exception):
    """Base class for package errors."""


class DataError(LobshapError):
    """Malformed, inconsistent or insufficient input data."""


class NumericError(LobshapError):
    """A numeric stage could not produce a defined result."""
