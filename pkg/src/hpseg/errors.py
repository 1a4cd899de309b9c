"""Exception hierarchy shared across the package.

The three roots map onto the CLI exit codes: UsageError -> 1,
DataError -> 2, NumericError -> 3.
"""


class HpsegError(Exception):
    """Base class for all errors raised by this package."""


class UsageError(HpsegError):
    """Bad arguments, bad configuration, misuse of an API contract."""


class ConfigError(UsageError):
    """Invalid or unknown configuration key/value."""


class ShapeError(UsageError):
    """Tensor dimensions do not satisfy an operation's contract."""


class DataError(HpsegError):
    """Dataset files missing, malformed, or violating invariants."""


class CapacityError(DataError):
    """More ground-truth segments than queries available to match them."""


class NumericError(HpsegError):
    """Non-finite values or a numerically failed computation."""
