"""Exception types shared across the package.

The CLI maps these onto exit codes: UsageError/ConfigError -> 1,
DataError -> 2, NumericalError -> 3.
"""


class DimensionError(ValueError):
    """Shapes are incompatible for the requested operation."""


class UsageError(Exception):
    """The API or CLI was invoked incorrectly."""


class ConfigError(UsageError):
    """Bad configuration key, value, or combination."""


class DataError(Exception):
    """An input file or dataset is missing, malformed, or degenerate."""


class NumericalError(Exception):
    """A numeric invariant was violated (non-finite loss, singular matrix)."""
