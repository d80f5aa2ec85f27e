"""Exception types shared across the package.

The CLI maps these onto process exit codes (config 2, data 3, numerical 4).
"""


class ContractViolation(ValueError):
    """An operation was called with arguments that break its preconditions."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(ValueError):
    """Malformed input data (CSV rows, labels, empty training sets)."""


class NumericalError(FloatingPointError):
    """A loss or gradient became non-finite.

    ``index`` identifies the offending parameter tensor when known.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index
