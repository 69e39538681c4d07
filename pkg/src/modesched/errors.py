"""Exception types shared across the package."""


class ExprError(ValueError):
    """Raised for malformed time expressions.

    Attributes:
        offset: byte offset into the source text where parsing failed,
            or None when the failure is not tied to a position.
    """

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class ConfigError(ValueError):
    """Invalid scenario/configuration input. CLI maps this to exit code 2."""


class NumericalError(RuntimeError):
    """Numerical failure (divergence, singular matrix, non-finite values).

    CLI maps this to exit code 3.
    """


class TableRangeError(ValueError):
    """Query outside the time range covered by a transition table."""
