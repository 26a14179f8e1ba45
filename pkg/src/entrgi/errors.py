"""Exception hierarchy shared by every module."""


class EntrgiError(Exception):
    """Base class for library errors."""


class InvalidParameterError(EntrgiError, ValueError):
    """A scalar parameter is outside its admissible range."""


class InvalidInputError(EntrgiError, ValueError):
    """Input data is malformed, non-finite, or has the wrong shape."""


class ContractViolationError(EntrgiError, RuntimeError):
    """A caller broke a precondition that ties two arguments together."""


class OracleFailureError(EntrgiError, ArithmeticError):
    """The finite-difference oracle evaluated to a non-finite value."""

    def __init__(self, message, index):
        super().__init__(message)
        self.index = index


class NumericFailureError(EntrgiError, ArithmeticError):
    """Guidance produced a non-finite gradient or logit."""
