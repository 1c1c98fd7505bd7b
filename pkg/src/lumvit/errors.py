"""Exception types shared across the package."""


class LumVitError(Exception):
    pass


class DimensionError(LumVitError, ValueError):
    """Operand shapes are incompatible."""


class ValidationError(LumVitError, ValueError):
    """An argument violates a documented precondition."""


class UsageError(LumVitError, RuntimeError):
    pass


class NumericError(LumVitError, ArithmeticError):
    """A NaN/Inf appeared, or an update would produce one."""


class OracleError(LumVitError, RuntimeError):
    """The function under a gradient check is not deterministic."""


class DegenerateError(NumericError):
    """Least-squares refit on the current support is singular.

    ``support`` and ``coef`` hold the state reached before the failure.
    """

    def __init__(self, message, support=(), coef=None):
        super().__init__(message)
        self.support = list(support)
        self.coef = coef


class FormatError(LumVitError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class PipelineError(LumVitError, RuntimeError):
    """Training stages were run out of order or with missing state."""
