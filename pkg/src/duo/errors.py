"""Exception types shared across the package."""


class DuoError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(DuoError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(DuoError, ValueError):
    """A precondition of an operation was violated."""


class NonFiniteError(DuoError, ArithmeticError):
    """An operation produced NaN or Inf."""


class ParseError(DuoError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(ParseError):
    pass


class CheckpointError(DuoError, IOError):
    pass


class TrainingDiverged(DuoError, RuntimeError):
    pass
