"""Exception types shared across the package."""


class TokenLearnerError(Exception):
    """Base class for all package errors."""


class DimensionError(TokenLearnerError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(TokenLearnerError, ValueError):
    """A model, training, or plan configuration is invalid."""

    def __init__(self, message, field=None):
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)
        self.field = field


class ContractError(TokenLearnerError, RuntimeError):
    """An operation was called outside its contract."""


class CheckpointError(TokenLearnerError, IOError):
    """A checkpoint or dataset file is malformed or incompatible."""


class NumericError(TokenLearnerError, ArithmeticError):
    """A non-finite value appeared during training."""
