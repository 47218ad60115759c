"""Exception types shared across the package."""


class ReconError(Exception):
    """Base class for every error raised by pointfill."""


class DimensionError(ReconError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(ReconError, ValueError):
    """A documented precondition was violated."""


class ConfigError(ReconError, ValueError):
    """Invalid or inconsistent configuration."""


class ParseError(ReconError, ValueError):
    """A file could not be parsed."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CheckpointError(ReconError):
    """A checkpoint is unreadable or does not fit the model."""


class NumericalError(ReconError, FloatingPointError):
    """A non-finite value appeared during training."""
