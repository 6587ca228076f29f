"""Exception types shared across the package."""


class AwsupError(Exception):
    """Base class for all package errors."""


class DimensionError(AwsupError, ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class ContractError(AwsupError, ValueError):
    """A precondition other than shape was violated."""


class ConfigError(AwsupError, ValueError):
    """Invalid or unknown configuration."""


class TrainingError(AwsupError, FloatingPointError):
    """Non-finite values appeared during training."""


class GenerationError(AwsupError, RuntimeError):
    """The phantom generator could not satisfy its geometric constraints."""


class DatasetError(AwsupError, OSError):
    """A dataset or checkpoint on disk is missing, malformed or corrupt."""
