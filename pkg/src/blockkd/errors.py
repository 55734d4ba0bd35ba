"""Exception taxonomy shared by all blockkd modules."""


class BlockKDError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(BlockKDError):
    """Tensor shapes are incompatible for the requested operation."""


class StructuralError(BlockKDError):
    """A network component received a feature of the wrong shape."""


class ConfigError(BlockKDError):
    """An invalid or inconsistent configuration value."""


class NumericError(BlockKDError):
    """Non-finite values where finite ones are required."""


class DataError(BlockKDError):
    """Invalid dataset content (labels, sizes)."""


class UsageError(BlockKDError):
    """An API called outside of its contract."""


class TrainingError(BlockKDError):
    """The optimization loop hit an inconsistent state."""


class EvaluationError(BlockKDError):
    """Evaluation requested on unusable input."""


class FormatError(BlockKDError):
    """A binary file does not match its documented layout."""


class CompatibilityError(BlockKDError):
    """A checkpoint does not match the running code or configuration."""


class PreconditionError(BlockKDError):
    """An analysis routine was handed input violating its stated assumption."""
