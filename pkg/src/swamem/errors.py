"""Exception types shared across the package."""


class SwamemError(Exception):
    """Base class for all library errors."""


class ShapeError(SwamemError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(SwamemError, FloatingPointError):
    """A computation produced a non-finite value."""


class DegenerateRowError(SwamemError, ValueError):
    """A softmax row has no unmasked entries."""


class ConfigError(SwamemError, ValueError):
    """A configuration value is missing, unknown, or inconsistent."""


class OrderingError(SwamemError, ValueError):
    """Decode positions went backwards or skipped ahead."""


class GenerationError(SwamemError, ValueError):
    """A synthetic task cannot be placed under the given constraints."""


class EmptyLossError(SwamemError, ValueError):
    """A loss was requested over an all-zero position mask."""


class CheckpointError(SwamemError, ValueError):
    """A checkpoint file is missing or malformed."""
