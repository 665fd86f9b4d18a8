"""Exception hierarchy and process exit codes."""

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class FieldshiftError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = EXIT_DATA


class ConfigError(FieldshiftError):
    """Invalid configuration; the message names the violated invariant."""

    exit_code = EXIT_CONFIG


class DataError(FieldshiftError):
    """Invalid data handed to an operation."""

    exit_code = EXIT_DATA


class DimensionError(DataError):
    """Array shapes or sizes do not match the operation's contract."""


class GeometryError(DataError):
    """Invalid polygon geometry."""


class StatsError(DataError):
    """Statistics requested over an empty or fully ignored sample."""


class CheckpointError(DataError):
    """Checkpoint file inconsistent with the requested architecture."""


class StateError(DataError):
    """Operation called without the state it requires (e.g. missing cache)."""


class TrainingError(FieldshiftError):
    """Numeric failure during training (NaN/Inf loss or gradients)."""

    exit_code = EXIT_NUMERIC


class NumericFloorWarning(UserWarning):
    """Raised when a probability was clamped at the numeric floor."""


class DegenerateStatsWarning(UserWarning):
    """Raised when degenerate statistics forced a fallback value."""
