"""Exception types shared across the package."""


class DGConvError(Exception):
    """Base class for all package errors."""


class DimensionError(DGConvError, ValueError):
    """Array shapes are incompatible."""


class ConfigurationError(DGConvError, ValueError):
    """A layer, model or budget was configured with invalid values."""


class UnsupportedLayerError(DGConvError):
    """A layer cannot be lowered by the inference compiler."""


class ParseError(DGConvError, ValueError):
    """A data file is malformed. ``offset`` is the byte offset of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DataError(DGConvError, ValueError):
    """Well-formed data with semantically invalid content (e.g. bad labels)."""


class CheckpointError(DGConvError):
    """A checkpoint or export file is corrupt or of an unknown kind."""


class ConfigError(DGConvError, ValueError):
    """Invalid run configuration, located by line and column."""

    def __init__(self, message, line=None, column=None):
        where = ""
        if line is not None:
            where = f"line {line}, column {column or 1}: "
        super().__init__(where + message)
        self.line = line
        self.column = column


class TrainingDiverged(DGConvError, RuntimeError):
    """Raised when the training loss stops being finite."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record or {}
