"""Exception types shared across the package."""


class TknError(Exception):
    """Base class for all package errors."""


class ShapeError(TknError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ConfigError(TknError, ValueError):
    """A configuration value is missing, mistyped, or out of range.

    ``field`` carries the dotted path of the offending entry so CLI users
    get a field-level diagnostic.
    """

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class FormatError(TknError, ValueError):
    """A serialized artifact (sequence file, checkpoint) is malformed."""


class TrainingDiverged(TknError, RuntimeError):
    """Training produced a non-finite loss and was aborted."""
