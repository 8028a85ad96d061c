"""Exception hierarchy shared by every stage."""


class NereError(Exception):
    """Base class for all package errors."""


class ConfigError(NereError, ValueError):
    """Invalid configuration value or unknown configuration key."""


class PreconditionError(NereError, ValueError):
    """An operation was called on inputs that violate its precondition."""


class ShapeError(NereError, ValueError):
    """Array shapes do not line up."""


class StateError(NereError, RuntimeError):
    """Operation invoked in the wrong lifecycle state (e.g. backward before forward)."""


class FormatError(NereError, ValueError):
    """A serialized artifact is malformed.

    ``line`` is the 1-based line number of the offending record when known.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class EmbeddingIndexError(NereError, IndexError):
    """Categorical index outside ``[0, cardinality]`` of an embedding field."""
