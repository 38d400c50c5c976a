"""Exception types shared across the package."""


class SvfError(Exception):
    """Base class for library errors."""


class InvalidInputError(SvfError, ValueError):
    """Non-finite or structurally malformed numeric input."""


class ShapeError(SvfError, ValueError):
    """Operands with incompatible dimensions."""


class RankRangeError(SvfError, ValueError):
    """A rank argument outside its admissible range."""


class ConvergenceError(SvfError, RuntimeError):
    """An iterative kernel ran out of its sweep budget."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class LabelError(SvfError, ValueError):
    """A class label outside the declared range."""

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class ConfigError(SvfError, ValueError):
    """Invalid experiment or stream configuration."""


class FormatError(SvfError, ValueError):
    """A byte stream that does not match the declared file format."""

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class CorruptionError(SvfError, ValueError):
    """A structurally valid header with an inconsistent payload."""

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class LayoutError(SvfError, ValueError):
    """A session layout the available classes or samples cannot satisfy."""
