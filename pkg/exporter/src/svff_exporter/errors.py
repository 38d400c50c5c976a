"""Exception types for the exporter."""


class ExportError(Exception):
    """Base class for exporter errors."""


class DatasetError(ExportError, ValueError):
    """A dataset folder that cannot yield a complete export."""


class BackboneError(ExportError, ValueError):
    """A backbone identifier that cannot be resolved or loaded."""
