"""Image-folder to SVFF embedding exporter with pluggable vision backbones."""

from .backbones import (
    DEFAULT_BACKBONE,
    SeededProjectionBackbone,
    TorchvisionBackbone,
    make_backbone,
    register_backbone,
)
from .errors import BackboneError, DatasetError, ExportError
from .export import ExportManifest, ExportResult, export, scan_classes

__all__ = [
    "BackboneError",
    "DEFAULT_BACKBONE",
    "DatasetError",
    "ExportError",
    "ExportManifest",
    "ExportResult",
    "SeededProjectionBackbone",
    "TorchvisionBackbone",
    "export",
    "make_backbone",
    "register_backbone",
    "scan_classes",
]
