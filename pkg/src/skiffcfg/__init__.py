"""Layered configuration composition for container-hosting embedded Linux images."""

from .errors import (
    ConflictError,
    CycleError,
    ParseError,
    ResolutionError,
    RoutingError,
    SkiffError,
    StorageError,
    TransportError,
    UsageError,
    ValidationError,
)
from .layers import Layer, LayerCatalog, LayerId, LayerMetadata, discover_layers, parse_selection, resolve_order

__version__ = "0.1.0"
