"""DINO/CLIP feature export into GFF feature fields."""

from .encoders import ModelUnavailable, PretrainedEncoder, StubEncoder
from .export import export_features, export_text_embeddings
from .manifest import ExportManifest, LayoutError

__version__ = "0.1.0"

__all__ = [
    "ExportManifest",
    "LayoutError",
    "ModelUnavailable",
    "PretrainedEncoder",
    "StubEncoder",
    "export_features",
    "export_text_embeddings",
]
