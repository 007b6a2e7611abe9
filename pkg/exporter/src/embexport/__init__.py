"""Offline exporter that runs a frozen vision-language encoder over images
and captions and writes the binary embedding file format consumed by the
popularity-prediction pipeline."""

__version__ = "0.1.0"

from .encoders import get_encoder  # noqa: F401
from .export import export_embeddings  # noqa: F401
from .manifest import ExportManifest, read_manifest  # noqa: F401
