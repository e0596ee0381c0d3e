"""PyTorch-to-bundle exporter with batch-norm folding and round-trip checks."""

from .export import ExportError, export_clip, export_model
from .verify import RoundtripReport, verify_roundtrip
from .zoo import ZOO, build

__version__ = "0.1.0"
