"""Offline exporter: MVTec-AD-layout images -> patch-embedding files + manifest.

Walks one subset of an MVTec-AD-style directory tree, runs every image
through a pretrained WideResNet-50-2, aggregates mid-level activations into
one spatial grid of patch embeddings per image, and writes the grid files
plus a dataset manifest in the formats the classification package reads.
"""
from .config import ExportConfig, ExportError, tap_stride
from .export import ExportResult, export_subset, walk_subset
from .model import FeatureExtractor, load_backbone

__all__ = [
    "ExportConfig",
    "ExportError",
    "ExportResult",
    "FeatureExtractor",
    "export_subset",
    "load_backbone",
    "tap_stride",
    "walk_subset",
]
