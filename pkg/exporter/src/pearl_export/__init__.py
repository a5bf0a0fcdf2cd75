"""Exports last-block attention tensors, grayscale frames, and
prompt-embedded text prototypes from a frozen CLIP-style ViT into the PRL1
containers the segmentation pipeline consumes."""

from .capture import CapturedBlock, ExportError, capture_last_block
from .export import ExportManifest, export_image, export_prototypes
from .providers import Backbone, checkpoint_backbone, resolve_backbone, tiny_backbone
from .templates import IMAGENET_TEMPLATES, SINGLE_TEMPLATE

__version__ = "0.1.0"

__all__ = [
    "CapturedBlock",
    "ExportError",
    "capture_last_block",
    "ExportManifest",
    "export_image",
    "export_prototypes",
    "Backbone",
    "checkpoint_backbone",
    "resolve_backbone",
    "tiny_backbone",
    "IMAGENET_TEMPLATES",
    "SINGLE_TEMPLATE",
    "__version__",
]
