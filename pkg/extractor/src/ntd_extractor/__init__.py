"""Embedding extraction adapter for the screening toolkit.

Turns class-labeled image folders into validated-store files and single
images into embedding lines, using a torchvision model's penultimate-layer
representation.
"""

from .adapter import (
    IMAGENET_MEAN,
    IMAGENET_STD,
    ExtractionReport,
    ExtractorConfig,
    FeatureExtractor,
    extract_folder,
    extract_one,
    load_model,
)
from .errors import (
    DecodeError,
    ExtractorError,
    IoError,
    ModelLoadError,
    ValidationError,
)
from .ntdf import write_manifest, write_store
from .preprocess import resize_and_crop, to_model_tensor

__version__ = "0.1.0"

__all__ = [
    "DecodeError",
    "ExtractionReport",
    "ExtractorConfig",
    "ExtractorError",
    "FeatureExtractor",
    "IMAGENET_MEAN",
    "IMAGENET_STD",
    "IoError",
    "ModelLoadError",
    "ValidationError",
    "extract_folder",
    "extract_one",
    "load_model",
    "resize_and_crop",
    "to_model_tensor",
    "write_manifest",
    "write_store",
    "__version__",
]
