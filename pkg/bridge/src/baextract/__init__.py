"""Extractor bridge: runs face-analysis models over an image tree and
emits the evaluation toolkit's manifest, embedding and mask artifacts."""

__version__ = "0.1.0"

from .adapters import (
    AdapterSet,
    DecodedImage,
    DemographicsAdapter,
    EmbeddingAdapter,
    PoseAdapter,
    PoseDetection,
    QualityAdapter,
    SegmentationAdapter,
    build_adapters,
    fairface_age_to_group,
    pick_most_frontal,
)
from .errors import BridgeError, ConfigError, ModelLoadError
from .extract import ExtractorConfig, ExtractResult, config_from_ini, extract
from .schema_check import CheckReport, schema_check

__all__ = [
    "AdapterSet",
    "BridgeError",
    "CheckReport",
    "ConfigError",
    "DecodedImage",
    "DemographicsAdapter",
    "EmbeddingAdapter",
    "ExtractResult",
    "ExtractorConfig",
    "ModelLoadError",
    "PoseAdapter",
    "PoseDetection",
    "QualityAdapter",
    "SegmentationAdapter",
    "build_adapters",
    "config_from_ini",
    "extract",
    "fairface_age_to_group",
    "pick_most_frontal",
    "schema_check",
    "__version__",
]
