"""Bias-aware face-verification dataset curation and evaluation toolkit."""

from .records import (
    ALL_GROUPS,
    AgeGroup,
    DemographicGroup,
    EmbeddingStore,
    Gender,
    ImageRecord,
    Manifest,
    MaskRaster,
    Race,
    load_manifest,
    load_mask,
    open_embeddings,
    validate,
    write_embeddings,
    write_manifest,
    write_mask,
)

__version__ = "0.1.0"

__all__ = [
    "ALL_GROUPS",
    "AgeGroup",
    "DemographicGroup",
    "EmbeddingStore",
    "Gender",
    "ImageRecord",
    "Manifest",
    "MaskRaster",
    "Race",
    "load_manifest",
    "load_mask",
    "open_embeddings",
    "validate",
    "write_embeddings",
    "write_manifest",
    "write_mask",
    "__version__",
]
