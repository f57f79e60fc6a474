"""Model adapters: one interface per analysis role, models as plug-ins.

Which network backs a role is configuration, not code. The shipped
reference adapters are deterministic synthetic stand-ins keyed by image
content, so the whole pipeline runs and is testable on machines without
model weights; a real deployment implements the same interfaces around
its networks.
"""

from __future__ import annotations

import hashlib
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import BridgeError, ModelLoadError
from .formats import (
    CLASS_FACIAL_HAIR,
    CLASS_HAIR,
    CLASS_NOSE,
    CLASS_SKIN,
    GENDERS,
    RACES,
)

# FairFace predicts one of these age buckets per face.
FAIRFACE_AGE_BUCKETS = ("0-2", "3-9", "10-19", "20-29", "30-39", "40-49",
                        "50-59", "60-69", "70+")


def fairface_age_to_group(bucket: str) -> str:
    """Collapse a FairFace age bucket onto the evaluation age groups.

    Young covers 10 to 29, MiddleAged 30 to 49, Senior 50 and up. The
    child buckets below 10 also map to Young, the nearest group.
    """
    if bucket not in FAIRFACE_AGE_BUCKETS:
        raise BridgeError(f"unknown FairFace age bucket {bucket!r}")
    lower = int(bucket.rstrip("+").split("-")[0])
    if lower >= 50:
        return "Senior"
    if lower >= 30:
        return "MiddleAged"
    return "Young"


@dataclass(frozen=True)
class DecodedImage:
    """One decoded input: 224x224 RGB plus its identity bookkeeping."""

    image_id: str
    identity_id: str
    path: str
    rgb: np.ndarray


@dataclass(frozen=True)
class PoseDetection:
    pitch: float
    yaw: float
    roll: float

    @property
    def max_abs_angle(self) -> float:
        return max(abs(self.pitch), abs(self.yaw), abs(self.roll))


def pick_most_frontal(detections: Sequence[PoseDetection]) -> PoseDetection:
    """The detection with minimal max absolute angle; ties keep the
    earlier detection."""
    if not detections:
        raise BridgeError("no detections to choose from")
    best = detections[0]
    for det in detections[1:]:
        if det.max_abs_angle < best.max_abs_angle:
            best = det
    return best


@dataclass(frozen=True)
class DemographicPrediction:
    race: str
    gender: str
    age_bucket: str  # FairFace vocabulary, mapped downstream


class PoseAdapter(ABC):
    @abstractmethod
    def estimate(self, batch: Sequence[DecodedImage]
                 ) -> list[list[PoseDetection]]:
        """Per image: all face detections with angles in degrees."""


class SegmentationAdapter(ABC):
    @abstractmethod
    def segment(self, batch: Sequence[DecodedImage]) -> list[np.ndarray]:
        """Per image: uint8 class raster, same height/width as the input."""


class QualityAdapter(ABC):
    @abstractmethod
    def score(self, batch: Sequence[DecodedImage]) -> list[float]:
        """Per image: one scalar quality score."""


class DemographicsAdapter(ABC):
    @abstractmethod
    def classify(self, batch: Sequence[DecodedImage]
                 ) -> list[DemographicPrediction]:
        """Per image: race, gender and FairFace age bucket."""


class EmbeddingAdapter(ABC):
    @abstractmethod
    def embed(self, batch: Sequence[DecodedImage]) -> np.ndarray:
        """(n, dim) float array. Normalization is NOT this adapter's
        job; the extractor normalizes before writing."""


def _image_rng(image: DecodedImage, role_tag: int) -> np.random.Generator:
    digest = hashlib.sha256(image.rgb.tobytes()).digest()
    key = int.from_bytes(digest[:8], "big")
    return np.random.default_rng([role_tag, key])


class SyntheticPose(PoseAdapter):
    """1 to 3 detections with content-derived angles."""

    def estimate(self, batch: Sequence[DecodedImage]
                 ) -> list[list[PoseDetection]]:
        out = []
        for image in batch:
            rng = _image_rng(image, 1)
            n = int(rng.integers(1, 4))
            out.append([PoseDetection(*(float(a) for a in
                                        rng.uniform(-28.0, 28.0, size=3)))
                        for _ in range(n)])
        return out


class SyntheticSegmentation(SegmentationAdapter):
    """Elliptical face layout: skin, nose, scalp hair, sometimes a
    facial-hair band."""

    def segment(self, batch: Sequence[DecodedImage]) -> list[np.ndarray]:
        out = []
        for image in batch:
            rng = _image_rng(image, 2)
            h, w = image.rgb.shape[:2]
            classes = np.zeros((h, w), dtype=np.uint8)
            cr = h / 2 + float(rng.uniform(-6, 6))
            cc = w / 2 + float(rng.uniform(-6, 6))
            sh = h * float(rng.uniform(0.28, 0.36))
            sw = w * float(rng.uniform(0.22, 0.28))
            rows, cols = np.ogrid[:h, :w]
            inside = (((rows - cr) / sh) ** 2
                      + ((cols - cc) / sw) ** 2) <= 1.0
            classes[inside] = CLASS_SKIN
            hair = inside & (rows < cr - 0.65 * sh)
            classes[hair] = CLASS_HAIR
            nose = (((rows - cr) / (0.18 * sh)) ** 2
                    + ((cols - cc) / (0.16 * sw)) ** 2) <= 1.0
            classes[inside & nose] = CLASS_NOSE
            if rng.random() < 0.3:
                band = inside & (rows > cr + 0.55 * sh)
                classes[band] = CLASS_FACIAL_HAIR
            out.append(classes)
        return out


class SyntheticQuality(QualityAdapter):
    """FaceQnet-role scores live in [0, 1]; MagFace-role scores in the
    low tens."""

    def __init__(self, role: str):
        if role not in ("faceqnet", "magface"):
            raise BridgeError(f"unknown quality role {role!r}")
        self.role = role

    def score(self, batch: Sequence[DecodedImage]) -> list[float]:
        out = []
        for image in batch:
            rng = _image_rng(image, 3 if self.role == "faceqnet" else 4)
            if self.role == "faceqnet":
                out.append(float(rng.uniform(0.35, 0.99)))
            else:
                out.append(float(rng.uniform(21.0, 38.0)))
        return out


class SyntheticDemographics(DemographicsAdapter):
    def classify(self, batch: Sequence[DecodedImage]
                 ) -> list[DemographicPrediction]:
        out = []
        for image in batch:
            rng = _image_rng(image, 5)
            out.append(DemographicPrediction(
                race=RACES[int(rng.integers(0, len(RACES)))],
                gender=GENDERS[int(rng.integers(0, len(GENDERS)))],
                age_bucket=FAIRFACE_AGE_BUCKETS[
                    int(rng.integers(0, len(FAIRFACE_AGE_BUCKETS)))],
            ))
        return out


class SyntheticEmbedding(EmbeddingAdapter):
    """Content-keyed Gaussian vectors, deliberately NOT unit norm."""

    def __init__(self, dim: int):
        if dim < 1:
            raise BridgeError("embedding dim must be positive")
        self.dim = dim

    def embed(self, batch: Sequence[DecodedImage]) -> np.ndarray:
        rows = np.empty((len(batch), self.dim), dtype=np.float32)
        for i, image in enumerate(batch):
            rng = _image_rng(image, 6)
            vec = rng.standard_normal(self.dim)
            rows[i] = (vec * float(rng.uniform(0.5, 2.0))).astype(np.float32)
        return rows


@dataclass(frozen=True)
class AdapterSet:
    pose: PoseAdapter
    segmentation: SegmentationAdapter
    faceqnet: QualityAdapter
    magface: QualityAdapter
    demographics: DemographicsAdapter
    embedding: EmbeddingAdapter


ADAPTER_ROLES = ("pose", "segmentation", "faceqnet", "magface",
                 "demographics", "embedding")


def build_adapters(config) -> AdapterSet:
    """Reference adapter set for an ExtractorConfig.

    Any role given a model asset path is a hard error here: loading real
    weights needs a plug-in adapter supplied in code, and a missing or
    unloadable asset must never fall back silently to the synthetic
    stand-in.
    """
    from pathlib import Path

    for role, asset in sorted(config.model_paths.items()):
        if role not in ADAPTER_ROLES:
            raise ModelLoadError(f"unknown adapter role {role!r}")
        if not Path(asset).exists():
            raise ModelLoadError(f"{role} model asset not found: {asset}")
        raise ModelLoadError(
            f"no adapter plug-in registered for {role} asset {asset}; "
            "pass a custom AdapterSet to extract()")
    return AdapterSet(
        pose=SyntheticPose(),
        segmentation=SyntheticSegmentation(),
        faceqnet=SyntheticQuality("faceqnet"),
        magface=SyntheticQuality("magface"),
        demographics=SyntheticDemographics(),
        embedding=SyntheticEmbedding(config.embedding_dim),
    )
