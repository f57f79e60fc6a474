"""Ground-truth-known synthetic population generator.

Identity means are uniform directions on the unit sphere; images are
Gaussian perturbations of their identity mean, renormalized. Label noise
is planted by swapping an image's embedding for a sample from another
identity in the same group, and attribute violations are planted by
drawing one attribute outside the default gate bounds. Everything
planted is recorded in a GroundTruth artifact that the pipeline under
test never sees.

Generation is per-group with seed-derived generators, so group order
never changes a group's content and the whole cohort is bit-identical
per (spec, seed).
"""

from __future__ import annotations

import configparser
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import ContractViolation, ManifestParseError
from .filters import GateConfig
from .records import (
    CLASS_FACIAL_HAIR,
    CLASS_NOSE,
    CLASS_SKIN,
    AgeGroup,
    DemographicGroup,
    Gender,
    EmbeddingStore,
    ImageRecord,
    Manifest,
    MaskRaster,
)
from .seeds import make_rng

MASK_SIZE = 224

AGE_CHOICES = (AgeGroup.YOUNG, AgeGroup.MIDDLE_AGED, AgeGroup.SENIOR)

VIOLATION_ATTRIBUTES = ("pose", "quality_faceqnet", "quality_magface",
                        "brightness", "face_area", "nose_missing")


@dataclass(frozen=True)
class GroupSpec:
    group: DemographicGroup
    n_ids: int
    imgs_per_id: int
    within_sigma: Optional[float] = None  # falls back to the cohort default

    def __post_init__(self):
        if self.n_ids < 1 or self.imgs_per_id < 1:
            raise ValueError("n_ids and imgs_per_id must be at least 1")
        if self.within_sigma is not None and self.within_sigma <= 0:
            raise ValueError("within_sigma must be positive")


@dataclass(frozen=True)
class AttributeDists:
    """Uniform draw ranges for the in-gate attribute values."""

    pose: tuple[float, float] = (-15.0, 15.0)
    q_faceqnet: tuple[float, float] = (0.35, 0.95)
    q_magface: tuple[float, float] = (22.0, 38.0)
    brightness: tuple[float, float] = (120.0, 190.0)
    area: tuple[float, float] = (0.22, 0.45)


@dataclass(frozen=True)
class MaskParams:
    """Elliptical face geometry; per-gender offsets plant morphology gaps."""

    center_row: int = 112
    center_col: int = 112
    semi_height: int = 70
    semi_width: int = 55
    jitter: int = 3
    female_area_offset: int = 8
    female_top_offset: int = -6
    male_area_offset: int = 0
    male_top_offset: int = 0


@dataclass(frozen=True)
class CohortSpec:
    groups: tuple[GroupSpec, ...]
    dim: int = 128
    within_sigma: float = 0.08
    noise_rate: float = 0.0
    violation_rate: float = 0.0
    facial_hair_rate: float = 0.3
    seed: int = 0
    attribute_dists: AttributeDists = field(default_factory=AttributeDists)
    mask_params: MaskParams = field(default_factory=MaskParams)
    emit_masks: bool = True

    def __post_init__(self):
        if not self.groups:
            raise ValueError("at least one group is required")
        if not 0.0 <= self.noise_rate < 0.5:
            raise ValueError("noise_rate must be in [0, 0.5)")
        if self.within_sigma <= 0:
            raise ValueError("within_sigma must be positive")
        if self.dim < 8:
            raise ValueError("dim must be at least 8")
        if not 0.0 <= self.violation_rate <= 1.0:
            raise ValueError("violation_rate must be in [0, 1]")

    def expected_genuine_mean(self, group_code: str) -> float:
        """Large-dim approximation of the planted genuine score level."""
        for gspec in self.groups:
            if gspec.group.code == group_code:
                sigma = gspec.within_sigma or self.within_sigma
                return 1.0 / (1.0 + sigma * sigma * self.dim)
        raise ContractViolation(f"no group {group_code!r} in this spec")


@dataclass(frozen=True)
class NoiseEntry:
    image_id: str
    labeled_identity: str
    true_identity: str


@dataclass(frozen=True)
class ViolationEntry:
    image_id: str
    attribute: str  # one of VIOLATION_ATTRIBUTES


@dataclass
class GroundTruth:
    n_images: int
    seed: int
    noise: list[NoiseEntry] = field(default_factory=list)
    violations: list[ViolationEntry] = field(default_factory=list)

    def noise_ids(self) -> set[str]:
        return {entry.image_id for entry in self.noise}

    def violation_ids(self) -> set[str]:
        return {entry.image_id for entry in self.violations}

    def write(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps({"kind": "header", "n_images": self.n_images,
                                 "seed": self.seed}) + "\n")
            for entry in self.noise:
                fh.write(json.dumps({
                    "kind": "noise", "image_id": entry.image_id,
                    "labeled_identity": entry.labeled_identity,
                    "true_identity": entry.true_identity}) + "\n")
            for entry in self.violations:
                fh.write(json.dumps({
                    "kind": "violation", "image_id": entry.image_id,
                    "attribute": entry.attribute}) + "\n")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "GroundTruth":
        truth: Optional[GroundTruth] = None
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                payload = json.loads(line)
                kind = payload.get("kind")
                if kind == "header":
                    truth = cls(payload["n_images"], payload["seed"])
                elif truth is None:
                    raise ManifestParseError(
                        f"line {lineno}: ground truth record before header")
                elif kind == "noise":
                    truth.noise.append(NoiseEntry(
                        payload["image_id"], payload["labeled_identity"],
                        payload["true_identity"]))
                elif kind == "violation":
                    truth.violations.append(ViolationEntry(
                        payload["image_id"], payload["attribute"]))
                else:
                    raise ManifestParseError(
                        f"line {lineno}: unknown ground truth kind {kind!r}")
        if truth is None:
            raise ManifestParseError("ground truth file has no header line")
        return truth


def _unit_sphere(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    v = rng.normal(size=(n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _ellipse_mask(params: MaskParams, gender: Gender, facial_hair: bool,
                  rng: np.random.Generator) -> MaskRaster:
    if gender is Gender.FEMALE:
        area_off, top_off = params.female_area_offset, params.female_top_offset
    else:
        area_off, top_off = params.male_area_offset, params.male_top_offset
    j = params.jitter
    cr = params.center_row + top_off + int(rng.integers(-j, j + 1))
    cc = params.center_col + int(rng.integers(-j, j + 1))
    sh = max(4, params.semi_height + area_off + int(rng.integers(-j, j + 1)))
    sw = max(4, params.semi_width + area_off + int(rng.integers(-j, j + 1)))

    rows = np.arange(MASK_SIZE)[:, None]
    cols = np.arange(MASK_SIZE)[None, :]
    inside = ((rows - cr) / sh) ** 2 + ((cols - cc) / sw) ** 2 <= 1.0
    classes = np.zeros((MASK_SIZE, MASK_SIZE), dtype=np.uint8)
    classes[inside] = CLASS_SKIN
    nose = ((rows - cr) / 9.0) ** 2 + ((cols - cc) / 6.0) ** 2 <= 1.0
    classes[inside & nose] = CLASS_NOSE
    if facial_hair:
        band = (rows >= cr + int(0.55 * sh)) & (rows <= cr + int(0.95 * sh))
        classes[inside & band] = CLASS_FACIAL_HAIR
    return MaskRaster(classes)


def _plant_violation(attrs: dict, attribute: str, gates: GateConfig,
                     rng: np.random.Generator) -> None:
    if attribute == "pose":
        axis = ("pitch", "yaw", "roll")[int(rng.integers(0, 3))]
        sign = 1.0 if rng.random() < 0.5 else -1.0
        attrs[axis] = sign * float(rng.uniform(gates.pose_max + 5.0,
                                               gates.pose_max + 45.0))
    elif attribute == "quality_faceqnet":
        attrs["q_faceqnet"] = float(rng.uniform(0.0, gates.q_faceqnet_min * 0.97))
    elif attribute == "quality_magface":
        attrs["q_magface"] = float(rng.uniform(0.0, gates.q_magface_min * 0.95))
    elif attribute == "brightness":
        if rng.random() < 0.5:
            attrs["brightness_fsb"] = float(rng.uniform(20.0, gates.fsb_low - 1.0))
        else:
            attrs["brightness_fsb"] = float(rng.uniform(gates.fsb_high + 1.0, 250.0))
    elif attribute == "face_area":
        attrs["face_area_ratio"] = float(rng.uniform(0.01, gates.area_min * 0.95))
    elif attribute == "nose_missing":
        attrs["nose_present"] = False
    else:
        raise ContractViolation(f"unknown violation attribute {attribute!r}")


def generate(spec: CohortSpec) -> tuple[Manifest, EmbeddingStore,
                                        Optional[dict[str, MaskRaster]],
                                        GroundTruth]:
    """Build the cohort: manifest, embeddings, masks and the answer key."""
    gates = GateConfig()
    dists = spec.attribute_dists
    records: list[ImageRecord] = []
    vectors: list[np.ndarray] = []
    masks: Optional[dict[str, MaskRaster]] = {} if spec.emit_masks else None
    truth = GroundTruth(n_images=0, seed=spec.seed)

    row = 0
    for gspec in spec.groups:
        code = gspec.group.code
        sigma = gspec.within_sigma or spec.within_sigma
        rng = make_rng(spec.seed, "cohort", code)
        means = _unit_sphere(rng, gspec.n_ids, spec.dim)

        for ident_idx in range(gspec.n_ids):
            identity_id = f"{code}-{ident_idx:04d}"
            for img_idx in range(gspec.imgs_per_id):
                image_id = f"{identity_id}-{img_idx:03d}"

                source = ident_idx
                if gspec.n_ids > 1 and rng.random() < spec.noise_rate:
                    source = int((ident_idx + 1
                                  + rng.integers(0, gspec.n_ids - 1))
                                 % gspec.n_ids)
                    truth.noise.append(NoiseEntry(
                        image_id, identity_id, f"{code}-{source:04d}"))
                v = means[source] + rng.normal(scale=sigma, size=spec.dim)
                v /= np.linalg.norm(v)
                vectors.append(v)

                attrs = {
                    "pitch": float(rng.uniform(*dists.pose)),
                    "yaw": float(rng.uniform(*dists.pose)),
                    "roll": float(rng.uniform(*dists.pose)),
                    "q_faceqnet": float(rng.uniform(*dists.q_faceqnet)),
                    "q_magface": float(rng.uniform(*dists.q_magface)),
                    "brightness_fsb": float(rng.uniform(*dists.brightness)),
                    "face_area_ratio": float(rng.uniform(*dists.area)),
                    "nose_present": True,
                }
                facial_hair = (gspec.group.gender is Gender.MALE
                               and rng.random() < spec.facial_hair_rate)
                if rng.random() < spec.violation_rate:
                    attribute = VIOLATION_ATTRIBUTES[
                        int(rng.integers(0, len(VIOLATION_ATTRIBUTES)))]
                    _plant_violation(attrs, attribute, gates, rng)
                    truth.violations.append(ViolationEntry(image_id, attribute))

                age = AGE_CHOICES[int(rng.integers(0, len(AGE_CHOICES)))]
                records.append(ImageRecord(
                    image_id=image_id, identity_id=identity_id,
                    race=gspec.group.race, gender=gspec.group.gender,
                    age_group=age, facial_hair=facial_hair,
                    embedding_index=row,
                    mask_path=f"{image_id}.bamk" if spec.emit_masks else None,
                    **attrs))
                if masks is not None:
                    masks[image_id] = _ellipse_mask(
                        spec.mask_params, gspec.group.gender, facial_hair, rng)
                row += 1

    truth.n_images = row
    group_desc = ",".join(f"{g.group.code}:{g.n_ids}x{g.imgs_per_id}"
                          for g in spec.groups)
    provenance = (f"synthetic cohort seed={spec.seed} dim={spec.dim} "
                  f"groups={group_desc} noise_rate={spec.noise_rate!r} "
                  f"violation_rate={spec.violation_rate!r}")
    manifest = Manifest(records, provenance)
    store = EmbeddingStore.from_vectors(
        np.asarray(vectors, dtype=np.float32))
    return manifest, store, masks, truth


@dataclass
class RecoveryStats:
    """How well a pipeline recovered what the generator planted."""

    n_planted_noise: int
    n_dropped: int
    n_true_drops: int
    noise_precision: float
    noise_recall: float
    false_drop_rate: float          # clean images dropped / clean images
    n_planted_violations: int
    n_detected_violations: int
    violation_detection_rate: float
    group_deltas: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "n_planted_noise": self.n_planted_noise,
            "n_dropped": self.n_dropped,
            "n_true_drops": self.n_true_drops,
            "noise_precision": self.noise_precision,
            "noise_recall": self.noise_recall,
            "false_drop_rate": self.false_drop_rate,
            "n_planted_violations": self.n_planted_violations,
            "n_detected_violations": self.n_detected_violations,
            "violation_detection_rate": self.violation_detection_rate,
            "group_deltas": self.group_deltas,
        }, indent=2, sort_keys=True)


def ground_truth_score(original: Manifest, kept: Manifest, truth: GroundTruth,
                       spec: Optional[CohortSpec] = None,
                       measured_genuine_means: Optional[dict] = None
                       ) -> RecoveryStats:
    """Score a pipeline's keep/drop decisions against the answer key.

    Precision counts how many drops were planted noise; recall counts how
    much planted noise was dropped. An empty drop set has precision 1 (no
    false accusations) and, if noise was planted, recall 0. When spec and
    per-group measured genuine means are supplied, group_deltas compares
    each group's measured level against the planted expectation.
    """
    original_ids = {rec.image_id for rec in original}
    kept_ids = {rec.image_id for rec in kept}
    if not kept_ids <= original_ids:
        raise ContractViolation("kept manifest contains unknown image ids")
    planted = truth.noise_ids()
    if not planted <= original_ids:
        raise ContractViolation("ground truth references unknown image ids")
    if truth.n_images != len(original_ids):
        raise ContractViolation(
            f"ground truth covers {truth.n_images} images, manifest has "
            f"{len(original_ids)}")

    dropped = original_ids - kept_ids
    true_drops = dropped & planted
    precision = len(true_drops) / len(dropped) if dropped else 1.0
    recall = len(true_drops) / len(planted) if planted else 1.0
    n_clean = len(original_ids) - len(planted)
    false_drop_rate = (len(dropped) - len(true_drops)) / n_clean if n_clean else 0.0

    violations = truth.violation_ids()
    detected = violations & dropped
    detection_rate = len(detected) / len(violations) if violations else 1.0

    group_deltas: dict = {}
    if spec is not None and measured_genuine_means:
        for code, measured in sorted(measured_genuine_means.items()):
            planted_mean = spec.expected_genuine_mean(code)
            group_deltas[code] = {
                "planted_genuine_mean": planted_mean,
                "measured_genuine_mean": measured,
                "delta": measured - planted_mean,
            }

    return RecoveryStats(
        n_planted_noise=len(planted),
        n_dropped=len(dropped),
        n_true_drops=len(true_drops),
        noise_precision=precision,
        noise_recall=recall,
        false_drop_rate=false_drop_rate,
        n_planted_violations=len(violations),
        n_detected_violations=len(detected),
        violation_detection_rate=detection_rate,
        group_deltas=group_deltas,
    )


def _parse_range(raw: str, name: str) -> tuple[float, float]:
    parts = raw.split()
    if len(parts) != 2:
        raise ManifestParseError(
            f"attribute range {name!r} must be two numbers, got {raw!r}")
    lo, hi = float(parts[0]), float(parts[1])
    if lo > hi:
        raise ManifestParseError(f"attribute range {name!r} is inverted")
    return lo, hi


def load_cohort_config(path: Union[str, Path]) -> CohortSpec:
    """Read a CohortSpec from an INI file.

    Layout: a [cohort] section for scalars, optional [attributes] and
    [masks] sections, and one [group:CODE] section per demographic group
    with n_ids, imgs_per_id and an optional within_sigma override.
    """
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ManifestParseError(f"cannot read cohort config {path}")
    if "cohort" not in parser:
        raise ManifestParseError("cohort config needs a [cohort] section")

    cohort = parser["cohort"]
    kwargs: dict = {
        "dim": cohort.getint("dim", 128),
        "within_sigma": cohort.getfloat("within_sigma", 0.08),
        "noise_rate": cohort.getfloat("noise_rate", 0.0),
        "violation_rate": cohort.getfloat("violation_rate", 0.0),
        "facial_hair_rate": cohort.getfloat("facial_hair_rate", 0.3),
        "seed": cohort.getint("seed", 0),
        "emit_masks": cohort.getboolean("emit_masks", True),
    }

    if "attributes" in parser:
        section = parser["attributes"]
        fields = {}
        for name in ("pose", "q_faceqnet", "q_magface", "brightness", "area"):
            if name in section:
                fields[name] = _parse_range(section[name], name)
        kwargs["attribute_dists"] = AttributeDists(**fields)

    if "masks" in parser:
        section = parser["masks"]
        fields = {}
        for name in ("center_row", "center_col", "semi_height", "semi_width",
                     "jitter", "female_area_offset", "female_top_offset",
                     "male_area_offset", "male_top_offset"):
            if name in section:
                fields[name] = section.getint(name)
        kwargs["mask_params"] = MaskParams(**fields)

    groups: list[GroupSpec] = []
    for name in parser.sections():
        if not name.startswith("group:"):
            continue
        code = name.split(":", 1)[1]
        section = parser[name]
        try:
            group = DemographicGroup.from_code(code)
        except ValueError as exc:
            raise ManifestParseError(str(exc)) from None
        sigma = section.getfloat("within_sigma", fallback=None)
        groups.append(GroupSpec(
            group=group,
            n_ids=section.getint("n_ids"),
            imgs_per_id=section.getint("imgs_per_id"),
            within_sigma=sigma))
    if not groups:
        raise ManifestParseError("cohort config defines no [group:CODE] sections")
    try:
        return CohortSpec(groups=tuple(groups), **kwargs)
    except ValueError as exc:
        raise ManifestParseError(f"invalid cohort config: {exc}") from None
