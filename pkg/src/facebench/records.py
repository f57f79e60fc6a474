"""Canonical data model and the bit-exact on-disk formats shared by every stage.

Three artifact kinds exist:

* Manifest: UTF-8 text, one JSON object per line. Leading lines starting
  with ``#`` form a free-text provenance header. Unknown keys on a record
  line are preserved on round-trip.
* Embedding blob: magic ``BAEM``, version u8=1, dim u32-LE, count u64-LE,
  then count*dim IEEE-754 float32-LE values, row-major. Opened memory-mapped
  so rows are addressable without loading the whole payload.
* Rasters: magic ``BAMK`` (class mask, u8 payload), ``BAGY`` (8-bit gray,
  u8 payload) or ``BAHM`` (heatmap, float32-LE payload); all share the
  header layout magic, version u8=1, width u32-LE, height u32-LE.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence, Union

import numpy as np

from .errors import ContractViolation, FormatError, IntegrityError, ManifestParseError

UNIT_NORM_TOL = 1e-4

EMBEDDING_MAGIC = b"BAEM"
MASK_MAGIC = b"BAMK"
GRAY_MAGIC = b"BAGY"
HEATMAP_MAGIC = b"BAHM"
FORMAT_VERSION = 1

# Per-pixel class table for mask rasters.
CLASS_BACKGROUND = 0
CLASS_SKIN = 1
CLASS_NOSE = 2
CLASS_EYES = 3
CLASS_BROWS = 4
CLASS_MOUTH = 5
CLASS_HAIR = 6
CLASS_FACIAL_HAIR = 7
CLASS_OTHER_FACE = 8
NUM_MASK_CLASSES = 9

# Classes that count as visible face: hair and facial hair are excluded.
FACE_CLASSES = (CLASS_SKIN, CLASS_NOSE, CLASS_EYES, CLASS_BROWS, CLASS_MOUTH,
                CLASS_OTHER_FACE)


class Race(str, Enum):
    WHITE = "White"
    BLACK = "Black"
    ASIAN = "Asian"
    INDIAN = "Indian"


class Gender(str, Enum):
    MALE = "Male"
    FEMALE = "Female"


class AgeGroup(str, Enum):
    YOUNG = "Young"
    MIDDLE_AGED = "MiddleAged"
    SENIOR = "Senior"


_RACE_CODE = {Race.ASIAN: "A", Race.BLACK: "B", Race.INDIAN: "I", Race.WHITE: "W"}
_GENDER_CODE = {Gender.FEMALE: "F", Gender.MALE: "M"}


@dataclass(frozen=True)
class DemographicGroup:
    """One of the 8 race x gender cells."""

    race: Race
    gender: Gender

    @property
    def code(self) -> str:
        return _RACE_CODE[self.race] + _GENDER_CODE[self.gender]

    def __str__(self) -> str:
        return self.code

    @classmethod
    def from_code(cls, code: str) -> "DemographicGroup":
        for group in ALL_GROUPS:
            if group.code == code:
                return group
        raise ValueError(f"unknown demographic group code: {code!r}")


ALL_GROUPS: tuple[DemographicGroup, ...] = tuple(
    DemographicGroup(race, gender)
    for race in (Race.ASIAN, Race.BLACK, Race.INDIAN, Race.WHITE)
    for gender in (Gender.FEMALE, Gender.MALE)
)


@dataclass(frozen=True)
class ImageRecord:
    """One image's identity, demographic labels and measured attributes.

    Attributes other than the two ids may be absent (None); downstream
    gates reject records that lack an attribute they need rather than
    erroring, so partially-populated manifests are legal.
    """

    image_id: str
    identity_id: str
    pitch: Optional[float] = None
    yaw: Optional[float] = None
    roll: Optional[float] = None
    q_faceqnet: Optional[float] = None
    q_magface: Optional[float] = None
    brightness_fsb: Optional[float] = None
    face_area_ratio: Optional[float] = None
    nose_present: Optional[bool] = None
    facial_hair: Optional[bool] = None
    race: Optional[Race] = None
    gender: Optional[Gender] = None
    age_group: Optional[AgeGroup] = None
    embedding_index: Optional[int] = None
    mask_path: Optional[str] = None
    extra: dict = field(default_factory=dict, compare=True)

    @property
    def group(self) -> Optional[DemographicGroup]:
        if self.race is None or self.gender is None:
            return None
        return DemographicGroup(self.race, self.gender)

    def replace(self, **changes) -> "ImageRecord":
        return dataclasses.replace(self, **changes)


# Canonical key order for manifest lines; extras are appended sorted.
_RECORD_FIELDS = (
    "image_id", "identity_id", "pitch", "yaw", "roll", "q_faceqnet",
    "q_magface", "brightness_fsb", "face_area_ratio", "nose_present",
    "facial_hair", "race", "gender", "age_group", "embedding_index",
    "mask_path",
)

_ENUM_FIELDS = {"race": Race, "gender": Gender, "age_group": AgeGroup}
_FLOAT_FIELDS = ("pitch", "yaw", "roll", "q_faceqnet", "q_magface",
                 "brightness_fsb", "face_area_ratio")
_BOOL_FIELDS = ("nose_present", "facial_hair")


def record_to_json(record: ImageRecord) -> str:
    """Serialize one record to its canonical manifest line."""
    payload: dict = {}
    for name in _RECORD_FIELDS:
        value = getattr(record, name)
        if value is None:
            continue
        if isinstance(value, Enum):
            value = value.value
        payload[name] = value
    for key in sorted(record.extra):
        payload[key] = record.extra[key]
    return json.dumps(payload, ensure_ascii=False, separators=(",", ":"))


def record_from_dict(payload: dict, lineno: int) -> ImageRecord:
    if not isinstance(payload, dict):
        raise ManifestParseError(f"line {lineno}: record is not a JSON object")
    for required in ("image_id", "identity_id"):
        if required not in payload:
            raise ManifestParseError(f"line {lineno}: missing required key {required!r}")
    kwargs: dict = {}
    extra: dict = {}
    for key, value in payload.items():
        if key not in _RECORD_FIELDS:
            extra[key] = value
            continue
        if value is None:
            continue
        if key in _ENUM_FIELDS:
            try:
                value = _ENUM_FIELDS[key](value)
            except ValueError:
                raise ManifestParseError(
                    f"line {lineno}: invalid value {value!r} for {key!r}") from None
        elif key in _FLOAT_FIELDS:
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ManifestParseError(
                    f"line {lineno}: {key!r} must be a number, got {value!r}")
            value = float(value)
        elif key in _BOOL_FIELDS:
            if not isinstance(value, bool):
                raise ManifestParseError(
                    f"line {lineno}: {key!r} must be a boolean, got {value!r}")
        elif key == "embedding_index":
            if not isinstance(value, int) or isinstance(value, bool) or value < 0:
                raise ManifestParseError(
                    f"line {lineno}: embedding_index must be a non-negative "
                    f"integer, got {value!r}")
        elif key in ("image_id", "identity_id", "mask_path"):
            if not isinstance(value, str):
                raise ManifestParseError(
                    f"line {lineno}: {key!r} must be a string, got {value!r}")
        kwargs[key] = value
    kwargs["extra"] = extra
    return ImageRecord(**kwargs)


class Manifest:
    """Ordered collection of ImageRecords plus a free-text provenance header.

    Immutable after construction; all mutating pipeline stages return a new
    Manifest.
    """

    def __init__(self, records: Sequence[ImageRecord], provenance: str):
        self._records: tuple[ImageRecord, ...] = tuple(records)
        self.provenance = provenance

    @property
    def records(self) -> tuple[ImageRecord, ...]:
        return self._records

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self) -> Iterator[ImageRecord]:
        return iter(self._records)

    def __getitem__(self, idx: int) -> ImageRecord:
        return self._records[idx]

    def __eq__(self, other) -> bool:
        return (isinstance(other, Manifest)
                and self._records == other._records
                and self.provenance == other.provenance)

    def identity_ids(self) -> list[str]:
        """Distinct identity ids in first-seen order."""
        seen: dict[str, None] = {}
        for rec in self._records:
            seen.setdefault(rec.identity_id, None)
        return list(seen)

    def by_identity(self) -> dict[str, list[int]]:
        """Record indices grouped by identity, first-seen order preserved."""
        groups: dict[str, list[int]] = {}
        for idx, rec in enumerate(self._records):
            groups.setdefault(rec.identity_id, []).append(idx)
        return groups

    def restricted(self, keep: Iterable[ImageRecord]) -> "Manifest":
        """New manifest with the given record subset, same provenance."""
        return Manifest(list(keep), self.provenance)

    def with_provenance(self, provenance: str) -> "Manifest":
        return Manifest(self._records, provenance)

    def write(self, path: Union[str, Path]) -> None:
        write_manifest(self, path)


def load_manifest(path: Union[str, Path]) -> Manifest:
    """Parse a line-delimited manifest file.

    Raises ManifestParseError for malformed lines (naming the line number)
    and IntegrityError for duplicate image ids (citing both lines).
    """
    provenance_lines: list[str] = []
    records: list[ImageRecord] = []
    seen: dict[str, int] = {}
    in_header = True
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                if in_header:
                    provenance_lines.append(line[1:].lstrip(" "))
                continue
            in_header = False
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestParseError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            record = record_from_dict(payload, lineno)
            if record.image_id in seen:
                raise IntegrityError(
                    f"duplicate image_id {record.image_id!r} on lines "
                    f"{seen[record.image_id]} and {lineno}")
            seen[record.image_id] = lineno
            records.append(record)
    return Manifest(records, "\n".join(provenance_lines))


def write_manifest(manifest: Manifest, path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in manifest.provenance.splitlines():
            fh.write(f"# {line}\n" if line else "#\n")
        for record in manifest.records:
            fh.write(record_to_json(record))
            fh.write("\n")


_EMB_HEADER = struct.Struct("<4sBIQ")  # magic, version, dim, count


class EmbeddingStore:
    """Fixed-dimension unit-norm float32 vectors addressed by row index.

    Backed either by an in-memory array or a read-only memory map, so a
    store larger than RAM stays addressable row by row.
    """

    def __init__(self, vectors: np.ndarray):
        if vectors.ndim != 2:
            raise ContractViolation("embedding array must be 2-dimensional")
        self._vectors = vectors

    @classmethod
    def from_vectors(cls, vectors: np.ndarray) -> "EmbeddingStore":
        return cls(np.ascontiguousarray(vectors, dtype=np.float32))

    @classmethod
    def open(cls, path: Union[str, Path]) -> "EmbeddingStore":
        """Memory-map an embedding blob without reading the payload."""
        path = Path(path)
        size = path.stat().st_size
        if size < _EMB_HEADER.size:
            raise FormatError(f"{path}: file shorter than the embedding header")
        with open(path, "rb") as fh:
            magic, version, dim, count = _EMB_HEADER.unpack(fh.read(_EMB_HEADER.size))
        if magic != EMBEDDING_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {EMBEDDING_MAGIC!r}")
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported format version {version}")
        if dim == 0:
            raise FormatError(f"{path}: zero embedding dimension")
        expected = _EMB_HEADER.size + count * dim * 4
        if size != expected:
            raise FormatError(
                f"{path}: payload size mismatch, header promises {count}x{dim} "
                f"float32 ({expected} bytes) but file has {size} bytes")
        vectors = np.memmap(path, dtype="<f4", mode="r",
                            offset=_EMB_HEADER.size, shape=(count, dim))
        return cls(vectors)

    @property
    def dim(self) -> int:
        return int(self._vectors.shape[1])

    @property
    def count(self) -> int:
        return int(self._vectors.shape[0])

    def row(self, index: int) -> np.ndarray:
        if not 0 <= index < self.count:
            raise ContractViolation(
                f"embedding index {index} out of range [0, {self.count})")
        return np.asarray(self._vectors[index])

    def rows(self, indices: np.ndarray) -> np.ndarray:
        """Gather rows for an index array; validates bounds."""
        indices = np.asarray(indices)
        if indices.size and (indices.min() < 0 or indices.max() >= self.count):
            raise ContractViolation("embedding index out of range")
        return np.asarray(self._vectors[indices])

    def norms(self) -> np.ndarray:
        return np.linalg.norm(np.asarray(self._vectors, dtype=np.float64), axis=1)

    def write(self, path: Union[str, Path]) -> None:
        write_embeddings(np.asarray(self._vectors), path)


def write_embeddings(vectors: np.ndarray, path: Union[str, Path]) -> None:
    vectors = np.ascontiguousarray(vectors, dtype="<f4")
    if vectors.ndim != 2:
        raise ContractViolation("embedding array must be 2-dimensional")
    count, dim = vectors.shape
    with open(path, "wb") as fh:
        fh.write(_EMB_HEADER.pack(EMBEDDING_MAGIC, FORMAT_VERSION, dim, count))
        fh.write(vectors.tobytes(order="C"))


def open_embeddings(path: Union[str, Path]) -> EmbeddingStore:
    return EmbeddingStore.open(path)


_RASTER_HEADER = struct.Struct("<4sBII")  # magic, version, width, height


@dataclass(frozen=True)
class MaskRaster:
    """Per-pixel face-part class map, shape (height, width), uint8."""

    classes: np.ndarray

    def __post_init__(self):
        if self.classes.ndim != 2 or self.classes.dtype != np.uint8:
            raise ContractViolation("mask classes must be a 2-D uint8 array")

    @property
    def width(self) -> int:
        return int(self.classes.shape[1])

    @property
    def height(self) -> int:
        return int(self.classes.shape[0])

    def face_indicator(self) -> np.ndarray:
        """Boolean face map: skin/nose/eyes/brows/mouth/other, no hair."""
        out = np.zeros(self.classes.shape, dtype=bool)
        for cls in FACE_CLASSES:
            out |= self.classes == cls
        return out


def _read_raster_header(path: Path, expect_magic: bytes) -> tuple[int, int, int]:
    size = path.stat().st_size
    if size < _RASTER_HEADER.size:
        raise FormatError(f"{path}: file shorter than the raster header")
    with open(path, "rb") as fh:
        magic, version, width, height = _RASTER_HEADER.unpack(fh.read(_RASTER_HEADER.size))
    if magic != expect_magic:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {expect_magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    if width == 0 or height == 0:
        raise FormatError(f"{path}: zero raster dimension")
    return width, height, size


def _read_u8_raster(path: Union[str, Path], magic: bytes) -> np.ndarray:
    path = Path(path)
    width, height, size = _read_raster_header(path, magic)
    expected = _RASTER_HEADER.size + width * height
    if size != expected:
        raise FormatError(
            f"{path}: payload size mismatch, header promises {width}x{height} "
            f"bytes ({expected} total) but file has {size} bytes")
    data = np.fromfile(path, dtype=np.uint8, offset=_RASTER_HEADER.size)
    return data.reshape(height, width)


def load_mask(path: Union[str, Path]) -> MaskRaster:
    classes = _read_u8_raster(path, MASK_MAGIC)
    if classes.max(initial=0) >= NUM_MASK_CLASSES:
        raise FormatError(f"{path}: class index {int(classes.max())} exceeds "
                          f"{NUM_MASK_CLASSES - 1}")
    return MaskRaster(classes)


def write_mask(mask: MaskRaster, path: Union[str, Path]) -> None:
    _write_u8_raster(mask.classes, path, MASK_MAGIC)


def load_gray(path: Union[str, Path]) -> np.ndarray:
    """8-bit grayscale raster (BT.601 luma emitted by the extractor)."""
    return _read_u8_raster(path, GRAY_MAGIC)


def write_gray(gray: np.ndarray, path: Union[str, Path]) -> None:
    _write_u8_raster(gray, path, GRAY_MAGIC)


def _write_u8_raster(data: np.ndarray, path: Union[str, Path], magic: bytes) -> None:
    data = np.ascontiguousarray(data, dtype=np.uint8)
    if data.ndim != 2:
        raise ContractViolation("raster must be a 2-D array")
    height, width = data.shape
    with open(path, "wb") as fh:
        fh.write(_RASTER_HEADER.pack(magic, FORMAT_VERSION, width, height))
        fh.write(data.tobytes(order="C"))


def load_heatmap(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    width, height, size = _read_raster_header(path, HEATMAP_MAGIC)
    expected = _RASTER_HEADER.size + width * height * 4
    if size != expected:
        raise FormatError(f"{path}: payload size mismatch")
    data = np.fromfile(path, dtype="<f4", offset=_RASTER_HEADER.size)
    return data.reshape(height, width)


def write_heatmap(grid: np.ndarray, path: Union[str, Path]) -> None:
    grid = np.ascontiguousarray(grid, dtype="<f4")
    if grid.ndim != 2:
        raise ContractViolation("heatmap must be a 2-D array")
    height, width = grid.shape
    with open(path, "wb") as fh:
        fh.write(_RASTER_HEADER.pack(HEATMAP_MAGIC, FORMAT_VERSION, width, height))
        fh.write(grid.tobytes(order="C"))


@dataclass(frozen=True)
class Finding:
    kind: str
    subject: str
    detail: str


@dataclass
class ValidationReport:
    findings: list[Finding]
    group_counts: dict[str, int]

    @property
    def ok(self) -> bool:
        return not self.findings

    def to_json(self) -> str:
        return json.dumps({
            "ok": self.ok,
            "findings": [dataclasses.asdict(f) for f in self.findings],
            "group_counts": self.group_counts,
        }, indent=2, sort_keys=True)


_FIELD_RANGES = (
    ("q_faceqnet", 0.0, 1.0),
    ("brightness_fsb", 0.0, 255.0),
    ("face_area_ratio", 0.0, 1.0),
)


def validate(manifest: Manifest, store: Optional[EmbeddingStore] = None) -> ValidationReport:
    """Cross-check a manifest (and optionally its embedding store).

    Nothing raises; every problem becomes a Finding in the report.
    """
    findings: list[Finding] = []
    group_counts: dict[str, int] = {g.code: 0 for g in ALL_GROUPS}

    if not manifest.provenance.strip():
        findings.append(Finding("provenance", "<manifest>", "empty provenance header"))

    seen: dict[str, int] = {}
    for idx, rec in enumerate(manifest.records):
        if rec.image_id in seen:
            findings.append(Finding(
                "duplicate_image_id", rec.image_id,
                f"records {seen[rec.image_id]} and {idx} share an image_id"))
        else:
            seen[rec.image_id] = idx

        group = rec.group
        if group is not None:
            group_counts[group.code] += 1
        else:
            group_counts["unknown"] = group_counts.get("unknown", 0) + 1

        for name, lo, hi in _FIELD_RANGES:
            value = getattr(rec, name)
            if value is not None and not (lo <= value <= hi):
                findings.append(Finding(
                    "field_range", rec.image_id,
                    f"{name}={value!r} outside [{lo}, {hi}]"))
        if rec.q_magface is not None and rec.q_magface < 0:
            findings.append(Finding(
                "field_range", rec.image_id, f"q_magface={rec.q_magface!r} negative"))

        if store is not None:
            if rec.embedding_index is None:
                findings.append(Finding(
                    "embedding_index_missing", rec.image_id,
                    "record has no embedding_index but a store was supplied"))
            elif not 0 <= rec.embedding_index < store.count:
                findings.append(Finding(
                    "embedding_index_range", rec.image_id,
                    f"embedding_index={rec.embedding_index} outside "
                    f"[0, {store.count})"))

    if store is not None:
        norms = store.norms()
        bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_NORM_TOL)
        for row in bad:
            findings.append(Finding(
                "non_unit_row", f"row {int(row)}",
                f"norm {norms[row]:.6f} deviates from 1 by more than {UNIT_NORM_TOL}"))

    return ValidationReport(findings, group_counts)
