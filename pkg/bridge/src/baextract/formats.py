"""Writers for the downstream toolkit's published file formats.

The evaluation core is a separate package; this bridge talks to it only
through files. The layouts here are implemented against the published
format contract (magics, little-endian headers, payload shapes), not
against the core's code, so they double as an independent check of that
contract.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Sequence, Union

import numpy as np

EMBEDDING_MAGIC = b"BAEM"
MASK_MAGIC = b"BAMK"
GRAY_MAGIC = b"BAGY"
FORMAT_VERSION = 1

EMB_HEADER = struct.Struct("<4sBIQ")  # magic, version, dim, count
RASTER_HEADER = struct.Struct("<4sBII")  # magic, version, width, height

# Per-pixel class table shared with the core.
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

# Classes that count as visible face; scalp and facial hair do not.
FACE_CLASSES = (CLASS_SKIN, CLASS_NOSE, CLASS_EYES, CLASS_BROWS,
                CLASS_MOUTH, CLASS_OTHER_FACE)

# Canonical manifest key order; keeps emitted lines diff-stable.
RECORD_FIELDS = (
    "image_id", "identity_id", "pitch", "yaw", "roll", "q_faceqnet",
    "q_magface", "brightness_fsb", "face_area_ratio", "nose_present",
    "facial_hair", "race", "gender", "age_group", "embedding_index",
    "mask_path",
)

RACES = ("White", "Black", "Asian", "Indian")
GENDERS = ("Male", "Female")
AGE_GROUPS = ("Young", "MiddleAged", "Senior")


def record_line(fields: dict) -> str:
    """One manifest line: canonical key order, None fields omitted."""
    payload = {}
    for name in RECORD_FIELDS:
        value = fields.get(name)
        if value is not None:
            payload[name] = value
    for key in sorted(set(fields) - set(RECORD_FIELDS)):
        if fields[key] is not None:
            payload[key] = fields[key]
    return json.dumps(payload, ensure_ascii=False, separators=(",", ":"))


def write_manifest(path: Union[str, Path], header_lines: Sequence[str],
                   records: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n" if line else "#\n")
        for fields in records:
            fh.write(record_line(fields))
            fh.write("\n")


def write_embeddings(path: Union[str, Path], vectors: np.ndarray) -> None:
    vectors = np.ascontiguousarray(vectors, dtype="<f4")
    if vectors.ndim != 2:
        raise ValueError("embedding array must be 2-dimensional")
    count, dim = vectors.shape
    with open(path, "wb") as fh:
        fh.write(EMB_HEADER.pack(EMBEDDING_MAGIC, FORMAT_VERSION, dim, count))
        fh.write(vectors.tobytes(order="C"))


def _write_u8_raster(path: Union[str, Path], data: np.ndarray,
                     magic: bytes) -> None:
    data = np.ascontiguousarray(data, dtype=np.uint8)
    if data.ndim != 2:
        raise ValueError("raster must be a 2-D array")
    height, width = data.shape
    with open(path, "wb") as fh:
        fh.write(RASTER_HEADER.pack(magic, FORMAT_VERSION, width, height))
        fh.write(data.tobytes(order="C"))


def write_mask(path: Union[str, Path], classes: np.ndarray) -> None:
    _write_u8_raster(path, classes, MASK_MAGIC)


def write_gray(path: Union[str, Path], gray: np.ndarray) -> None:
    _write_u8_raster(path, gray, GRAY_MAGIC)


def bt601_luma(rgb: np.ndarray) -> np.ndarray:
    """ITU-R BT.601 luma of an (H, W, 3) uint8 image, rounded to uint8."""
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("expected an (H, W, 3) RGB array")
    weights = np.array([0.299, 0.587, 0.114], dtype=np.float64)
    luma = rgb.astype(np.float64) @ weights
    return np.clip(np.rint(luma), 0, 255).astype(np.uint8)
