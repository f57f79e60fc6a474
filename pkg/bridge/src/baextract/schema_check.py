"""Byte-level verification of an extraction output directory.

Runs before the artifacts are handed downstream: headers, payload
sizes, field ranges and manifest/blob/mask index alignment are checked
straight off the bytes with no shared reader code, so a writer bug
cannot hide behind a matching reader bug. Problems become findings in
a report; nothing raises.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .formats import (
    AGE_GROUPS,
    EMB_HEADER,
    EMBEDDING_MAGIC,
    FORMAT_VERSION,
    GENDERS,
    GRAY_MAGIC,
    MASK_MAGIC,
    NUM_MASK_CLASSES,
    RACES,
    RASTER_HEADER,
)
from .extract import EMBEDDINGS_NAME, MANIFEST_NAME

UNIT_NORM_TOL = 1e-4

_RANGES = (
    ("pitch", -180.0, 180.0),
    ("yaw", -180.0, 180.0),
    ("roll", -180.0, 180.0),
    ("q_faceqnet", 0.0, 1.0),
    ("brightness_fsb", 0.0, 255.0),
    ("face_area_ratio", 0.0, 1.0),
)

_ENUMS = (("race", RACES), ("gender", GENDERS), ("age_group", AGE_GROUPS))


@dataclass(frozen=True)
class CheckFinding:
    subject: str
    detail: str


@dataclass
class CheckReport:
    findings: list[CheckFinding]
    n_records: int

    @property
    def ok(self) -> bool:
        return not self.findings

    def to_json(self) -> str:
        return json.dumps({
            "ok": self.ok,
            "n_records": self.n_records,
            "findings": [dataclasses.asdict(f) for f in self.findings],
        }, indent=2, sort_keys=True)


def _read_records(path: Path, findings: list[CheckFinding]) -> list[dict]:
    records: list[dict] = []
    seen: dict[str, int] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as exc:
                findings.append(CheckFinding(
                    f"{path.name}:{lineno}", f"invalid JSON: {exc.msg}"))
                continue
            for required in ("image_id", "identity_id", "embedding_index",
                             "mask_path"):
                if required not in payload:
                    findings.append(CheckFinding(
                        f"{path.name}:{lineno}", f"missing {required}"))
            image_id = payload.get("image_id")
            if isinstance(image_id, str):
                if image_id in seen:
                    findings.append(CheckFinding(
                        f"{path.name}:{lineno}",
                        f"duplicate image_id {image_id!r} "
                        f"(first on line {seen[image_id]})"))
                seen[image_id] = lineno
            for name, lo, hi in _RANGES:
                value = payload.get(name)
                if value is not None and not (
                        isinstance(value, (int, float))
                        and not isinstance(value, bool)
                        and lo <= value <= hi):
                    findings.append(CheckFinding(
                        f"{path.name}:{lineno}",
                        f"{name}={value!r} outside [{lo}, {hi}]"))
            qm = payload.get("q_magface")
            if qm is not None and (not isinstance(qm, (int, float))
                                   or isinstance(qm, bool) or qm < 0):
                findings.append(CheckFinding(
                    f"{path.name}:{lineno}", f"q_magface={qm!r} negative"))
            for name, allowed in _ENUMS:
                value = payload.get(name)
                if value is not None and value not in allowed:
                    findings.append(CheckFinding(
                        f"{path.name}:{lineno}",
                        f"{name}={value!r} not one of {allowed}"))
            records.append(payload)
    return records


def _check_embeddings(path: Path, n_records: int,
                      findings: list[CheckFinding]) -> Optional[int]:
    """Returns the blob's row count when the header and size hold."""
    if not path.is_file():
        findings.append(CheckFinding(path.name, "embedding blob missing"))
        return None
    blob = path.read_bytes()
    if len(blob) < EMB_HEADER.size:
        findings.append(CheckFinding(
            path.name, "file shorter than the embedding header"))
        return None
    magic, version, dim, count = EMB_HEADER.unpack_from(blob)
    if magic != EMBEDDING_MAGIC:
        findings.append(CheckFinding(
            path.name, f"bad magic {magic!r}, expected {EMBEDDING_MAGIC!r}"))
        return None
    if version != FORMAT_VERSION:
        findings.append(CheckFinding(
            path.name, f"unsupported format version {version}"))
        return None
    if dim == 0:
        findings.append(CheckFinding(path.name, "zero embedding dimension"))
        return None
    expected = EMB_HEADER.size + count * dim * 4
    if len(blob) != expected:
        findings.append(CheckFinding(
            path.name,
            f"payload size mismatch: header promises {count}x{dim} float32 "
            f"({expected} bytes) but file has {len(blob)} bytes"))
        return None
    if count != n_records:
        findings.append(CheckFinding(
            path.name,
            f"blob holds {count} rows but the manifest has {n_records} "
            "records"))
    if count:
        rows = np.frombuffer(blob, dtype="<f4",
                             offset=EMB_HEADER.size).reshape(count, dim)
        norms = np.linalg.norm(rows.astype(np.float64), axis=1)
        for row in np.flatnonzero(np.abs(norms - 1.0) > UNIT_NORM_TOL):
            findings.append(CheckFinding(
                f"{path.name}:row {int(row)}",
                f"norm {norms[row]:.6f} deviates from 1 by more than "
                f"{UNIT_NORM_TOL}"))
    return count


def _check_raster(path: Path, magic: bytes, bytes_per_px: int,
                  findings: list[CheckFinding]
                  ) -> Optional[tuple[int, int, bytes]]:
    """Header/size check; returns (width, height, payload) when intact."""
    blob = path.read_bytes()
    if len(blob) < RASTER_HEADER.size:
        findings.append(CheckFinding(
            path.name, "file shorter than the raster header"))
        return None
    got_magic, version, width, height = RASTER_HEADER.unpack_from(blob)
    if got_magic != magic:
        findings.append(CheckFinding(
            path.name, f"bad magic {got_magic!r}, expected {magic!r}"))
        return None
    if version != FORMAT_VERSION:
        findings.append(CheckFinding(
            path.name, f"unsupported format version {version}"))
        return None
    if width == 0 or height == 0:
        findings.append(CheckFinding(path.name, "zero raster dimension"))
        return None
    expected = RASTER_HEADER.size + width * height * bytes_per_px
    if len(blob) != expected:
        findings.append(CheckFinding(
            path.name,
            f"payload size mismatch: header promises {width}x{height} "
            f"({expected} bytes) but file has {len(blob)} bytes"))
        return None
    return width, height, blob[RASTER_HEADER.size:]


def schema_check(output_dir) -> CheckReport:
    """Verify every artifact in an extraction output directory."""
    output_dir = Path(output_dir)
    findings: list[CheckFinding] = []

    manifest_path = output_dir / MANIFEST_NAME
    if not manifest_path.is_file():
        findings.append(CheckFinding(MANIFEST_NAME, "manifest missing"))
        return CheckReport(findings, 0)
    records = _read_records(manifest_path, findings)

    count = _check_embeddings(output_dir / EMBEDDINGS_NAME, len(records),
                              findings)

    indices = [r["embedding_index"] for r in records
               if isinstance(r.get("embedding_index"), int)
               and not isinstance(r.get("embedding_index"), bool)]
    if count is not None and sorted(indices) != list(range(count)):
        findings.append(CheckFinding(
            MANIFEST_NAME,
            f"embedding indices do not cover 0..{count - 1} exactly"))

    for r in records:
        mask_rel = r.get("mask_path")
        image_id = r.get("image_id", "<missing id>")
        if not isinstance(mask_rel, str):
            continue  # already reported as a missing field
        mask_path = output_dir / mask_rel
        if not mask_path.is_file():
            findings.append(CheckFinding(
                image_id, f"mask file missing: {mask_rel}"))
            continue
        mask = _check_raster(mask_path, MASK_MAGIC, 1, findings)
        gray_path = mask_path.with_suffix(".bagy")
        if not gray_path.is_file():
            findings.append(CheckFinding(
                image_id, f"grayscale raster missing: {gray_path.name}"))
            gray = None
        else:
            gray = _check_raster(gray_path, GRAY_MAGIC, 1, findings)
        if mask is not None:
            width, height, payload = mask
            top = max(payload)
            if top >= NUM_MASK_CLASSES:
                findings.append(CheckFinding(
                    mask_path.name,
                    f"class index {top} exceeds {NUM_MASK_CLASSES - 1}"))
            if gray is not None and (gray[0], gray[1]) != (width, height):
                findings.append(CheckFinding(
                    image_id,
                    f"mask is {width}x{height} but grayscale is "
                    f"{gray[0]}x{gray[1]}"))

    return CheckReport(findings, len(records))
