"""Attribute gates that cut a raw manifest down to evaluation-grade images.

Every gate is boundary-inclusive and every gate is evaluated for every
record (no short-circuit), so rejection statistics count all reasons a
record fails, not just the first one. A record missing an attribute a
gate needs is rejected with ``attribute_missing`` rather than silently
passed; an unverifiable image has no place in a balanced set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .records import ImageRecord, Manifest

GATE_ORDER = ("quality_faceqnet", "quality_magface", "pose", "brightness",
              "face_area", "nose_missing")
ATTRIBUTE_MISSING = "attribute_missing"


@dataclass(frozen=True)
class GateConfig:
    """Thresholds for the six attribute gates.

    Defaults reproduce the published curation recipe: FaceQnet quality
    above 0.3, MagFace quality at least 20, head pose within 20 degrees
    on every axis, skin brightness inside [115.86, 198.75], face area
    at least 20% of the frame, and a detected nose.
    """

    q_faceqnet_min: float = 0.3
    q_magface_min: float = 20.0
    pose_max: float = 20.0
    fsb_low: float = 115.86
    fsb_high: float = 198.75
    area_min: float = 0.20
    require_nose: bool = True

    def __post_init__(self):
        if self.fsb_low > self.fsb_high:
            raise ValueError("fsb_low must not exceed fsb_high")
        if self.pose_max < 0:
            raise ValueError("pose_max must be non-negative")


@dataclass(frozen=True)
class GateDecision:
    """Outcome of gating one record; failures keeps GATE_ORDER order."""

    image_id: str
    passed: bool
    failures: tuple[str, ...]


def gate_record(record: ImageRecord, config: GateConfig) -> GateDecision:
    """Evaluate all gates for one record."""
    failures: list[str] = []
    missing = False

    if record.q_faceqnet is None:
        missing = True
    elif record.q_faceqnet < config.q_faceqnet_min:
        failures.append("quality_faceqnet")

    if record.q_magface is None:
        missing = True
    elif record.q_magface < config.q_magface_min:
        failures.append("quality_magface")

    angles = (record.pitch, record.yaw, record.roll)
    if any(a is None for a in angles):
        missing = True
    elif any(abs(a) > config.pose_max for a in angles):
        failures.append("pose")

    if record.brightness_fsb is None:
        missing = True
    elif not (config.fsb_low <= record.brightness_fsb <= config.fsb_high):
        failures.append("brightness")

    if record.face_area_ratio is None:
        missing = True
    elif record.face_area_ratio < config.area_min:
        failures.append("face_area")

    if config.require_nose:
        if record.nose_present is None:
            missing = True
        elif not record.nose_present:
            failures.append("nose_missing")

    if missing:
        failures.append(ATTRIBUTE_MISSING)
    return GateDecision(record.image_id, not failures, tuple(failures))


@dataclass
class RejectionStats:
    """Aggregate accounting for one filter pass."""

    total: int = 0
    kept: int = 0
    reason_counts: dict = field(default_factory=dict)
    group_kept: dict = field(default_factory=dict)
    group_rejected: dict = field(default_factory=dict)
    rejected: list = field(default_factory=list)  # list[GateDecision]

    @property
    def rejected_count(self) -> int:
        return self.total - self.kept

    def to_json(self) -> str:
        return json.dumps({
            "total": self.total,
            "kept": self.kept,
            "rejected": self.rejected_count,
            "reason_counts": self.reason_counts,
            "group_kept": self.group_kept,
            "group_rejected": self.group_rejected,
            "rejected_ids": [
                {"image_id": d.image_id, "failures": list(d.failures)}
                for d in self.rejected
            ],
        }, indent=2, sort_keys=True)


def filter_manifest(manifest: Manifest,
                    config: GateConfig) -> tuple[Manifest, RejectionStats]:
    """Apply all gates; returns the surviving manifest and the accounting.

    Record order is preserved. Running the same config on the output is a
    no-op because every surviving record already passes every gate.
    """
    stats = RejectionStats(total=len(manifest))
    kept: list[ImageRecord] = []
    for record in manifest:
        decision = gate_record(record, config)
        group = record.group
        group_key = group.code if group is not None else "unknown"
        if decision.passed:
            kept.append(record)
            stats.kept += 1
            stats.group_kept[group_key] = stats.group_kept.get(group_key, 0) + 1
        else:
            stats.rejected.append(decision)
            stats.group_rejected[group_key] = stats.group_rejected.get(group_key, 0) + 1
            for reason in decision.failures:
                stats.reason_counts[reason] = stats.reason_counts.get(reason, 0) + 1
    return manifest.restricted(kept), stats
