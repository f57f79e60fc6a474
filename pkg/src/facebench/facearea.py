"""Mask-derived measurements and gender-morphology balancing.

The face indicator counts skin, nose, eyes, brows, mouth and other_face
pixels; hair and facial hair are deliberately excluded so that hairstyle
and beard coverage do not masquerade as face area. All operations are
pure; mean-mask accumulation sums integer indicators, which is exact in
any order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .errors import ContractViolation, DegenerateInput
from .records import (
    CLASS_NOSE,
    CLASS_SKIN,
    Gender,
    Manifest,
    MaskRaster,
    write_heatmap,
)

ALIGN_SIZE = 224  # pipeline-standard mask width and height

Pair = tuple[str, str]


def area_ratio(mask: MaskRaster) -> float:
    """Fraction of pixels covered by face classes."""
    face = mask.face_indicator()
    return float(np.count_nonzero(face)) / face.size


def nose_present(mask: MaskRaster) -> bool:
    return bool(np.any(mask.classes == CLASS_NOSE))


def mask_iou(a: MaskRaster, b: MaskRaster) -> float:
    """Intersection-over-union of the two face indicators.

    Two empty faces are identical as sets, so their IoU is 1 by
    convention; upstream gates remove such images before pairing anyway.
    """
    if a.classes.shape != b.classes.shape:
        raise ContractViolation("mask dimensions differ")
    fa = a.face_indicator()
    fb = b.face_indicator()
    union = int(np.count_nonzero(fa | fb))
    if union == 0:
        return 1.0
    inter = int(np.count_nonzero(fa & fb))
    return inter / union


@dataclass
class BalanceResult:
    kept: list[Pair]
    dropped: list[tuple[Pair, str]]  # reason: "iou" or "missing_mask"


def balance_pairs_by_iou(pairs: Iterable[Pair],
                         masks: Mapping[str, MaskRaster],
                         min_iou: float = 0.9) -> BalanceResult:
    """Keep pairs whose face IoU strictly exceeds min_iou.

    Input order is preserved. A pair with a missing mask is dropped and
    logged rather than raising, so one bad extraction cannot sink a run.
    """
    kept: list[Pair] = []
    dropped: list[tuple[Pair, str]] = []
    for pair in pairs:
        id_a, id_b = pair
        if id_a not in masks or id_b not in masks:
            dropped.append((pair, "missing_mask"))
            continue
        if mask_iou(masks[id_a], masks[id_b]) > min_iou:
            kept.append(pair)
        else:
            dropped.append((pair, "iou"))
    return BalanceResult(kept, dropped)


@dataclass(frozen=True)
class HeatmapGrid:
    """Per-pixel difference of mean face indicators, in [-1, 1]."""

    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ContractViolation("heatmap values must be 2-D")

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    def mean_abs(self) -> float:
        return float(np.abs(self.values).mean())

    def write_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            for row in self.values:
                writer.writerow([repr(float(v)) for v in row])

    def write_raster(self, path: Union[str, Path]) -> None:
        write_heatmap(self.values.astype(np.float32), path)


def _indicator_mean(masks: Sequence[MaskRaster]) -> np.ndarray:
    shape = masks[0].classes.shape
    acc = np.zeros(shape, dtype=np.int64)
    for mask in masks:
        if mask.classes.shape != shape:
            raise ContractViolation("masks in a group must share dimensions")
        acc += mask.face_indicator()
    return acc.astype(np.float64) / len(masks)


def mean_mask_diff(group_a: Sequence[MaskRaster],
                   group_b: Sequence[MaskRaster]) -> HeatmapGrid:
    """Mean face indicator of group A minus group B, per pixel."""
    if not group_a or not group_b:
        raise DegenerateInput("both mask groups must be non-empty")
    mean_a = _indicator_mean(group_a)
    mean_b = _indicator_mean(group_b)
    if mean_a.shape != mean_b.shape:
        raise ContractViolation("the two groups' mask dimensions differ")
    return HeatmapGrid(mean_a - mean_b)


def exclude_facial_hair(manifest: Manifest) -> Manifest:
    """Drop male records flagged with facial hair; keep everything else.

    The rule is male-only: a facial_hair flag on a female record is
    retained, and records with an unknown flag are retained too.
    """
    kept = [rec for rec in manifest
            if not (rec.facial_hair is True and rec.gender is Gender.MALE)]
    return manifest.restricted(kept)


def compute_fsb(gray: np.ndarray, mask: MaskRaster) -> float:
    """Mean 8-bit grayscale value over skin pixels only."""
    gray = np.asarray(gray)
    if gray.shape != mask.classes.shape:
        raise ContractViolation("grayscale and mask dimensions differ")
    skin = mask.classes == CLASS_SKIN
    n = int(np.count_nonzero(skin))
    if n == 0:
        raise DegenerateInput("no skin pixels to average over")
    return float(gray[skin].astype(np.float64).sum() / n)
