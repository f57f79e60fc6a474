"""Experiment recipes: seeded subsampling, distribution comparison, and
quality-driven benchmark assembly.

Benchmark assembly intentionally selects poor-quality images: qualities
are min-max normalized, averaged, and each group contributes 90 subjects
with 5 images strictly below that group's median aggregated quality, so
the resulting set stresses the matcher where disparities surface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ContractViolation, DegenerateInput
from .evaluation import ScoreDistribution
from .records import ALL_GROUPS, DemographicGroup, ImageRecord, Manifest
from .seeds import make_rng

AGG_RULES = ("mean", "min", "product")


@dataclass(frozen=True)
class SubsampleSpec:
    n_ids: int
    imgs_per_id: int
    group: DemographicGroup
    seed: int

    def __post_init__(self):
        if self.n_ids < 1 or self.imgs_per_id < 1:
            raise ValueError("n_ids and imgs_per_id must be at least 1")

    @property
    def label(self) -> str:
        return f"{self.group.code}-{self.n_ids}-{self.imgs_per_id}"


def subsample(manifest: Manifest, spec: SubsampleSpec) -> Manifest:
    """Seeded pick of n_ids identities x imgs_per_id images from one group.

    Only identities with at least imgs_per_id images in the group are
    eligible. Output preserves the input record order; the same seed
    reproduces the same records.
    """
    by_identity: dict[str, list[int]] = {}
    for idx, rec in enumerate(manifest):
        if rec.group == spec.group:
            by_identity.setdefault(rec.identity_id, []).append(idx)
    eligible = [ident for ident, indices in by_identity.items()
                if len(indices) >= spec.imgs_per_id]
    if len(eligible) < spec.n_ids:
        raise ContractViolation(
            f"group {spec.group.code}: not enough identities with "
            f">= {spec.imgs_per_id} images, need {spec.n_ids} have {len(eligible)}")

    rng = make_rng(spec.seed, "subsample", spec.group.code)
    pick = rng.choice(len(eligible), size=spec.n_ids, replace=False)
    chosen_idents = [eligible[i] for i in sorted(pick.tolist())]
    keep_indices: list[int] = []
    for ident in chosen_idents:
        indices = by_identity[ident]
        img_pick = rng.choice(len(indices), size=spec.imgs_per_id, replace=False)
        keep_indices.extend(indices[i] for i in sorted(img_pick.tolist()))
    keep_indices.sort()
    return manifest.restricted([manifest[i] for i in keep_indices])


def ks_distance(a: ScoreDistribution, b: ScoreDistribution) -> float:
    """Max CDF gap between two histograms, evaluated at bin edges."""
    if a.count == 0 or b.count == 0:
        raise DegenerateInput("ks_distance needs non-empty distributions")
    cdf_a = np.cumsum(a.counts) / a.count
    cdf_b = np.cumsum(b.counts) / b.count
    return float(np.max(np.abs(cdf_a - cdf_b)))


def minmax_normalize(values: Sequence[float]) -> list[float]:
    """(v - min) / (max - min) per element."""
    if len(values) < 2:
        raise DegenerateInput("min-max normalization needs at least 2 values")
    lo = min(values)
    hi = max(values)
    if hi == lo:
        raise DegenerateInput("zero range: all values equal")
    span = hi - lo
    return [(v - lo) / span for v in values]


def aggregate_quality(qf_norm: float, qm_norm: float, rule: str = "mean") -> float:
    """Combine the two normalized qualities into one score in [0, 1]."""
    if not (0.0 <= qf_norm <= 1.0 and 0.0 <= qm_norm <= 1.0):
        raise ContractViolation("normalized qualities must be in [0, 1]")
    if rule == "mean":
        return (qf_norm + qm_norm) / 2.0
    if rule == "min":
        return min(qf_norm, qm_norm)
    if rule == "product":
        return qf_norm * qm_norm
    raise ContractViolation(f"unknown aggregation rule {rule!r}")


def lower_median(values: Sequence[float]) -> float:
    """Element at index floor((n-1)/2) of the sorted values."""
    if not values:
        raise DegenerateInput("median of empty list")
    ordered = sorted(values)
    return ordered[(len(ordered) - 1) // 2]


@dataclass
class BenchmarkManifest:
    """Quality-stressed evaluation set plus the selection provenance."""

    manifest: Manifest
    seed: int
    agg_rule: str
    n_subjects: int
    imgs_per_subject: int
    q50: dict[str, float]          # group code -> median aggregated quality
    eligibility: dict[str, int]    # group code -> eligible subject count

    def provenance_block(self) -> str:
        lines = [
            f"benchmark seed={self.seed} agg={self.agg_rule} "
            f"n_subjects={self.n_subjects} imgs_per_subject={self.imgs_per_subject} "
            f"median=lower comparison=strict-less normalization=global",
        ]
        for code in sorted(self.q50):
            lines.append(f"group {code} q50={self.q50[code]!r} "
                         f"eligible={self.eligibility[code]}")
        return "\n".join(lines)


def build_benchmark(manifest: Manifest, seed: int, agg_rule: str = "mean",
                    n_subjects: int = 90,
                    imgs_per_subject: int = 5) -> BenchmarkManifest:
    """Assemble the below-median-quality benchmark per demographic group.

    Both quality measures are min-max normalized over the whole manifest,
    aggregated per image, and compared against each group's lower median
    (strict <). Each populated group contributes n_subjects subjects with
    imgs_per_subject below-median images each; a shortfall is a hard
    error naming the group, never a silently smaller benchmark. Group
    draws use independent seed-derived generators, so adding or removing
    one group never changes another group's picks.
    """
    if agg_rule not in AGG_RULES:
        raise ContractViolation(f"unknown aggregation rule {agg_rule!r}")
    records = manifest.records
    for rec in records:
        if rec.q_faceqnet is None or rec.q_magface is None:
            raise ContractViolation(
                f"record {rec.image_id!r} lacks a quality measurement")
    if len(records) < 2:
        raise DegenerateInput("benchmark needs at least 2 records")

    qf = minmax_normalize([rec.q_faceqnet for rec in records])
    qm = minmax_normalize([rec.q_magface for rec in records])
    agg = [aggregate_quality(f, m, agg_rule) for f, m in zip(qf, qm)]

    group_rows: dict[str, list[int]] = {g.code: [] for g in ALL_GROUPS}
    for idx, rec in enumerate(records):
        if rec.group is not None:
            group_rows[rec.group.code].append(idx)

    q50: dict[str, float] = {}
    eligibility: dict[str, int] = {}
    keep_indices: list[int] = []
    quality_extra: dict[int, tuple[float, float]] = {}

    for group in ALL_GROUPS:
        code = group.code
        rows = group_rows[code]
        if not rows:
            continue
        median = lower_median([agg[i] for i in rows])
        q50[code] = median

        below: dict[str, list[int]] = {}
        for i in rows:
            if agg[i] < median:
                below.setdefault(records[i].identity_id, []).append(i)
        eligible = [ident for ident, imgs in below.items()
                    if len(imgs) >= imgs_per_subject]
        eligibility[code] = len(eligible)
        if len(eligible) < n_subjects:
            raise ContractViolation(
                f"group {code}: not enough subjects with >= {imgs_per_subject} "
                f"below-median images, need {n_subjects} have {len(eligible)}")

        rng = make_rng(seed, "benchmark", code)
        pick = rng.choice(len(eligible), size=n_subjects, replace=False)
        for ident_pos in sorted(pick.tolist()):
            imgs = below[eligible[ident_pos]]
            img_pick = rng.choice(len(imgs), size=imgs_per_subject, replace=False)
            for k in sorted(img_pick.tolist()):
                keep_indices.append(imgs[k])
                quality_extra[imgs[k]] = (agg[imgs[k]], median)

    keep_indices.sort()
    out_records = []
    for i in keep_indices:
        q_agg, median = quality_extra[i]
        extra = dict(records[i].extra)
        extra["q_agg"] = q_agg
        extra["q50_group"] = median
        out_records.append(records[i].replace(extra=extra))

    bench = BenchmarkManifest(
        manifest=Manifest(out_records, manifest.provenance),
        seed=seed, agg_rule=agg_rule, n_subjects=n_subjects,
        imgs_per_subject=imgs_per_subject, q50=q50, eligibility=eligibility)
    prov = manifest.provenance
    block = bench.provenance_block()
    bench.manifest = bench.manifest.with_provenance(
        block if not prov else prov + "\n" + block)
    return bench
