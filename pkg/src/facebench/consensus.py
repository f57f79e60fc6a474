"""Per-identity consensus over demographic labels.

Demographic attributes are estimated per image, so one identity can carry
conflicting labels. Voting picks the most frequently occurring value for
each of race, gender and age group across the identity's records. A tie
has no winner: the field becomes None and is flagged ambiguous rather
than broken arbitrarily.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, TypeVar, Union

from .records import AgeGroup, Gender, ImageRecord, Manifest, Race

T = TypeVar("T")

AGE_ORDER = (AgeGroup.YOUNG, AgeGroup.MIDDLE_AGED, AgeGroup.SENIOR)


@dataclass(frozen=True)
class ConsensusLabels:
    """Voted labels for one identity; ambiguous lists tied fields."""

    identity_id: str
    race: Optional[Race]
    gender: Optional[Gender]
    age_group: Optional[AgeGroup]
    n_records: int
    ambiguous: tuple[str, ...]


def _vote(values: Sequence[Optional[T]]) -> tuple[Optional[T], bool]:
    """Strict plurality winner, or (None, tied?) when there is none."""
    counts = Counter(v for v in values if v is not None)
    if not counts:
        return None, False
    ranked = counts.most_common()
    if len(ranked) > 1 and ranked[0][1] == ranked[1][1]:
        return None, True
    return ranked[0][0], False


def vote_identity_labels(identity_id: str,
                         records: Sequence[ImageRecord]) -> ConsensusLabels:
    if not records:
        raise ValueError(f"identity {identity_id!r} has no records to vote over")
    ambiguous: list[str] = []
    race, tied = _vote([r.race for r in records])
    if tied:
        ambiguous.append("race")
    gender, tied = _vote([r.gender for r in records])
    if tied:
        ambiguous.append("gender")
    age_group, tied = _vote([r.age_group for r in records])
    if tied:
        ambiguous.append("age_group")
    return ConsensusLabels(identity_id, race, gender, age_group,
                           len(records), tuple(ambiguous))


def apply_consensus(manifest: Manifest) -> tuple[Manifest, list[ConsensusLabels]]:
    """Relabel every record with its identity's voted labels.

    Output record order matches the input; the results list follows
    first-seen identity order. Ambiguous fields are written as None, so
    downstream group-based stages drop those records naturally.
    """
    groups = manifest.by_identity()
    results: list[ConsensusLabels] = []
    consensus_by_id: dict[str, ConsensusLabels] = {}
    for identity_id, indices in groups.items():
        labels = vote_identity_labels(
            identity_id, [manifest[i] for i in indices])
        results.append(labels)
        consensus_by_id[identity_id] = labels
    relabeled = [
        rec.replace(race=consensus_by_id[rec.identity_id].race,
                    gender=consensus_by_id[rec.identity_id].gender,
                    age_group=consensus_by_id[rec.identity_id].age_group)
        for rec in manifest
    ]
    return manifest.restricted(relabeled), results


@dataclass
class AgeDisagreement:
    """3x3 confusion counts: rows consensus age, columns observed age."""

    counts: dict[tuple[AgeGroup, AgeGroup], int]
    n_compared: int

    @property
    def n_disagreeing(self) -> int:
        return sum(v for (cons, obs), v in self.counts.items() if cons != obs)

    @property
    def disagreement_rate(self) -> float:
        return self.n_disagreeing / self.n_compared if self.n_compared else 0.0

    def write_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["consensus"] + [g.value for g in AGE_ORDER])
            for cons in AGE_ORDER:
                writer.writerow([cons.value] + [
                    self.counts.get((cons, obs), 0) for obs in AGE_ORDER])


def age_disagreement_report(manifest: Manifest) -> AgeDisagreement:
    """Compare each record's own age label against its identity consensus.

    Records whose own label or whose identity consensus is missing are
    skipped; they have nothing to compare.
    """
    groups = manifest.by_identity()
    counts: dict[tuple[AgeGroup, AgeGroup], int] = {}
    n_compared = 0
    for identity_id, indices in groups.items():
        records = [manifest[i] for i in indices]
        consensus, _ = _vote([r.age_group for r in records])
        if consensus is None:
            continue
        for rec in records:
            if rec.age_group is None:
                continue
            key = (consensus, rec.age_group)
            counts[key] = counts.get(key, 0) + 1
            n_compared += 1
    return AgeDisagreement(counts, n_compared)
