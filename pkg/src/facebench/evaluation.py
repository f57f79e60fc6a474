"""Verification scoring and cross-demographic disparity metrics.

Scores are cosine similarities, which for unit-norm embeddings reduce to
dot products. Large score sets are summarized by ScoreDistribution: a
fixed 2000-bin histogram over [-1, 1] plus exactly-merged streaming
moments, so distributions computed in chunks combine without drift.

Determinism contract: scoring is chunked at a fixed size and per-chunk
statistics are merged in chunk order, so the result is bitwise identical
for any thread count.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ContractViolation, DegenerateInput
from .records import ALL_GROUPS, DemographicGroup, EmbeddingStore, Gender, Manifest, Race
from .seeds import derive_seed, make_rng

NUM_BINS = 2000
SCORE_LO = -1.0
SCORE_HI = 1.0
_BIN_WIDTH = (SCORE_HI - SCORE_LO) / NUM_BINS

# Fixed chunk size for scoring and moment accumulation. Changing it changes
# rounding in the merged moments, so it is part of the determinism contract.
CHUNK_SIZE = 65536


@dataclass
class ScoreDistribution:
    """Histogram plus exact streaming moments for a set of scores.

    The histogram has 2000 bins of width 0.001 over [-1, 1]; scores are
    clipped into that range before binning (float32 dot products of unit
    vectors can overshoot by ~1e-7). Moments are kept as count/mean/M2 in
    float64 and merged with the standard parallel update, so merging
    chunked partials in a fixed order reproduces the single-pass result
    bit for bit.
    """

    counts: np.ndarray = field(
        default_factory=lambda: np.zeros(NUM_BINS, dtype=np.int64))
    count: int = 0
    mean: float = 0.0
    m2: float = 0.0
    min: float = math.inf
    max: float = -math.inf

    @classmethod
    def from_scores(cls, scores: np.ndarray) -> "ScoreDistribution":
        dist = cls()
        scores = np.asarray(scores)
        for start in range(0, len(scores), CHUNK_SIZE):
            dist = dist.merge(cls._from_chunk(scores[start:start + CHUNK_SIZE]))
        return dist

    @classmethod
    def _from_chunk(cls, chunk: np.ndarray) -> "ScoreDistribution":
        if len(chunk) == 0:
            return cls()
        chunk64 = chunk.astype(np.float64)
        clipped = np.clip(chunk64, SCORE_LO, SCORE_HI)
        counts, _ = np.histogram(clipped, bins=NUM_BINS, range=(SCORE_LO, SCORE_HI))
        mean = float(chunk64.mean())
        m2 = float(((chunk64 - mean) ** 2).sum())
        return cls(counts.astype(np.int64), len(chunk), mean, m2,
                   float(chunk64.min()), float(chunk64.max()))

    def merge(self, other: "ScoreDistribution") -> "ScoreDistribution":
        """Combine two distributions exactly (parallel moment update)."""
        if self.count == 0:
            return ScoreDistribution(other.counts.copy(), other.count, other.mean,
                                     other.m2, other.min, other.max)
        if other.count == 0:
            return ScoreDistribution(self.counts.copy(), self.count, self.mean,
                                     self.m2, self.min, self.max)
        n = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.count / n)
        m2 = self.m2 + other.m2 + delta * delta * (self.count * other.count / n)
        return ScoreDistribution(self.counts + other.counts, n, mean, m2,
                                 min(self.min, other.min),
                                 max(self.max, other.max))

    @property
    def variance(self) -> float:
        """Sample variance (ddof=1)."""
        if self.count < 2:
            raise DegenerateInput("variance needs at least 2 scores")
        return self.m2 / (self.count - 1)

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)

    def mass_between(self, lo: float, hi: float) -> float:
        """Fraction of scores in bins fully inside [lo, hi].

        Exact for the half-open interval [lo, hi) when both bounds align
        with bin edges (multiples of 0.001); otherwise accurate to bin
        resolution.
        """
        if self.count == 0:
            raise DegenerateInput("mass_between on an empty distribution")
        i_lo = max(int(math.ceil((lo - SCORE_LO) / _BIN_WIDTH - 1e-9)), 0)
        i_hi = min(int(math.floor((hi - SCORE_LO) / _BIN_WIDTH + 1e-9)), NUM_BINS)
        if i_hi <= i_lo:
            return 0.0
        return float(self.counts[i_lo:i_hi].sum()) / self.count

    def cdf_at(self, x: float) -> float:
        """Fraction of scores in bins entirely below x (bin resolution)."""
        if self.count == 0:
            raise DegenerateInput("cdf_at on an empty distribution")
        i = int(math.floor((x - SCORE_LO) / _BIN_WIDTH + 1e-9))
        return float(self.counts[:min(max(i, 0), NUM_BINS)].sum()) / self.count

    def write_histogram_csv(self, path: Union[str, Path]) -> None:
        """Two-column CSV (bin_center, count) for external plotting."""
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("bin_center", "count"))
            for i in range(NUM_BINS):
                center = SCORE_LO + (i + 0.5) * _BIN_WIDTH
                writer.writerow((repr(center), int(self.counts[i])))


@dataclass(frozen=True)
class PairBlock:
    """Parallel arrays of embedding row indices; pair k is (a[k], b[k])."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        if self.a.shape != self.b.shape or self.a.ndim != 1:
            raise ContractViolation("pair arrays must be 1-D and equal length")

    def __len__(self) -> int:
        return int(self.a.shape[0])

    @classmethod
    def concat(cls, blocks: Sequence["PairBlock"]) -> "PairBlock":
        if not blocks:
            return cls(np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64))
        return cls(np.concatenate([blk.a for blk in blocks]),
                   np.concatenate([blk.b for blk in blocks]))


def _embedding_rows(manifest: Manifest, indices: Sequence[int]) -> dict[int, int]:
    rows: dict[int, int] = {}
    for idx in indices:
        rec = manifest[idx]
        if rec.embedding_index is None:
            raise ContractViolation(
                f"record {rec.image_id!r} has no embedding_index")
        rows[idx] = rec.embedding_index
    return rows


def enumerate_genuine_pairs(manifest: Manifest,
                            subset: Optional[Sequence[int]] = None) -> PairBlock:
    """All unordered same-identity pairs, in deterministic order.

    Identities are visited in first-seen order; within an identity the
    pairs follow record order (i before j). subset restricts to the given
    record indices.
    """
    if subset is None:
        subset = range(len(manifest))
    by_identity: dict[str, list[int]] = {}
    for idx in subset:
        by_identity.setdefault(manifest[idx].identity_id, []).append(idx)
    rows = _embedding_rows(manifest, [i for g in by_identity.values() for i in g])
    a: list[int] = []
    b: list[int] = []
    for indices in by_identity.values():
        for i in range(len(indices)):
            for j in range(i + 1, len(indices)):
                a.append(rows[indices[i]])
                b.append(rows[indices[j]])
    return PairBlock(np.asarray(a, dtype=np.int64), np.asarray(b, dtype=np.int64))


def count_impostor_pairs(manifest: Manifest,
                         subset: Optional[Sequence[int]] = None) -> int:
    if subset is None:
        subset = range(len(manifest))
    subset = list(subset)
    per_identity: dict[str, int] = {}
    for idx in subset:
        ident = manifest[idx].identity_id
        per_identity[ident] = per_identity.get(ident, 0) + 1
    genuine = sum(k * (k - 1) // 2 for k in per_identity.values())
    n = len(subset)
    return n * (n - 1) // 2 - genuine


def sample_impostor_pairs(manifest: Manifest, m: int, seed: int,
                          subset: Optional[Sequence[int]] = None,
                          subset_b: Optional[Sequence[int]] = None) -> PairBlock:
    """Sample m distinct cross-identity pairs without replacement.

    With one subset, pairs are unordered pairs within it; with subset_b,
    each pair takes one record from subset and one from subset_b (give
    disjoint subsets, or a pair may be drawn in both orientations). When
    fewer than m impostor pairs exist the whole population is returned,
    enumerated in deterministic order. Sampling is rejection-based with a
    seed-derived generator, so the result depends only on (manifest
    order, m, seed).
    """
    if m < 0:
        raise ContractViolation("pair count must be non-negative")
    subset = list(range(len(manifest))) if subset is None else list(subset)
    cross = subset_b is not None
    subset_b = list(subset_b) if cross else subset
    rows = _embedding_rows(manifest, subset)
    rows.update(_embedding_rows(manifest, subset_b))
    idents = [rec.identity_id for rec in manifest]

    if cross:
        # i == j pairs share an identity, so the same-identity term
        # already excludes them
        count_a: dict[str, int] = {}
        count_b: dict[str, int] = {}
        for i in subset:
            count_a[idents[i]] = count_a.get(idents[i], 0) + 1
        for j in subset_b:
            count_b[idents[j]] = count_b.get(idents[j], 0) + 1
        shared = sum(count_a[x] * count_b[x] for x in count_a if x in count_b)
        total = len(subset) * len(subset_b) - shared
    else:
        total = count_impostor_pairs(manifest, subset)

    if m >= total:
        a: list[int] = []
        b: list[int] = []
        if cross:
            for i in subset:
                for j in subset_b:
                    if i != j and idents[i] != idents[j]:
                        a.append(rows[i])
                        b.append(rows[j])
        else:
            for pos_i in range(len(subset)):
                for pos_j in range(pos_i + 1, len(subset)):
                    i, j = subset[pos_i], subset[pos_j]
                    if idents[i] != idents[j]:
                        a.append(rows[i])
                        b.append(rows[j])
        return PairBlock(np.asarray(a, dtype=np.int64), np.asarray(b, dtype=np.int64))

    rng = make_rng(seed, "impostor-pairs")
    sub_a = np.asarray(subset, dtype=np.int64)
    sub_b = np.asarray(subset_b, dtype=np.int64)
    ident_code: dict[str, int] = {}
    for ident in idents:
        ident_code.setdefault(ident, len(ident_code))
    codes = np.asarray([ident_code[x] for x in idents], dtype=np.int64)
    row_of = np.full(len(manifest), -1, dtype=np.int64)
    for idx, row in rows.items():
        row_of[idx] = row

    n = len(manifest)
    accepted = np.empty(0, dtype=np.int64)  # composite i*n + j keys
    picks_a: list[np.ndarray] = []
    picks_b: list[np.ndarray] = []
    have = 0
    while have < m:
        need = m - have
        # duplicates are rare below the population size, so a slight
        # overdraw almost always finishes in one pass
        batch = need + need // 8 + 1024
        ii = sub_a[rng.integers(0, len(sub_a), size=batch)]
        jj = sub_b[rng.integers(0, len(sub_b), size=batch)]
        if not cross:
            ii, jj = np.minimum(ii, jj), np.maximum(ii, jj)
        ok = (ii != jj) & (codes[ii] != codes[jj])
        ii, jj = ii[ok], jj[ok]
        keys = ii * n + jj
        _, first = np.unique(keys, return_index=True)
        first.sort(kind="stable")  # dedupe, keeping draw order
        keys, ii, jj = keys[first], ii[first], jj[first]
        if accepted.size:
            fresh = ~np.isin(keys, accepted)
            keys, ii, jj = keys[fresh], ii[fresh], jj[fresh]
        take = min(len(keys), need)
        picks_a.append(ii[:take])
        picks_b.append(jj[:take])
        accepted = np.concatenate([accepted, keys[:take]])
        have += take
    all_a = np.concatenate(picks_a) if picks_a else np.empty(0, np.int64)
    all_b = np.concatenate(picks_b) if picks_b else np.empty(0, np.int64)
    return PairBlock(row_of[all_a], row_of[all_b])


def pair_scores(store: EmbeddingStore, pairs: PairBlock,
                threads: int = 1) -> np.ndarray:
    """Cosine scores for every pair, float32, in pair order."""
    if threads < 1:
        raise ContractViolation("threads must be at least 1")
    out = np.empty(len(pairs), dtype=np.float32)

    def one(start: int) -> None:
        stop = min(start + CHUNK_SIZE, len(pairs))
        left = store.rows(pairs.a[start:stop])
        right = store.rows(pairs.b[start:stop])
        out[start:stop] = np.einsum("ij,ij->i", left, right)

    starts = range(0, len(pairs), CHUNK_SIZE)
    if threads == 1:
        for start in starts:
            one(start)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(one, starts))
    return out


def score_pairs(store: EmbeddingStore, pairs: PairBlock,
                threads: int = 1) -> ScoreDistribution:
    """Score all pairs into a ScoreDistribution.

    Work is split into fixed CHUNK_SIZE chunks; per-chunk distributions
    are merged in chunk order regardless of which thread produced them,
    so any thread count yields a bitwise-identical result.
    """
    if threads < 1:
        raise ContractViolation("threads must be at least 1")

    def one(start: int) -> ScoreDistribution:
        stop = min(start + CHUNK_SIZE, len(pairs))
        left = store.rows(pairs.a[start:stop])
        right = store.rows(pairs.b[start:stop])
        return ScoreDistribution._from_chunk(np.einsum("ij,ij->i", left, right))

    starts = list(range(0, len(pairs), CHUNK_SIZE))
    dist = ScoreDistribution()
    if threads == 1 or len(starts) <= 1:
        for start in starts:
            dist = dist.merge(one(start))
        return dist
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for part in pool.map(one, starts):
            dist = dist.merge(part)
    return dist


def dprime(genuine: ScoreDistribution, impostor: ScoreDistribution) -> float:
    """Separation index: |mean gap| over the rms of the two stddevs."""
    pooled = (genuine.variance + impostor.variance) / 2.0
    if pooled <= 0.0:
        raise DegenerateInput("both score distributions are constant")
    return abs(genuine.mean - impostor.mean) / math.sqrt(pooled)


def dprime_scores(scores_a: np.ndarray, scores_b: np.ndarray) -> float:
    return dprime(ScoreDistribution.from_scores(scores_a),
                  ScoreDistribution.from_scores(scores_b))


def delta_dprime(dprime_a: float, dprime_b: float) -> float:
    return abs(dprime_a - dprime_b)


def fmr_threshold(impostor_scores: np.ndarray, rate: float) -> float:
    """Decision threshold hitting the target false-match rate.

    Returns the k-th largest impostor score with k = max(1, floor(rate*n)),
    under the convention that scores >= threshold are matches. With tied
    scores the realized rate can exceed the target; it is never deflated
    by nudging the threshold.
    """
    n = len(impostor_scores)
    if n == 0:
        raise DegenerateInput("no impostor scores to set a threshold from")
    if not 0.0 < rate <= 1.0:
        raise ContractViolation("rate must be in (0, 1]")
    k = max(1, int(math.floor(rate * n)))
    return float(np.partition(np.asarray(impostor_scores), n - k)[n - k])


def fraction_at_or_above(scores: np.ndarray, threshold: float) -> float:
    if len(scores) == 0:
        raise DegenerateInput("empty score array")
    return float(np.count_nonzero(np.asarray(scores) >= threshold)) / len(scores)


def fmr_at(impostor_scores: np.ndarray, threshold: float) -> float:
    return fraction_at_or_above(impostor_scores, threshold)


def tpr_at(genuine_scores: np.ndarray, threshold: float) -> float:
    return fraction_at_or_above(genuine_scores, threshold)


@dataclass(frozen=True)
class GroupMetrics:
    group: str
    n_ids: int
    n_images: int
    n_genuine: int
    n_impostor: int
    genuine_mean: float
    genuine_std: float
    impostor_mean: float
    impostor_std: float
    dprime: float
    threshold: float
    fmr: float
    tpr: float


@dataclass(frozen=True)
class RaceGaps:
    """Male/female separation gaps within one race.

    dprime_gap compares the two genders' own d-prime values. The gen/imp
    columns instead measure how far apart the male and female score
    distributions sit, per pair kind, using the same separation index.
    """

    race: str
    dprime_male: float
    dprime_female: float
    dprime_gap: float
    gen_gap_dprime: float
    imp_gap_dprime: float


REPORT_NOTES = (
    "dprime_gap is the absolute male-female difference; sign is discarded",
    "fmr and tpr count scores at or above the threshold",
)


@dataclass
class DisparityReport:
    scope: str
    threshold: Optional[float]  # shared value; None when scope=within_group
    target_fmr: float
    groups: list[GroupMetrics]
    race_gaps: list[RaceGaps]
    notes: tuple[str, ...] = REPORT_NOTES

    def to_json(self) -> str:
        return json.dumps({
            "scope": self.scope,
            "threshold": self.threshold,
            "target_fmr": self.target_fmr,
            "groups": [vars(g) for g in self.groups],
            "race_gaps": [vars(r) for r in self.race_gaps],
            "notes": list(self.notes),
        }, indent=2, sort_keys=True)

    def write_group_csv(self, path: Union[str, Path]) -> None:
        cols = ("group", "n_ids", "n_images", "n_genuine", "n_impostor",
                "dprime", "fmr", "tpr")
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(cols)
            for g in self.groups:
                writer.writerow([_cell(getattr(g, c)) for c in cols])

    def write_gaps_csv(self, path: Union[str, Path]) -> None:
        cols = ("race", "dprime_male", "dprime_female", "dprime_gap",
                "gen_gap_dprime", "imp_gap_dprime")
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(cols)
            for r in self.race_gaps:
                writer.writerow([_cell(getattr(r, c)) for c in cols])


def _cell(value) -> str:
    # repr keeps floats round-trippable; ints and strings pass through
    return repr(value) if isinstance(value, float) else str(value)


VALID_SCOPES = ("global", "within_group")


def _parse_scope(scope: str) -> Optional[str]:
    """Returns the reference group code, or None for the pooled scopes."""
    if scope in VALID_SCOPES:
        return None
    if scope.startswith("reference:"):
        code = scope.split(":", 1)[1]
        DemographicGroup.from_code(code)  # raises on junk
        return code
    raise ContractViolation(
        f"scope must be global, within_group, or reference:CODE, got {scope!r}")


def disparity_report(manifest: Manifest, store: EmbeddingStore,
                     impostors_per_group: int, seed: int,
                     target_fmr: float = 1e-3, scope: str = "global",
                     threads: int = 1) -> DisparityReport:
    """Per-group verification metrics at a scoped decision threshold.

    Impostor pairs are same-group (both records from the cell). The
    threshold source is the scope: "global" pools all groups' impostor
    scores, "reference:CODE" uses that group's impostor scores alone,
    and "within_group" gives every group its own threshold. Groups with
    no genuine pairs are omitted. Races missing either gender contribute
    no gap row, so a single-group manifest yields an empty race_gaps
    section.
    """
    reference = _parse_scope(scope)

    group_indices: dict[str, list[int]] = {g.code: [] for g in ALL_GROUPS}
    for idx, rec in enumerate(manifest):
        g = rec.group
        if g is not None:
            group_indices[g.code].append(idx)

    for group in ALL_GROUPS:
        code = group.code
        indices = group_indices[code]
        if not indices:
            continue
        n_ids = len({manifest[i].identity_id for i in indices})
        if n_ids < 2:
            raise DegenerateInput(
                f"group {code} has {n_ids} identity, needs at least 2")

    gen_scores: dict[str, np.ndarray] = {}
    imp_scores: dict[str, np.ndarray] = {}
    counts: dict[str, tuple[int, int]] = {}
    for group in ALL_GROUPS:
        code = group.code
        indices = group_indices[code]
        if not indices:
            continue
        genuine = enumerate_genuine_pairs(manifest, indices)
        impostor = sample_impostor_pairs(
            manifest, impostors_per_group, derive_seed(seed, "group", code),
            subset=indices)
        if len(genuine) == 0 or len(impostor) == 0:
            continue
        gen_scores[code] = pair_scores(store, genuine, threads)
        imp_scores[code] = pair_scores(store, impostor, threads)
        counts[code] = (len({manifest[i].identity_id for i in indices}),
                        len(indices))

    if not imp_scores:
        raise DegenerateInput("no demographic group has scorable pairs")

    if reference is not None:
        if reference not in imp_scores:
            raise DegenerateInput(
                f"reference group {reference} has no scorable pairs")
        shared = fmr_threshold(imp_scores[reference], target_fmr)
    elif scope == "global":
        pooled = np.concatenate([imp_scores[c] for c in sorted(imp_scores)])
        shared = fmr_threshold(pooled, target_fmr)
    else:
        shared = None

    groups: list[GroupMetrics] = []
    summaries: dict[str, tuple[ScoreDistribution, ScoreDistribution]] = {}
    for group in ALL_GROUPS:
        code = group.code
        if code not in gen_scores:
            continue
        gen = ScoreDistribution.from_scores(gen_scores[code])
        imp = ScoreDistribution.from_scores(imp_scores[code])
        summaries[code] = (gen, imp)
        threshold = (fmr_threshold(imp_scores[code], target_fmr)
                     if shared is None else shared)
        n_ids, n_images = counts[code]
        groups.append(GroupMetrics(
            group=code,
            n_ids=n_ids,
            n_images=n_images,
            n_genuine=gen.count,
            n_impostor=imp.count,
            genuine_mean=gen.mean,
            genuine_std=gen.std,
            impostor_mean=imp.mean,
            impostor_std=imp.std,
            dprime=dprime(gen, imp),
            threshold=threshold,
            fmr=fmr_at(imp_scores[code], threshold),
            tpr=tpr_at(gen_scores[code], threshold),
        ))

    race_gaps: list[RaceGaps] = []
    for race in (Race.ASIAN, Race.BLACK, Race.INDIAN, Race.WHITE):
        code_f = DemographicGroup(race, Gender.FEMALE).code
        code_m = DemographicGroup(race, Gender.MALE).code
        if code_f not in summaries or code_m not in summaries:
            continue
        gen_m, imp_m = summaries[code_m]
        gen_f, imp_f = summaries[code_f]
        d_m = dprime(gen_m, imp_m)
        d_f = dprime(gen_f, imp_f)
        race_gaps.append(RaceGaps(
            race=race.value,
            dprime_male=d_m,
            dprime_female=d_f,
            dprime_gap=delta_dprime(d_m, d_f),
            gen_gap_dprime=dprime(gen_m, gen_f),
            imp_gap_dprime=dprime(imp_m, imp_f),
        ))

    return DisparityReport(scope, shared, target_fmr, groups, race_gaps)
