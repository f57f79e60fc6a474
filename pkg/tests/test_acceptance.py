"""Release gate: one test per headline guarantee, at stated tolerance.

Run with `pytest tests/test_acceptance.py -v` to get one pass/fail line
per guarantee. Every check pits the implementation against an
independent reference route (full sort, closed form, naive algorithm,
or recomputation from raw fields) rather than re-running the library
against itself.
"""

import time

import numpy as np
import pytest

from facebench.cli import main
from facebench.denoise import (
    DenoiseConfig,
    dbscan,
    denoise_manifest,
    genuine_shift_report,
)
from facebench.evaluation import (
    ScoreDistribution,
    dprime_scores,
    enumerate_genuine_pairs,
    fmr_at,
    fmr_threshold,
    pair_scores,
    sample_impostor_pairs,
    score_pairs,
)
from facebench.facearea import (
    area_ratio,
    balance_pairs_by_iou,
    mask_iou,
    mean_mask_diff,
)
from facebench.filters import GateConfig, filter_manifest, gate_record
from facebench.protocols import (
    SubsampleSpec,
    build_benchmark,
    ks_distance,
    lower_median,
    minmax_normalize,
    subsample,
)
from facebench.records import (
    ALL_GROUPS,
    DemographicGroup,
    EmbeddingStore,
    Gender,
    ImageRecord,
    Manifest,
    Race,
)
from facebench.synthcohort import (
    CohortSpec,
    GroupSpec,
    MaskParams,
    generate,
    ground_truth_score,
)

AF = DemographicGroup(Race.ASIAN, Gender.FEMALE)
AM = DemographicGroup(Race.ASIAN, Gender.MALE)


def test_threshold_matches_full_sort_reference() -> None:
    """10^6 impostor scores, rates 1e-2/1e-4/1e-5: threshold and achieved
    FMR equal a brute-force descending sort exactly. Under 10 s."""
    rng = np.random.default_rng(20240531)
    scores = rng.normal(0.05, 0.12, size=1_000_000)
    start = time.perf_counter()
    full_sort = np.sort(scores)[::-1]
    n = len(scores)
    for rate in (1e-2, 1e-4, 1e-5):
        threshold = fmr_threshold(scores, rate)
        k = max(1, int(np.floor(rate * n)))
        assert threshold == full_sort[k - 1]
        achieved = fmr_at(scores, threshold)
        assert achieved == float(np.count_nonzero(scores >= threshold)) / n
    elapsed = time.perf_counter() - start
    assert elapsed < 10.0, f"took {elapsed:.1f}s"


def test_dprime_closed_form() -> None:
    """10^5 draws each from N(0.7, 0.05^2) and N(0.1, 0.1^2) give the
    pooled-variance separation 7.589 within 2%. Under 1 s."""
    rng = np.random.default_rng(7)
    start = time.perf_counter()
    genuine = rng.normal(0.7, 0.05, size=100_000)
    impostor = rng.normal(0.1, 0.1, size=100_000)
    measured = dprime_scores(genuine, impostor)
    expected = 0.6 / np.sqrt((0.05**2 + 0.1**2) / 2)  # = 7.5895
    assert measured == pytest.approx(expected, rel=0.02)
    assert measured == pytest.approx(7.589, rel=0.02)
    elapsed = time.perf_counter() - start
    assert elapsed < 1.0, f"took {elapsed:.1f}s"


def test_subsample_sizes_share_distributions() -> None:
    """On a 250-id x 25-img group, the (200,15), (100,20), (50,25)
    subsamples have pairwise KS distance < 0.05 for both the genuine and
    impostor score distributions. Under 60 s."""
    start = time.perf_counter()
    spec = CohortSpec(groups=(GroupSpec(AF, 250, 25),), dim=64,
                      within_sigma=0.1, seed=303, emit_masks=False)
    manifest, store, _, _ = generate(spec)
    dists = []
    for n_ids, imgs in ((200, 15), (100, 20), (50, 25)):
        sub = subsample(manifest, SubsampleSpec(n_ids, imgs, AF, seed=5))
        gen = pair_scores(store, enumerate_genuine_pairs(sub))
        imp = pair_scores(store, sample_impostor_pairs(sub, 20_000, seed=6))
        assert len(gen) >= 10_000
        dists.append((ScoreDistribution.from_scores(gen),
                      ScoreDistribution.from_scores(imp)))
    for i in range(len(dists)):
        for j in range(i + 1, len(dists)):
            assert ks_distance(dists[i][0], dists[j][0]) < 0.05
            assert ks_distance(dists[i][1], dists[j][1]) < 0.05
    elapsed = time.perf_counter() - start
    assert elapsed < 60.0, f"took {elapsed:.1f}s"


def test_denoise_recovers_planted_noise() -> None:
    """At 10% planted label noise over well-separated identities
    (dim 128, clean genuine mean >= 0.7): recall >= 0.90 of the planted
    set, false drops <= 2%, and the genuine-score mass in [-0.2, 0.3]
    strictly decreases after cleaning. Under 120 s."""
    start = time.perf_counter()
    spec = CohortSpec(groups=(GroupSpec(AF, 80, 20),), dim=128,
                      within_sigma=0.05, noise_rate=0.10, seed=404,
                      emit_masks=False)
    assert spec.expected_genuine_mean("AF") >= 0.7
    manifest, store, _, truth = generate(spec)
    assert truth.noise, "generator must plant noise at rate 0.10"

    cleaned, _ = denoise_manifest(manifest, store, DenoiseConfig())
    stats = ground_truth_score(manifest, cleaned, truth)
    assert stats.noise_recall >= 0.90, f"recall {stats.noise_recall:.3f}"
    assert stats.false_drop_rate <= 0.02, \
        f"false drops {stats.false_drop_rate:.4f}"

    shift = genuine_shift_report(manifest, cleaned, store, seed=11,
                                 n_identities=80)
    mass_before = shift.before.mass_between(-0.2, 0.3)
    mass_after = shift.after.mass_between(-0.2, 0.3)
    assert mass_after < mass_before, \
        f"mass {mass_before:.4f} -> {mass_after:.4f}"
    # cleaning restores the advertised separation
    clean_mean = float(np.mean(pair_scores(
        store, enumerate_genuine_pairs(cleaned))))
    assert clean_mean >= 0.7
    elapsed = time.perf_counter() - start
    assert elapsed < 120.0, f"took {elapsed:.1f}s"


def _reference_dbscan(points: np.ndarray, eps: float,
                      min_pts: int) -> np.ndarray:
    """Naive O(n^2) density clustering with the same determinism rules."""
    n = len(points)
    dist = 1.0 - points @ points.T
    neighbors = [np.flatnonzero(dist[i] <= eps).tolist() for i in range(n)]
    core = [len(neighbors[i]) >= min_pts for i in range(n)]
    labels = [-1] * n
    next_label = 0
    for i in range(n):
        if not core[i] or labels[i] != -1:
            continue
        labels[i] = next_label
        queue = [i]
        while queue:
            j = queue.pop(0)
            for k in neighbors[j]:
                if core[k] and labels[k] == -1:
                    labels[k] = next_label
                    queue.append(k)
        next_label += 1
    for i in range(n):
        if labels[i] == -1:
            for j in range(n):  # ascending: lowest-index core wins
                if core[j] and dist[i, j] <= eps and labels[j] != -1:
                    labels[i] = labels[j]
                    break
    return np.asarray(labels, dtype=np.int64)


def test_dbscan_matches_naive_reference() -> None:
    """200 random instances with n <= 200 produce label arrays identical
    to a naive quadratic reference. Under 30 s."""
    start = time.perf_counter()
    rng = np.random.default_rng(99)
    for trial in range(200):
        n = int(rng.integers(0, 201))
        dim = int(rng.choice([8, 16, 32]))
        k = int(rng.integers(1, 6))
        centers = rng.standard_normal((k, dim))
        centers /= np.maximum(np.linalg.norm(centers, axis=1, keepdims=True),
                              1e-12)
        sigma = float(rng.uniform(0.05, 0.5))
        assignment = rng.integers(0, k, size=n)
        points = centers[assignment] + rng.normal(scale=sigma, size=(n, dim))
        points /= np.maximum(np.linalg.norm(points, axis=1, keepdims=True),
                             1e-12)
        eps = float(rng.uniform(0.2, 0.9))
        min_pts = int(rng.integers(2, 7))
        cfg = DenoiseConfig(eps=eps, min_pts=min_pts)
        got = dbscan(points.astype(np.float64), cfg)
        want = _reference_dbscan(points.astype(np.float64), eps, min_pts)
        assert np.array_equal(got, want), f"trial {trial}: n={n} eps={eps}"
    elapsed = time.perf_counter() - start
    assert elapsed < 30.0, f"took {elapsed:.1f}s"


def test_iou_balancing_reduces_area_gap() -> None:
    """With a planted gendered mask-area offset: every kept pair has
    IoU > 0.9, and both the mean |area difference| and the mean-mask-diff
    heatmap magnitude strictly decrease after balancing. Under 30 s."""
    start = time.perf_counter()
    spec = CohortSpec(groups=(GroupSpec(AF, 12, 4), GroupSpec(AM, 12, 4)),
                      dim=16, seed=77, emit_masks=True,
                      mask_params=MaskParams(female_area_offset=4,
                                             female_top_offset=-4))
    manifest, _, masks, _ = generate(spec)
    af = [i for i, r in enumerate(manifest) if r.group.code == "AF"]
    am = [i for i, r in enumerate(manifest) if r.group.code == "AM"]
    block = sample_impostor_pairs(manifest, 600, seed=9, subset=af,
                                  subset_b=am)
    row_to_id = {r.embedding_index: r.image_id for r in manifest}
    pairs = [(row_to_id[a], row_to_id[b])
             for a, b in zip(block.a.tolist(), block.b.tolist())]

    result = balance_pairs_by_iou(pairs, masks, min_iou=0.9)
    assert result.kept, "balancing must keep some pairs"
    assert result.dropped, "the planted offset must drop some pairs"
    for a, b in result.kept:
        assert mask_iou(masks[a], masks[b]) > 0.9

    def mean_area_gap(pp) -> float:
        return float(np.mean([abs(area_ratio(masks[a]) - area_ratio(masks[b]))
                              for a, b in pp]))

    def heat(pp) -> float:
        return mean_mask_diff([masks[a] for a, _ in pp],
                              [masks[b] for _, b in pp]).mean_abs()

    assert mean_area_gap(result.kept) < mean_area_gap(pairs)
    assert heat(result.kept) < heat(pairs)
    elapsed = time.perf_counter() - start
    assert elapsed < 30.0, f"took {elapsed:.1f}s"


def test_benchmark_emits_exact_shape() -> None:
    """A qualifying 8-group cohort yields exactly 90 subjects x 5 images
    per group (3600 images, 720 identities), every image strictly below
    its group's lower-median aggregated quality (recomputed from raw
    fields), byte-identical across re-runs with the same seed."""
    spec = CohortSpec(groups=tuple(GroupSpec(g, 120, 14) for g in ALL_GROUPS),
                      dim=16, seed=88, emit_masks=False)
    manifest, _, _, _ = generate(spec)
    bench = build_benchmark(manifest, seed=99)

    assert len(bench.manifest) == 3600
    assert len(bench.manifest.identity_ids()) == 720
    group_ids: dict[str, set] = {}
    per_identity: dict[str, int] = {}
    for rec in bench.manifest:
        group_ids.setdefault(rec.group.code, set()).add(rec.identity_id)
        per_identity[rec.identity_id] = per_identity.get(rec.identity_id, 0) + 1
    assert sorted(len(v) for v in group_ids.values()) == [90] * 8
    assert set(per_identity.values()) == {5}

    # independent recomputation of the quality cap from raw fields
    qf = minmax_normalize([r.q_faceqnet for r in manifest])
    qm = minmax_normalize([r.q_magface for r in manifest])
    agg = {r.image_id: (a + b) / 2.0 for r, a, b in zip(manifest, qf, qm)}
    q50 = {}
    for group in ALL_GROUPS:
        values = [agg[r.image_id] for r in manifest
                  if r.group.code == group.code]
        q50[group.code] = lower_median(values)
    for rec in bench.manifest:
        assert agg[rec.image_id] < q50[rec.group.code]

    again = build_benchmark(manifest, seed=99)
    assert again.manifest.records == bench.manifest.records
    assert again.manifest.provenance == bench.manifest.provenance


def test_attribute_gates_boundary_suite() -> None:
    """Boundary values are accepted on every gate, and multi-gate
    violations report every failed gate."""
    base = dict(image_id="x", identity_id="p", pitch=5.0, yaw=-10.0,
                roll=0.0, q_faceqnet=0.8, q_magface=25.0,
                brightness_fsb=150.0, face_area_ratio=0.4,
                nose_present=True)
    cfg = GateConfig()

    assert gate_record(ImageRecord(**base), cfg).passed

    yawed = ImageRecord(**{**base, "yaw": 25.0})
    decision = gate_record(yawed, cfg)
    assert not decision.passed and decision.failures == ("pose",)

    boundary = ImageRecord(**{**base, "pitch": 20.0, "yaw": 20.0,
                              "roll": -20.0, "brightness_fsb": 115.86,
                              "q_faceqnet": 0.3, "q_magface": 20.0,
                              "face_area_ratio": 0.2})
    assert gate_record(boundary, cfg).passed

    dim_small = ImageRecord(**{**base, "brightness_fsb": 80.0,
                               "face_area_ratio": 0.1})
    decision = gate_record(dim_small, cfg)
    assert set(decision.failures) == {"brightness", "face_area"}

    everything = ImageRecord(**{**base, "q_faceqnet": 0.1, "q_magface": 5.0,
                                "yaw": 45.0, "brightness_fsb": 80.0,
                                "face_area_ratio": 0.05,
                                "nose_present": False})
    decision = gate_record(everything, cfg)
    assert set(decision.failures) == \
        {"quality_faceqnet", "quality_magface", "pose", "brightness",
         "face_area", "nose_missing"}

    # every named reason re-confirms independently against the config
    checks = {
        "quality_faceqnet": lambda r: r.q_faceqnet < cfg.q_faceqnet_min,
        "quality_magface": lambda r: r.q_magface < cfg.q_magface_min,
        "pose": lambda r: max(abs(r.pitch), abs(r.yaw),
                              abs(r.roll)) > cfg.pose_max,
        "brightness": lambda r: not (cfg.fsb_low <= r.brightness_fsb
                                     <= cfg.fsb_high),
        "face_area": lambda r: r.face_area_ratio < cfg.area_min,
        "nose_missing": lambda r: not r.nose_present,
    }
    for reason in decision.failures:
        assert checks[reason](everything)

    empty_kept, empty_stats = filter_manifest(Manifest([], ""), cfg)
    assert len(empty_kept) == 0 and empty_stats.total == 0


def test_ten_million_pair_scoring_performance() -> None:
    """Scoring 10^7 sampled impostor pairs over a 100K x 512 store takes
    under 60 s, and the resulting distribution is bitwise identical
    across thread counts."""
    rng = np.random.default_rng(0)
    vectors = rng.standard_normal((100_000, 512), dtype=np.float32)
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    store = EmbeddingStore.from_vectors(vectors)
    records = [ImageRecord(image_id=f"i{k}", identity_id=f"p{k // 10}",
                           embedding_index=k) for k in range(100_000)]
    manifest = Manifest(records, "perf")
    pairs = sample_impostor_pairs(manifest, 10_000_000, seed=7)
    assert len(pairs) == 10_000_000

    start = time.perf_counter()
    single = score_pairs(store, pairs, threads=1)
    elapsed = time.perf_counter() - start
    assert elapsed < 60.0, f"scoring took {elapsed:.1f}s"
    assert single.count == 10_000_000

    threaded = score_pairs(store, pairs, threads=4)
    assert np.array_equal(single.counts, threaded.counts)
    assert single.count == threaded.count
    assert single.mean == threaded.mean
    assert single.m2 == threaded.m2


COHORT_INI = """
[cohort]
dim = 32
within_sigma = 0.08
noise_rate = 0.1
seed = 41

[group:AF]
n_ids = 8
imgs_per_id = 6

[group:AM]
n_ids = 8
imgs_per_id = 6
"""


def test_pipeline_recipe_reproduces_identical_reports(tmp_path,
                                                      capsys) -> None:
    """filter -> consensus -> denoise -> metrics on a fixed cohort and
    seed writes byte-identical report CSVs when re-run."""
    spec_path = tmp_path / "cohort.ini"
    spec_path.write_text(COHORT_INI)
    cohort = tmp_path / "cohort"
    assert main(["synth", "--spec", str(spec_path),
                 "--out", str(cohort)]) == 0
    m = str(cohort / "manifest.jsonl")
    e = str(cohort / "embeddings.baem")
    base = tmp_path / "work"
    base.mkdir()

    def recipe(extra: list) -> dict[str, bytes]:
        assert main(["filter", "--manifest", m,
                     "--out", str(base / "f.jsonl")] + extra) == 0
        assert main(["consensus", "--manifest", str(base / "f.jsonl"),
                     "--out", str(base / "c.jsonl")] + extra) == 0
        assert main(["denoise", "--manifest", str(base / "c.jsonl"),
                     "--emb", e, "--out", str(base / "d.jsonl"),
                     "--threads", "2"] + extra) == 0
        assert main(["metrics", "--manifest", str(base / "d.jsonl"),
                     "--emb", e, "--fmr", "0.02", "--seed", "17",
                     "--impostors-per-group", "200",
                     "--out-prefix", str(base / "rep")] + extra) == 0
        return {name: (base / name).read_bytes()
                for name in ("rep.groups.csv", "rep.gaps.csv", "rep.json",
                             "d.jsonl")}

    first = recipe([])
    second = recipe(["--force"])
    capsys.readouterr()  # swallow summary lines
    assert first == second
