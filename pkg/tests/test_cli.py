"""End-to-end CLI runs: exit codes, artifacts, chaining, determinism."""

import json
import shlex

import numpy as np
import pytest

from facebench.cli import main
from facebench.records import EmbeddingStore, load_manifest, load_mask

COHORT_INI = """
[cohort]
dim = 32
within_sigma = 0.08
noise_rate = 0.1
violation_rate = 0.1
seed = 41

[group:AF]
n_ids = 8
imgs_per_id = 6

[group:AM]
n_ids = 8
imgs_per_id = 6
"""


def run(capsys, argv) -> tuple[int, dict]:
    """Invoke main() and parse the stdout summary line into a dict."""
    code = main(argv)
    captured = capsys.readouterr()
    fields = {}
    lines = [ln for ln in captured.out.strip().splitlines() if ln]
    if lines:
        for token in shlex.split(lines[-1]):
            key, _, value = token.partition("=")
            fields[key] = value
    return code, fields


@pytest.fixture()
def cohort_dir(tmp_path, capsys):
    spec_path = tmp_path / "cohort.ini"
    spec_path.write_text(COHORT_INI)
    out = tmp_path / "cohort"
    code, fields = run(capsys, ["synth", "--spec", str(spec_path),
                                "--out", str(out)])
    assert code == 0, fields
    return out


class TestSynthAndValidate:
    def test_synth_then_validate_exits_zero(self, cohort_dir, capsys) -> None:
        code, fields = run(capsys, [
            "validate", "--manifest", str(cohort_dir / "manifest.jsonl"),
            "--emb", str(cohort_dir / "embeddings.baem")])
        assert code == 0
        assert fields["status"] == "ok"
        assert fields["findings"] == "0"

    def test_synth_artifacts_exist(self, cohort_dir) -> None:
        assert (cohort_dir / "manifest.jsonl").exists()
        assert (cohort_dir / "embeddings.baem").exists()
        assert (cohort_dir / "ground_truth.jsonl").exists()
        assert (cohort_dir / "masks").is_dir()
        assert (cohort_dir / "manifest.jsonl.prov.json").exists()
        manifest = load_manifest(cohort_dir / "manifest.jsonl")
        mask = load_mask(cohort_dir / "masks" / manifest[0].mask_path)
        assert mask.width == 224

    def test_validate_reports_findings_with_exit_1(self, tmp_path,
                                                   capsys) -> None:
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"image_id": "a", "identity_id": "p", '
                       '"q_faceqnet": 3.5}\n')
        code, fields = run(capsys, ["validate", "--manifest", str(bad)])
        assert code == 1
        assert fields["status"] == "findings"
        assert int(fields["findings"]) >= 1

    def test_missing_manifest_is_exit_1(self, tmp_path, capsys) -> None:
        code, _ = run(capsys, ["validate", "--manifest",
                               str(tmp_path / "nope.jsonl")])
        assert code == 1

    def test_unknown_flag_is_exit_2(self, cohort_dir) -> None:
        with pytest.raises(SystemExit) as exc:
            main(["validate", "--manifest", "x", "--bogus"])
        assert exc.value.code == 2

    def test_unknown_subcommand_is_exit_2(self) -> None:
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2

    def test_version_flag(self, capsys) -> None:
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0
        assert "facebench" in capsys.readouterr().out


class TestFilterConsensusDenoise:
    def test_filter_writes_chained_manifest(self, cohort_dir, tmp_path,
                                            capsys) -> None:
        out = tmp_path / "filtered.jsonl"
        stats = tmp_path / "stats.json"
        code, fields = run(capsys, [
            "filter", "--manifest", str(cohort_dir / "manifest.jsonl"),
            "--out", str(out), "--stats", str(stats)])
        assert code == 0
        kept = load_manifest(out)
        assert int(fields["kept"]) == len(kept)
        assert int(fields["kept"]) + int(fields["rejected"]) == 8 * 6 * 2
        assert "filter" in kept.provenance
        assert "sha256:" in kept.provenance
        payload = json.loads(stats.read_text())
        assert payload["total"] == 96

    def test_filter_refuses_overwrite_without_force(self, cohort_dir,
                                                    tmp_path,
                                                    capsys) -> None:
        out = tmp_path / "filtered.jsonl"
        argv = ["filter", "--manifest", str(cohort_dir / "manifest.jsonl"),
                "--out", str(out)]
        code, _ = run(capsys, argv)
        assert code == 0
        code, _ = run(capsys, argv)
        assert code == 1
        code, _ = run(capsys, argv + ["--force"])
        assert code == 0

    def test_filter_idempotent_bytes(self, cohort_dir, tmp_path,
                                     capsys) -> None:
        m = str(cohort_dir / "manifest.jsonl")
        out1 = tmp_path / "f1.jsonl"
        out2 = tmp_path / "f2.jsonl"
        assert run(capsys, ["filter", "--manifest", m,
                            "--out", str(out1)])[0] == 0
        assert run(capsys, ["filter", "--manifest", m,
                            "--out", str(out2)])[0] == 0
        assert out1.read_bytes() == out2.read_bytes()

    def test_consensus_and_age_csv(self, cohort_dir, tmp_path,
                                   capsys) -> None:
        out = tmp_path / "labeled.jsonl"
        age = tmp_path / "age.csv"
        code, fields = run(capsys, [
            "consensus", "--manifest", str(cohort_dir / "manifest.jsonl"),
            "--out", str(out), "--age-csv", str(age)])
        assert code == 0
        assert int(fields["identities"]) == 16
        assert age.read_text().startswith("consensus,")

    def test_denoise_writes_drop_list(self, cohort_dir, tmp_path,
                                      capsys) -> None:
        out = tmp_path / "clean.jsonl"
        code, fields = run(capsys, [
            "denoise", "--manifest", str(cohort_dir / "manifest.jsonl"),
            "--emb", str(cohort_dir / "embeddings.baem"),
            "--out", str(out), "--threads", "1"])
        assert code == 0
        drop_path = tmp_path / "clean.drops.txt"
        assert drop_path.exists()
        n_drops = len([ln for ln in drop_path.read_text().splitlines() if ln])
        assert n_drops == int(fields["dropped"])
        assert int(fields["kept"]) + n_drops == 96

    def test_denoise_intersect_unions_drops(self, cohort_dir, tmp_path,
                                            capsys) -> None:
        m = str(cohort_dir / "manifest.jsonl")
        e = str(cohort_dir / "embeddings.baem")
        first = tmp_path / "first.jsonl"
        run(capsys, ["denoise", "--manifest", m, "--emb", e,
                     "--out", str(first)])
        # second pass with a stricter eps drops a superset
        second = tmp_path / "second.jsonl"
        code, fields = run(capsys, [
            "denoise", "--manifest", m, "--emb", e, "--out", str(second),
            "--eps", "0.3",
            "--intersect", str(tmp_path / "first.drops.txt")])
        assert code == 0
        kept_first = {r.image_id for r in load_manifest(first)}
        kept_second = {r.image_id for r in load_manifest(second)}
        assert kept_second <= kept_first

    def test_denoise_shift_report(self, cohort_dir, tmp_path,
                                  capsys) -> None:
        out = tmp_path / "clean.jsonl"
        code, fields = run(capsys, [
            "denoise", "--manifest", str(cohort_dir / "manifest.jsonl"),
            "--emb", str(cohort_dir / "embeddings.baem"),
            "--out", str(out), "--seed", "5",
            "--shift-prefix", str(tmp_path / "shift")])
        assert code == 0
        assert (tmp_path / "shift.before.csv").exists()
        assert (tmp_path / "shift.after.csv").exists()
        assert float(fields["mass_after"]) <= float(fields["mass_before"])

    def test_denoise_shift_requires_seed(self, cohort_dir, tmp_path) -> None:
        with pytest.raises(SystemExit) as exc:
            main(["denoise", "--manifest",
                  str(cohort_dir / "manifest.jsonl"),
                  "--emb", str(cohort_dir / "embeddings.baem"),
                  "--out", str(tmp_path / "c.jsonl"),
                  "--shift-prefix", str(tmp_path / "s")])
        assert exc.value.code == 2


class TestPairsAndBalance:
    def test_genuine_pairs_csv(self, cohort_dir, tmp_path, capsys) -> None:
        out = tmp_path / "gen.csv"
        code, fields = run(capsys, [
            "pairs", "--manifest", str(cohort_dir / "manifest.jsonl"),
            "--kind", "genuine", "--subset", "AF", "--out", str(out)])
        assert code == 0
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "image_id_a,image_id_b"
        assert len(lines) - 1 == int(fields["n_pairs"]) == 8 * 15

    def test_impostor_pairs_need_seed(self, cohort_dir, tmp_path) -> None:
        with pytest.raises(SystemExit) as exc:
            main(["pairs", "--manifest", str(cohort_dir / "manifest.jsonl"),
                  "--kind", "impostor", "--m", "10",
                  "--out", str(tmp_path / "i.csv")])
        assert exc.value.code == 2

    def test_cross_gender_pairs_then_balance(self, cohort_dir, tmp_path,
                                             capsys) -> None:
        pairs_csv = tmp_path / "xg.csv"
        code, _ = run(capsys, [
            "pairs", "--manifest", str(cohort_dir / "manifest.jsonl"),
            "--kind", "impostor", "--subset", "AF", "--subset-b", "AM",
            "--m", "60", "--seed", "11", "--out", str(pairs_csv)])
        assert code == 0
        kept_csv = tmp_path / "kept.csv"
        code, fields = run(capsys, [
            "balance-area", "--manifest", str(cohort_dir / "manifest.jsonl"),
            "--pairs", str(pairs_csv),
            "--masks", str(cohort_dir / "masks"),
            "--min-iou", "0.5", "--out", str(kept_csv)])
        assert code == 0
        assert int(fields["kept"]) + int(fields["dropped"]) == 60
        dropped_csv = tmp_path / "kept.dropped.csv"
        assert dropped_csv.read_text().startswith(
            "image_id_a,image_id_b,reason")


class TestMetricsBenchmarkSubsample:
    def test_metrics_reference_scope_row(self, cohort_dir, tmp_path,
                                         capsys) -> None:
        prefix = tmp_path / "rep"
        code, fields = run(capsys, [
            "metrics", "--manifest", str(cohort_dir / "manifest.jsonl"),
            "--emb", str(cohort_dir / "embeddings.baem"),
            "--fmr", "0.05", "--scope", "reference:AM", "--seed", "7",
            "--impostors-per-group", "200",
            "--out-prefix", str(prefix)])
        assert code == 0
        rows = (prefix.parent / "rep.groups.csv").read_text().splitlines()
        assert rows[0] == "group,n_ids,n_images,n_genuine,n_impostor,dprime,fmr,tpr"
        by_code = {}
        for row in rows[1:]:
            cells = row.split(",")
            by_code[cells[0]] = cells
        # the reference group achieves the target rate barring ties
        assert float(by_code["AM"][6]) == pytest.approx(0.05, abs=0.5 / 200)
        payload = json.loads((prefix.parent / "rep.json").read_text())
        assert payload["scope"] == "reference:AM"
        assert payload["run"]["subcommand"] == "metrics"
        assert "timestamp" not in payload["run"]

    def test_metrics_deterministic_bytes(self, cohort_dir, tmp_path,
                                         capsys) -> None:
        argv = ["metrics", "--manifest", str(cohort_dir / "manifest.jsonl"),
                "--emb", str(cohort_dir / "embeddings.baem"),
                "--fmr", "0.02", "--seed", "3",
                "--impostors-per-group", "150",
                "--out-prefix", str(tmp_path / "rep")]
        assert run(capsys, argv)[0] == 0
        first = {s: (tmp_path / f"rep{s}").read_bytes()
                 for s in (".groups.csv", ".gaps.csv", ".json")}
        assert run(capsys, argv + ["--force"])[0] == 0
        for suffix, before in first.items():
            assert (tmp_path / f"rep{suffix}").read_bytes() == before

    def test_subsample_label_and_counts(self, cohort_dir, tmp_path,
                                        capsys) -> None:
        out = tmp_path / "sub.jsonl"
        code, fields = run(capsys, [
            "subsample", "--manifest", str(cohort_dir / "manifest.jsonl"),
            "--group", "AF", "--n-ids", "4", "--imgs-per-id", "3",
            "--seed", "2", "--out", str(out)])
        assert code == 0
        assert fields["label"] == "AF-4-3"
        picked = load_manifest(out)
        assert len(picked) == 12
        assert len(picked.identity_ids()) == 4

    def test_benchmark_shortfall_is_exit_1(self, cohort_dir, tmp_path,
                                           capsys) -> None:
        code, _ = run(capsys, [
            "benchmark", "--manifest", str(cohort_dir / "manifest.jsonl"),
            "--seed", "1", "--out", str(tmp_path / "bench.jsonl")])
        assert code == 1  # 8 ids per group cannot seat 90 subjects


class TestReport:
    def test_histograms_and_heatmap(self, cohort_dir, tmp_path,
                                    capsys) -> None:
        prefix = tmp_path / "dist"
        code, fields = run(capsys, [
            "report", "--manifest", str(cohort_dir / "manifest.jsonl"),
            "--emb", str(cohort_dir / "embeddings.baem"),
            "--subset", "AF", "--m", "300", "--seed", "13",
            "--masks", str(cohort_dir / "masks"), "--diff", "AF,AM",
            "--out-prefix", str(prefix)])
        assert code == 0
        gen_lines = (tmp_path / "dist.genuine.csv").read_text().splitlines()
        assert gen_lines[0] == "bin_center,count"
        assert len(gen_lines) == 1 + 2000
        assert (tmp_path / "dist.impostor.csv").exists()
        assert (tmp_path / "dist.heatmap.csv").exists()
        assert (tmp_path / "dist.heatmap.bahm").exists()
        payload = json.loads((tmp_path / "dist.json").read_text())
        assert payload["n_genuine"] == int(fields["n_genuine"])
        assert payload["dprime"] > 0
        assert 0.0 <= payload["heatmap_mean_abs"] <= 1.0

    def test_diff_requires_masks(self, cohort_dir, tmp_path, capsys) -> None:
        code, _ = run(capsys, [
            "report", "--manifest", str(cohort_dir / "manifest.jsonl"),
            "--emb", str(cohort_dir / "embeddings.baem"),
            "--seed", "1", "--diff", "AF,AM",
            "--out-prefix", str(tmp_path / "x")])
        assert code == 1


class TestRecipeDeterminism:
    def test_filter_consensus_denoise_metrics_reruns_identically(
            self, cohort_dir, tmp_path, capsys) -> None:
        m = str(cohort_dir / "manifest.jsonl")
        e = str(cohort_dir / "embeddings.baem")

        base = tmp_path / "recipe"
        base.mkdir()

        def recipe(force: list[str]) -> list[bytes]:
            f = base / "filtered.jsonl"
            c = base / "consensus.jsonl"
            d = base / "clean.jsonl"
            assert run(capsys, ["filter", "--manifest", m,
                                "--out", str(f)] + force)[0] == 0
            assert run(capsys, ["consensus", "--manifest", str(f),
                                "--out", str(c)] + force)[0] == 0
            assert run(capsys, ["denoise", "--manifest", str(c), "--emb", e,
                                "--out", str(d),
                                "--threads", "2"] + force)[0] == 0
            assert run(capsys, ["metrics", "--manifest", str(d), "--emb", e,
                                "--fmr", "0.02", "--seed", "17",
                                "--impostors-per-group", "200",
                                "--out-prefix",
                                str(base / "rep")] + force)[0] == 0
            return [(base / "rep.groups.csv").read_bytes(),
                    (base / "rep.gaps.csv").read_bytes(),
                    (base / "rep.json").read_bytes(),
                    d.read_bytes()]

        assert recipe([]) == recipe(["--force"])


class TestProvenanceSidecars:
    def test_sidecar_fields(self, cohort_dir, tmp_path, capsys) -> None:
        out = tmp_path / "filtered.jsonl"
        run(capsys, ["filter", "--manifest",
                     str(cohort_dir / "manifest.jsonl"), "--out", str(out)])
        sidecar = json.loads((tmp_path / "filtered.jsonl.prov.json")
                             .read_text())
        assert sidecar["subcommand"] == "filter"
        assert sidecar["inputs"]["manifest"].startswith("sha256:")
        assert sidecar["tool_version"]
        assert "timestamp" in sidecar
        assert sidecar["parameters"]["pose_max"] == 20.0

    def test_chained_digest_matches_input_file(self, cohort_dir, tmp_path,
                                               capsys) -> None:
        import hashlib
        out = tmp_path / "filtered.jsonl"
        run(capsys, ["filter", "--manifest",
                     str(cohort_dir / "manifest.jsonl"), "--out", str(out)])
        digest = "sha256:" + hashlib.sha256(
            (cohort_dir / "manifest.jsonl").read_bytes()).hexdigest()
        kept = load_manifest(out)
        assert digest in kept.provenance
