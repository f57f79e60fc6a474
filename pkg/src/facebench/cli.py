"""Command-line pipeline driver with chained run provenance.

Every subcommand writes its artifacts to new paths (pass --force to
replace an existing file), prints one machine-readable key=value
summary line to stdout, and leaves a .prov.json sidecar next to each
artifact. Manifests additionally embed a stage line naming the input
files' digests, so a manifest header is a complete recipe for how it
was produced. Timestamps live only in the sidecars; artifact bytes
depend on nothing but inputs, flags, and seeds.

Exit codes: 0 success, 1 contract or validation errors, 2 usage
errors.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import shlex
import sys
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .consensus import age_disagreement_report, apply_consensus
from .denoise import (
    DenoiseConfig,
    denoise_manifest,
    genuine_shift_report,
    load_drop_list,
    write_drop_list,
)
from .errors import ContractViolation, FacebenchError, ManifestParseError
from .evaluation import (
    PairBlock,
    disparity_report,
    enumerate_genuine_pairs,
    sample_impostor_pairs,
    score_pairs,
    dprime,
)
from .facearea import balance_pairs_by_iou, mean_mask_diff
from .filters import GateConfig, filter_manifest
from .protocols import SubsampleSpec, build_benchmark, subsample
from .records import (
    DemographicGroup,
    EmbeddingStore,
    Gender,
    Manifest,
    MaskRaster,
    Race,
    load_manifest,
    load_mask,
    validate,
    write_mask,
)
from .seeds import derive_seed
from .synthcohort import generate, load_cohort_config

PAIR_HEADER = ("image_id_a", "image_id_b")


# ---------------------------------------------------------------------------
# provenance plumbing

# flags that never affect artifact content; embedded provenance skips them
OPERATIONAL_PARAMS = ("force", "threads")


@dataclass(frozen=True)
class RunProvenance:
    subcommand: str
    parameters: dict
    inputs: dict
    seeds: dict
    tool_version: str
    timestamp: str

    def to_dict(self, full: bool = True) -> dict:
        """Full form goes to sidecars; the embedded form keeps only what
        determines artifact bytes (no timestamp, no operational flags)."""
        parameters = self.parameters if full else {
            k: v for k, v in self.parameters.items()
            if k not in OPERATIONAL_PARAMS}
        payload = {
            "subcommand": self.subcommand,
            "parameters": parameters,
            "inputs": self.inputs,
            "seeds": self.seeds,
            "tool_version": self.tool_version,
        }
        if full:
            payload["timestamp"] = self.timestamp
        return payload


def _sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return "sha256:" + digest.hexdigest()


def _digest_path(path) -> str:
    """Digest of a file, or of a directory's sorted (name, digest) list."""
    path = Path(path)
    if path.is_dir():
        digest = hashlib.sha256()
        for sub in sorted(p for p in path.rglob("*") if p.is_file()):
            rel = sub.relative_to(path).as_posix()
            digest.update(rel.encode("utf-8"))
            digest.update(_sha256_file(sub).encode("ascii"))
        return "sha256:" + digest.hexdigest()
    return _sha256_file(path)


def _run_provenance(args: argparse.Namespace, inputs: dict,
                    seeds: Optional[dict] = None) -> RunProvenance:
    skip = {"func", "subcommand"}
    parameters = {k: (str(v) if isinstance(v, Path) else v)
                  for k, v in sorted(vars(args).items()) if k not in skip}
    return RunProvenance(
        subcommand=args.subcommand,
        parameters=parameters,
        inputs=dict(sorted(inputs.items())),
        seeds=dict(sorted((seeds or {}).items())),
        tool_version=__version__,
        timestamp=datetime.now(timezone.utc).isoformat(),
    )


def _sidecar(artifact, prov: RunProvenance) -> None:
    path = Path(str(artifact) + ".prov.json")
    path.write_text(json.dumps(prov.to_dict(), indent=2, sort_keys=True,
                               default=str) + "\n", encoding="utf-8")


def _stage_line(name: str, inputs: dict, **params) -> str:
    """Deterministic one-line recipe embedded in manifest provenance."""
    parts = [name]
    for key, value in sorted(inputs.items()):
        parts.append(f"{key}={value}")
    for key, value in params.items():
        parts.append(f"{key}={value!r}" if isinstance(value, float)
                     else f"{key}={value}")
    parts.append(f"version={__version__}")
    return " ".join(parts)


def _chain(manifest: Manifest, line: str) -> Manifest:
    joined = manifest.provenance + "\n" + line if manifest.provenance else line
    return manifest.with_provenance(joined)


# ---------------------------------------------------------------------------
# small shared helpers

def _fresh(path, force: bool) -> Path:
    path = Path(path)
    if path.exists() and not force:
        raise ContractViolation(
            f"refusing to overwrite {path} (pass --force to replace)")
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _summary(**fields) -> None:
    parts = []
    for key, value in fields.items():
        text = str(value)
        if any(ch.isspace() for ch in text):
            text = shlex.quote(text)
        parts.append(f"{key}={text}")
    print(" ".join(parts))


def _subset_indices(manifest: Manifest, selector: str) -> list[int]:
    """Record indices matching 'all', a group code, race:X, or gender:X."""
    if selector == "all":
        return list(range(len(manifest)))
    if selector.startswith("race:"):
        try:
            race = Race(selector.split(":", 1)[1])
        except ValueError:
            raise ContractViolation(f"unknown race in selector {selector!r}")
        return [i for i, r in enumerate(manifest) if r.race is race]
    if selector.startswith("gender:"):
        try:
            gender = Gender(selector.split(":", 1)[1])
        except ValueError:
            raise ContractViolation(f"unknown gender in selector {selector!r}")
        return [i for i, r in enumerate(manifest) if r.gender is gender]
    code = DemographicGroup.from_code(selector).code
    return [i for i, r in enumerate(manifest)
            if r.group is not None and r.group.code == code]


def _pairs_to_image_ids(manifest: Manifest,
                        block: PairBlock) -> list[tuple[str, str]]:
    by_row: dict[int, str] = {}
    for rec in manifest:
        if rec.embedding_index is not None:
            by_row.setdefault(rec.embedding_index, rec.image_id)
    out = []
    for a, b in zip(block.a.tolist(), block.b.tolist()):
        out.append((by_row[a], by_row[b]))
    return out


def _write_pairs_csv(path: Path, rows: Sequence[tuple[str, str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PAIR_HEADER)
        writer.writerows(rows)


def _read_pairs_csv(path) -> list[tuple[str, str]]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header[:2]) != PAIR_HEADER:
            raise ManifestParseError(
                f"{path}: expected header {','.join(PAIR_HEADER)}")
        pairs = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) < 2:
                raise ManifestParseError(f"{path}: line {lineno}: too few columns")
            pairs.append((row[0], row[1]))
    return pairs


def _mask_lookup(manifest: Manifest, masks_dir,
                 image_ids) -> dict[str, MaskRaster]:
    """Masks for the requested ids; silently absent when the file is missing."""
    by_id = {rec.image_id: rec for rec in manifest}
    masks: dict[str, MaskRaster] = {}
    root = Path(masks_dir)
    for image_id in image_ids:
        rec = by_id.get(image_id)
        rel = rec.mask_path if rec is not None and rec.mask_path else \
            f"{image_id}.bamk"
        path = root / rel
        if path.exists():
            masks[image_id] = load_mask(path)
    return masks


# ---------------------------------------------------------------------------
# subcommands

def _cmd_validate(args) -> int:
    manifest = load_manifest(args.manifest)
    inputs = {"manifest": _digest_path(args.manifest)}
    store = None
    if args.emb is not None:
        store = EmbeddingStore.open(args.emb)
        inputs["emb"] = _digest_path(args.emb)
    report = validate(manifest, store)
    fields = {"status": "ok" if report.ok else "findings",
              "findings": len(report.findings)}
    if args.out is not None:
        out = _fresh(args.out, args.force)
        out.write_text(report.to_json() + "\n", encoding="utf-8")
        _sidecar(out, _run_provenance(args, inputs))
        fields["out"] = out
    _summary(**fields)
    return 0 if report.ok else 1


def _cmd_filter(args) -> int:
    manifest = load_manifest(args.manifest)
    config = GateConfig(
        q_faceqnet_min=args.q_faceqnet_min,
        q_magface_min=args.q_magface_min,
        pose_max=args.pose_max,
        fsb_low=args.fsb_low,
        fsb_high=args.fsb_high,
        area_min=args.area_min,
        require_nose=not args.no_require_nose,
    )
    kept, stats = filter_manifest(manifest, config)
    inputs = {"manifest": _digest_path(args.manifest)}
    line = _stage_line(
        "filter", inputs,
        q_faceqnet_min=config.q_faceqnet_min,
        q_magface_min=config.q_magface_min,
        pose_max=config.pose_max,
        fsb_low=config.fsb_low,
        fsb_high=config.fsb_high,
        area_min=config.area_min,
        require_nose=config.require_nose,
    )
    out = _fresh(args.out, args.force)
    prov = _run_provenance(args, inputs)
    _chain(kept, line).write(out)
    _sidecar(out, prov)
    fields = {"status": "ok", "kept": len(kept),
              "rejected": stats.rejected_count, "out": out}
    if args.stats is not None:
        stats_path = _fresh(args.stats, args.force)
        stats_path.write_text(stats.to_json() + "\n", encoding="utf-8")
        _sidecar(stats_path, prov)
        fields["stats"] = stats_path
    _summary(**fields)
    return 0


def _cmd_consensus(args) -> int:
    manifest = load_manifest(args.manifest)
    relabeled, results = apply_consensus(manifest)
    inputs = {"manifest": _digest_path(args.manifest)}
    prov = _run_provenance(args, inputs)
    out = _fresh(args.out, args.force)
    _chain(relabeled, _stage_line("consensus", inputs)).write(out)
    _sidecar(out, prov)
    ambiguous = sum(1 for r in results if r.ambiguous)
    fields = {"status": "ok", "identities": len(results),
              "ambiguous": ambiguous, "out": out}
    if args.age_csv is not None:
        age_path = _fresh(args.age_csv, args.force)
        age_disagreement_report(manifest).write_csv(age_path)
        _sidecar(age_path, prov)
        fields["age_csv"] = age_path
    _summary(**fields)
    return 0


def _cmd_denoise(args) -> int:
    manifest = load_manifest(args.manifest)
    store = EmbeddingStore.open(args.emb)
    config = DenoiseConfig(eps=args.eps, min_pts=args.min_pts,
                           keep_policy=args.keep_policy)
    cleaned, drops = denoise_manifest(manifest, store, config,
                                      threads=args.threads)
    inputs = {"manifest": _digest_path(args.manifest),
              "emb": _digest_path(args.emb)}

    if args.intersect is not None:
        # keep-set intersection with a previous run: anything either run
        # dropped stays dropped
        inputs["intersect"] = _digest_path(args.intersect)
        other = {e.image_id: e for e in load_drop_list(args.intersect)}
        still = [r for r in cleaned if r.image_id not in other]
        extra = [other[r.image_id] for r in cleaned if r.image_id in other]
        cleaned = cleaned.restricted(still)
        drops = drops + extra

    line = _stage_line("denoise", inputs, eps=config.eps,
                       min_pts=config.min_pts, keep_policy=config.keep_policy)
    out = _fresh(args.out, args.force)
    prov = _run_provenance(args, inputs,
                           seeds={"seed": args.seed} if args.seed is not None
                           else {})
    _chain(cleaned, line).write(out)
    _sidecar(out, prov)

    drop_path = Path(args.drop_list) if args.drop_list is not None else \
        out.with_name(out.stem + ".drops.txt")
    drop_path = _fresh(drop_path, args.force)
    write_drop_list(drops, drop_path)
    _sidecar(drop_path, prov)

    fields = {"status": "ok", "kept": len(cleaned), "dropped": len(drops),
              "out": out, "drop_list": drop_path}
    if args.shift_prefix is not None:
        pair = genuine_shift_report(manifest, cleaned, store, args.seed,
                                    n_identities=args.shift_ids,
                                    threads=args.threads)
        before_path = _fresh(f"{args.shift_prefix}.before.csv", args.force)
        after_path = _fresh(f"{args.shift_prefix}.after.csv", args.force)
        pair.before.write_histogram_csv(before_path)
        pair.after.write_histogram_csv(after_path)
        _sidecar(before_path, prov)
        _sidecar(after_path, prov)
        fields["shift_before"] = before_path
        fields["shift_after"] = after_path
        fields["mass_before"] = repr(
            pair.before.mass_between(-0.2, 0.3) if pair.before.count else 0.0)
        fields["mass_after"] = repr(
            pair.after.mass_between(-0.2, 0.3) if pair.after.count else 0.0)
    _summary(**fields)
    return 0


def _cmd_pairs(args) -> int:
    manifest = load_manifest(args.manifest)
    subset = _subset_indices(manifest, args.subset)
    inputs = {"manifest": _digest_path(args.manifest)}
    seeds = {}
    if args.kind == "genuine":
        block = enumerate_genuine_pairs(manifest, subset)
    else:
        subset_b = (_subset_indices(manifest, args.subset_b)
                    if args.subset_b is not None else None)
        seed = derive_seed(args.seed, "pairs", args.subset,
                           args.subset_b or "")
        seeds = {"seed": args.seed}
        block = sample_impostor_pairs(manifest, args.m, seed, subset=subset,
                                      subset_b=subset_b)
    rows = _pairs_to_image_ids(manifest, block)
    out = _fresh(args.out, args.force)
    _write_pairs_csv(out, rows)
    _sidecar(out, _run_provenance(args, inputs, seeds))
    _summary(status="ok", kind=args.kind, n_pairs=len(rows), out=out)
    return 0


def _cmd_metrics(args) -> int:
    manifest = load_manifest(args.manifest)
    store = EmbeddingStore.open(args.emb)
    report = disparity_report(manifest, store,
                              impostors_per_group=args.impostors_per_group,
                              seed=args.seed, target_fmr=args.fmr,
                              scope=args.scope, threads=args.threads)
    inputs = {"manifest": _digest_path(args.manifest),
              "emb": _digest_path(args.emb)}
    prov = _run_provenance(args, inputs, seeds={"seed": args.seed})

    groups_path = _fresh(f"{args.out_prefix}.groups.csv", args.force)
    gaps_path = _fresh(f"{args.out_prefix}.gaps.csv", args.force)
    json_path = _fresh(f"{args.out_prefix}.json", args.force)
    report.write_group_csv(groups_path)
    report.write_gaps_csv(gaps_path)
    payload = json.loads(report.to_json())
    payload["run"] = prov.to_dict(full=False)
    json_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                         encoding="utf-8")
    for path in (groups_path, gaps_path, json_path):
        _sidecar(path, prov)
    _summary(status="ok", groups=len(report.groups),
             threshold=repr(report.threshold) if report.threshold is not None
             else "per-group",
             groups_csv=groups_path, gaps_csv=gaps_path, json=json_path)
    return 0


def _cmd_balance_area(args) -> int:
    manifest = load_manifest(args.manifest)
    pairs = _read_pairs_csv(args.pairs)
    referenced = {pid for pair in pairs for pid in pair}
    masks = _mask_lookup(manifest, args.masks, referenced)
    result = balance_pairs_by_iou(pairs, masks, min_iou=args.min_iou)
    inputs = {"manifest": _digest_path(args.manifest),
              "pairs": _digest_path(args.pairs),
              "masks": _digest_path(args.masks)}
    prov = _run_provenance(args, inputs)

    out = _fresh(args.out, args.force)
    _write_pairs_csv(out, result.kept)
    _sidecar(out, prov)
    dropped_path = Path(args.dropped) if args.dropped is not None else \
        out.with_name(out.stem + ".dropped.csv")
    dropped_path = _fresh(dropped_path, args.force)
    with open(dropped_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PAIR_HEADER + ("reason",))
        for (a, b), reason in result.dropped:
            writer.writerow((a, b, reason))
    _sidecar(dropped_path, prov)
    _summary(status="ok", kept=len(result.kept), dropped=len(result.dropped),
             out=out, dropped_csv=dropped_path)
    return 0


def _cmd_benchmark(args) -> int:
    manifest = load_manifest(args.manifest)
    bench = build_benchmark(manifest, seed=args.seed, agg_rule=args.agg,
                            n_subjects=args.n_subjects,
                            imgs_per_subject=args.imgs_per_subject)
    inputs = {"manifest": _digest_path(args.manifest)}
    out = _fresh(args.out, args.force)
    _chain(bench.manifest, _stage_line("benchmark", inputs)).write(out)
    _sidecar(out, _run_provenance(args, inputs, seeds={"seed": args.seed}))
    _summary(status="ok", images=len(bench.manifest),
             identities=len(bench.manifest.identity_ids()), out=out)
    return 0


def _cmd_subsample(args) -> int:
    manifest = load_manifest(args.manifest)
    spec = SubsampleSpec(n_ids=args.n_ids, imgs_per_id=args.imgs_per_id,
                         group=DemographicGroup.from_code(args.group),
                         seed=args.seed)
    picked = subsample(manifest, spec)
    inputs = {"manifest": _digest_path(args.manifest)}
    out = _fresh(args.out, args.force)
    line = _stage_line("subsample", inputs, group=args.group,
                       n_ids=args.n_ids, imgs_per_id=args.imgs_per_id,
                       seed=args.seed)
    _chain(picked, line).write(out)
    _sidecar(out, _run_provenance(args, inputs, seeds={"seed": args.seed}))
    _summary(status="ok", label=spec.label, images=len(picked), out=out)
    return 0


def _cmd_synth(args) -> int:
    spec = load_cohort_config(args.spec)
    manifest, store, masks, truth = generate(spec)
    inputs = {"spec": _digest_path(args.spec)}
    prov = _run_provenance(args, inputs, seeds={"seed": spec.seed})

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = _fresh(out_dir / "manifest.jsonl", args.force)
    emb_path = _fresh(out_dir / "embeddings.baem", args.force)
    truth_path = _fresh(out_dir / "ground_truth.jsonl", args.force)

    _chain(manifest, _stage_line("synth", inputs)).write(manifest_path)
    store.write(emb_path)
    truth.write(truth_path)
    for path in (manifest_path, emb_path, truth_path):
        _sidecar(path, prov)
    fields = {"status": "ok", "images": len(manifest),
              "identities": len(manifest.identity_ids()),
              "manifest": manifest_path, "emb": emb_path,
              "ground_truth": truth_path}
    if masks is not None:
        masks_dir = out_dir / "masks"
        masks_dir.mkdir(exist_ok=True)
        for rec in manifest:
            mask_path = _fresh(masks_dir / rec.mask_path, args.force)
            write_mask(masks[rec.image_id], mask_path)
        _sidecar(masks_dir, prov)
        fields["masks"] = masks_dir
    _summary(**fields)
    return 0


def _cmd_report(args) -> int:
    manifest = load_manifest(args.manifest)
    store = EmbeddingStore.open(args.emb)
    subset = _subset_indices(manifest, args.subset)
    gen_block = enumerate_genuine_pairs(manifest, subset)
    imp_block = sample_impostor_pairs(
        manifest, args.m, derive_seed(args.seed, "report", args.subset),
        subset=subset)
    gen = score_pairs(store, gen_block, threads=args.threads)
    imp = score_pairs(store, imp_block, threads=args.threads)

    inputs = {"manifest": _digest_path(args.manifest),
              "emb": _digest_path(args.emb)}
    prov = _run_provenance(args, inputs, seeds={"seed": args.seed})

    gen_path = _fresh(f"{args.out_prefix}.genuine.csv", args.force)
    imp_path = _fresh(f"{args.out_prefix}.impostor.csv", args.force)
    gen.write_histogram_csv(gen_path)
    imp.write_histogram_csv(imp_path)
    written = [gen_path, imp_path]

    payload = {
        "subset": args.subset,
        "n_genuine": gen.count,
        "n_impostor": imp.count,
        "genuine_mean": gen.mean if gen.count else None,
        "impostor_mean": imp.mean if imp.count else None,
        "dprime": dprime(gen, imp) if gen.count > 1 and imp.count > 1 else None,
        "run": prov.to_dict(full=False),
    }
    fields = {"status": "ok", "n_genuine": gen.count, "n_impostor": imp.count,
              "genuine_csv": gen_path, "impostor_csv": imp_path}

    if args.diff is not None:
        if args.masks is None:
            raise ContractViolation("--diff requires --masks")
        sides = args.diff.split(",")
        if len(sides) != 2:
            raise ContractViolation("--diff takes two selectors: A,B")
        inputs["masks"] = _digest_path(args.masks)

        def side_masks(selector: str) -> list[MaskRaster]:
            ids = [manifest[i].image_id
                   for i in _subset_indices(manifest, selector)]
            table = _mask_lookup(manifest, args.masks, ids)
            return [table[i] for i in ids if i in table]

        grid = mean_mask_diff(side_masks(sides[0]), side_masks(sides[1]))
        heat_csv = _fresh(f"{args.out_prefix}.heatmap.csv", args.force)
        heat_raw = _fresh(f"{args.out_prefix}.heatmap.bahm", args.force)
        grid.write_csv(heat_csv)
        grid.write_raster(heat_raw)
        written.extend([heat_csv, heat_raw])
        payload["heatmap_mean_abs"] = grid.mean_abs()
        fields["heatmap_csv"] = heat_csv
        fields["heatmap_mean_abs"] = repr(grid.mean_abs())

    json_path = _fresh(f"{args.out_prefix}.json", args.force)
    json_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                         encoding="utf-8")
    written.append(json_path)
    for path in written:
        _sidecar(path, prov)
    fields["json"] = json_path
    _summary(**fields)
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="facebench",
        description="Bias-aware curation and verification evaluation over "
                    "embedding manifests.")
    parser.add_argument("--version", action="version",
                        version=f"facebench {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p: argparse.ArgumentParser, emb: bool = False,
               seed: Optional[bool] = None, threads: bool = False) -> None:
        p.add_argument("--manifest", required=True, help="input manifest")
        if emb:
            p.add_argument("--emb", required=True, help="embedding store")
        if seed is not None:
            p.add_argument("--seed", type=int, required=seed,
                           help="RNG seed" + ("" if seed else
                                              " (required when sampling)"))
        if threads:
            p.add_argument("--threads", type=int,
                           default=os.cpu_count() or 1,
                           help="worker cap; results independent of N")
        p.add_argument("--force", action="store_true",
                       help="allow overwriting existing outputs")

    p = sub.add_parser("validate", help="check manifest/store integrity")
    p.add_argument("--manifest", required=True)
    p.add_argument("--emb", default=None)
    p.add_argument("--out", default=None, help="findings report JSON")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("filter", help="apply attribute gates")
    common(p)
    p.add_argument("--out", required=True, help="filtered manifest")
    p.add_argument("--stats", default=None, help="rejection stats JSON")
    defaults = GateConfig()
    p.add_argument("--q-faceqnet-min", type=float,
                   default=defaults.q_faceqnet_min)
    p.add_argument("--q-magface-min", type=float,
                   default=defaults.q_magface_min)
    p.add_argument("--pose-max", type=float, default=defaults.pose_max)
    p.add_argument("--fsb-low", type=float, default=defaults.fsb_low)
    p.add_argument("--fsb-high", type=float, default=defaults.fsb_high)
    p.add_argument("--area-min", type=float, default=defaults.area_min)
    p.add_argument("--no-require-nose", action="store_true")
    p.set_defaults(func=_cmd_filter)

    p = sub.add_parser("consensus", help="vote identity-level labels")
    common(p)
    p.add_argument("--out", required=True, help="relabeled manifest")
    p.add_argument("--age-csv", default=None,
                   help="age disagreement matrix CSV")
    p.set_defaults(func=_cmd_consensus)

    p = sub.add_parser("denoise", help="drop identity-label noise")
    common(p, emb=True, seed=False, threads=True)
    p.add_argument("--out", required=True, help="cleaned manifest")
    p.add_argument("--eps", type=float, default=DenoiseConfig().eps)
    p.add_argument("--min-pts", type=int, default=DenoiseConfig().min_pts)
    p.add_argument("--keep-policy", default=DenoiseConfig().keep_policy,
                   choices=("drop_noise_only", "keep_largest_cluster"))
    p.add_argument("--drop-list", default=None,
                   help="drop list path (default: beside --out)")
    p.add_argument("--intersect", default=None,
                   help="previous run's drop list; keep only images kept "
                        "by both runs")
    p.add_argument("--shift-prefix", default=None,
                   help="write before/after genuine histograms "
                        "(requires --seed)")
    p.add_argument("--shift-ids", type=int, default=200,
                   help="identity sample size for the shift report")
    p.set_defaults(func=_cmd_denoise)

    p = sub.add_parser("pairs", help="materialize pair lists")
    common(p, seed=False)
    p.add_argument("--kind", required=True, choices=("genuine", "impostor"))
    p.add_argument("--subset", default="all",
                   help="all | group code | race:X | gender:X")
    p.add_argument("--subset-b", default=None,
                   help="second side for cross-subset impostor pairs")
    p.add_argument("--m", type=int, default=10_000_000,
                   help="impostor sample cap")
    p.add_argument("--out", required=True, help="pair CSV")
    p.set_defaults(func=_cmd_pairs)

    p = sub.add_parser("metrics", help="per-group disparity report")
    common(p, emb=True, seed=True, threads=True)
    p.add_argument("--fmr", type=float, default=1e-3, help="target FMR")
    p.add_argument("--scope", default="global",
                   help="global | within_group | reference:CODE")
    p.add_argument("--impostors-per-group", type=int, default=10_000_000)
    p.add_argument("--out-prefix", required=True,
                   help="writes PREFIX.groups.csv, PREFIX.gaps.csv, "
                        "PREFIX.json")
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser("balance-area", help="IoU-filter image pairs")
    common(p)
    p.add_argument("--pairs", required=True, help="pair CSV to filter")
    p.add_argument("--masks", required=True, help="mask directory")
    p.add_argument("--min-iou", type=float, default=0.9)
    p.add_argument("--out", required=True, help="kept pairs CSV")
    p.add_argument("--dropped", default=None,
                   help="dropped pairs CSV (default: beside --out)")
    p.set_defaults(func=_cmd_balance_area)

    p = sub.add_parser("benchmark", help="quality-capped benchmark manifest")
    common(p, seed=True)
    p.add_argument("--agg", default="mean", choices=("mean", "min", "product"))
    p.add_argument("--n-subjects", type=int, default=90)
    p.add_argument("--imgs-per-subject", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_benchmark)

    p = sub.add_parser("subsample", help="fixed-size identity/image draw")
    common(p, seed=True)
    p.add_argument("--group", required=True, help="group code, e.g. AF")
    p.add_argument("--n-ids", type=int, required=True)
    p.add_argument("--imgs-per-id", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_subsample)

    p = sub.add_parser("synth", help="generate a ground-truth-known cohort")
    p.add_argument("--spec", required=True, help="cohort config (INI)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("report", help="score histograms and mask heatmaps")
    common(p, emb=True, seed=True, threads=True)
    p.add_argument("--subset", default="all",
                   help="all | group code | race:X | gender:X")
    p.add_argument("--m", type=int, default=1_000_000,
                   help="impostor sample cap")
    p.add_argument("--masks", default=None, help="mask directory")
    p.add_argument("--diff", default=None,
                   help="two selectors A,B for a mean-mask-diff heatmap")
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.subcommand == "pairs" and args.kind == "impostor" \
            and args.seed is None:
        parser.error("--seed is required for impostor sampling")
    if args.subcommand == "denoise" and args.shift_prefix is not None \
            and args.seed is None:
        parser.error("--seed is required for --shift-prefix")
    try:
        return args.func(args)
    except FacebenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
