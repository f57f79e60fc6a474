"""Directory-to-artifacts extraction.

Walks an image tree laid out one folder per identity, runs every image
through the adapter set in batches, and writes the downstream toolkit's
artifacts: a JSONL manifest, a BAEM embedding blob, one BAMK mask plus
one BAGY grayscale raster per image, and a JSON skip report. An image
that cannot be decoded becomes a skip entry; it is never silently
dropped. A model that cannot be loaded aborts the run before any file
is written.
"""

from __future__ import annotations

import configparser
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import __version__
from .adapters import (
    AdapterSet,
    DecodedImage,
    build_adapters,
    fairface_age_to_group,
    pick_most_frontal,
)
from .errors import BridgeError, ConfigError
from .formats import (
    CLASS_FACIAL_HAIR,
    CLASS_NOSE,
    CLASS_SKIN,
    FACE_CLASSES,
    bt601_luma,
    write_embeddings,
    write_gray,
    write_manifest,
    write_mask,
)

MANIFEST_NAME = "manifest.jsonl"
EMBEDDINGS_NAME = "embeddings.baem"
MASKS_DIR = "masks"
SKIPS_NAME = "skips.json"


@dataclass
class ExtractorConfig:
    input_dir: str
    output_dir: str
    batch_size: int = 16
    device: str = "cpu"
    embedding_dim: int = 512
    image_size: int = 224
    facial_hair_min_pixels: int = 50
    model_paths: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.embedding_dim < 1:
            raise ConfigError("embedding_dim must be positive")
        if self.image_size < 16:
            raise ConfigError("image_size must be at least 16")
        if self.facial_hair_min_pixels < 0:
            raise ConfigError("facial_hair_min_pixels must be non-negative")


def config_from_ini(path: str, input_dir: str, output_dir: str,
                    batch_size: Optional[int] = None) -> ExtractorConfig:
    """Build a config from an INI file; CLI values win over file values."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    section = parser["extract"] if "extract" in parser else {}
    kwargs: dict = {}
    for key in ("batch_size", "embedding_dim", "image_size",
                "facial_hair_min_pixels"):
        if key in section:
            try:
                kwargs[key] = int(section[key])
            except ValueError:
                raise ConfigError(f"{key} must be an integer") from None
    if "device" in section:
        kwargs["device"] = section["device"]
    if batch_size is not None:
        kwargs["batch_size"] = batch_size
    models = {}
    if "models" in parser:
        models = dict(parser["models"])
    return ExtractorConfig(input_dir=input_dir, output_dir=output_dir,
                           model_paths=models, **kwargs)


@dataclass(frozen=True)
class SkipEntry:
    path: str
    reason: str


@dataclass
class ExtractResult:
    n_records: int
    skips: list[SkipEntry]
    manifest_path: Path
    embeddings_path: Path
    masks_dir: Path
    skip_report_path: Path


def scan_input(input_dir: Path) -> tuple[list[tuple[str, Path]],
                                         list[SkipEntry]]:
    """All (identity, image path) pairs in deterministic order.

    Layout contract: one folder per identity. Stray files at the top
    level belong to no identity and are reported, not processed.
    """
    if not input_dir.is_dir():
        raise BridgeError(f"input directory not found: {input_dir}")
    entries: list[tuple[str, Path]] = []
    skips: list[SkipEntry] = []
    for child in sorted(input_dir.iterdir(), key=lambda p: p.name):
        if child.is_dir():
            for img in sorted(child.iterdir(), key=lambda p: p.name):
                if img.is_file():
                    entries.append((child.name, img))
                else:
                    skips.append(SkipEntry(str(img),
                                           "nested directories not supported"))
        else:
            skips.append(SkipEntry(str(child),
                                   "file is not inside an identity folder"))
    return entries, skips


def _decode(path: Path, size: int) -> np.ndarray:
    with Image.open(path) as img:
        rgb = img.convert("RGB").resize((size, size), Image.BILINEAR)
    return np.asarray(rgb, dtype=np.uint8)


def extract(config: ExtractorConfig,
            adapters: Optional[AdapterSet] = None) -> ExtractResult:
    """Run the full bridge over one input tree.

    Returns after all artifacts are written. Embedding rows are written
    L2-normalized whatever the adapter produced, and record i's
    embedding_index is exactly i.
    """
    if adapters is None:
        adapters = build_adapters(config)  # model load failures abort here

    input_dir = Path(config.input_dir)
    output_dir = Path(config.output_dir)
    entries, skips = scan_input(input_dir)

    output_dir.mkdir(parents=True, exist_ok=True)
    masks_dir = output_dir / MASKS_DIR
    masks_dir.mkdir(exist_ok=True)

    records: list[dict] = []
    vectors: list[np.ndarray] = []
    used_ids: dict[str, int] = {}
    batch: list[DecodedImage] = []

    def flush() -> None:
        if not batch:
            return
        detections = adapters.pose.estimate(batch)
        masks = adapters.segmentation.segment(batch)
        qf = adapters.faceqnet.score(batch)
        qm = adapters.magface.score(batch)
        demos = adapters.demographics.classify(batch)
        embedded = np.asarray(adapters.embedding.embed(batch),
                              dtype=np.float64)
        if embedded.shape[0] != len(batch):
            raise BridgeError("embedding adapter returned wrong row count")
        norms = np.linalg.norm(embedded, axis=1)
        if np.any(norms < 1e-12):
            raise BridgeError("embedding adapter returned a zero vector")
        embedded /= norms[:, None]

        for i, image in enumerate(batch):
            classes = np.ascontiguousarray(masks[i], dtype=np.uint8)
            if classes.shape != image.rgb.shape[:2]:
                raise BridgeError("segmentation raster shape mismatch")
            gray = bt601_luma(image.rgb)
            face = np.isin(classes, FACE_CLASSES)
            skin = classes == CLASS_SKIN
            fsb = (float(gray[skin].astype(np.float64).mean())
                   if skin.any() else None)
            pose = pick_most_frontal(detections[i])
            demo = demos[i]

            mask_rel = f"{MASKS_DIR}/{image.image_id}.bamk"
            write_mask(output_dir / mask_rel, classes)
            write_gray(output_dir / f"{MASKS_DIR}/{image.image_id}.bagy",
                       gray)

            records.append({
                "image_id": image.image_id,
                "identity_id": image.identity_id,
                "pitch": pose.pitch,
                "yaw": pose.yaw,
                "roll": pose.roll,
                "q_faceqnet": qf[i],
                "q_magface": qm[i],
                "brightness_fsb": fsb,
                "face_area_ratio": float(face.mean()),
                "nose_present": bool(np.any(classes == CLASS_NOSE)),
                "facial_hair": bool(np.count_nonzero(
                    classes == CLASS_FACIAL_HAIR)
                    >= config.facial_hair_min_pixels),
                "race": demo.race,
                "gender": demo.gender,
                "age_group": fairface_age_to_group(demo.age_bucket),
                "embedding_index": len(records),
                "mask_path": mask_rel,
                "source_path": image.path,
            })
            vectors.append(embedded[i].astype(np.float32))
        batch.clear()

    for identity, path in entries:
        try:
            rgb = _decode(path, config.image_size)
        except (UnidentifiedImageError, OSError, ValueError) as exc:
            skips.append(SkipEntry(str(path), f"undecodable image: {exc}"))
            continue
        stem = f"{identity}__{path.stem}"
        count = used_ids.get(stem, 0)
        used_ids[stem] = count + 1
        image_id = stem if count == 0 else f"{stem}__{count + 1}"
        batch.append(DecodedImage(image_id, identity, str(path), rgb))
        if len(batch) >= config.batch_size:
            flush()
    flush()

    if vectors:
        matrix = np.vstack(vectors)
    else:
        matrix = np.zeros((0, config.embedding_dim), dtype=np.float32)
    write_embeddings(output_dir / EMBEDDINGS_NAME, matrix)

    # batch_size is operational: it must never change artifact bytes,
    # so it stays out of the embedded header.
    header = (f"extract input={config.input_dir} images={len(records)} "
              f"skipped={len(skips)} dim={config.embedding_dim} "
              f"image_size={config.image_size} version={__version__}")
    write_manifest(output_dir / MANIFEST_NAME, [header], records)

    skip_report = output_dir / SKIPS_NAME
    with open(skip_report, "w", encoding="utf-8") as fh:
        json.dump([{"path": s.path, "reason": s.reason} for s in skips],
                  fh, indent=2)
        fh.write("\n")

    return ExtractResult(
        n_records=len(records),
        skips=skips,
        manifest_path=output_dir / MANIFEST_NAME,
        embeddings_path=output_dir / EMBEDDINGS_NAME,
        masks_dir=masks_dir,
        skip_report_path=skip_report,
    )
