"""Data preparation: magnification homogenization, tile extraction with the
tissue/annotation filters, slide-disjoint stratified splits, manifest I/O and
a synthetic pseudo-histology fixture generator for desk-scale verification.

All source imagery is rescaled to a common target magnification (default 5x)
before 300x300 tiles are cut. Segmentation sources are tiled with 50% overlap
and kept when at least 1% of their pixels are annotated; weakly labeled slides
are tiled without overlap and kept when at least 50% of their pixels look like
tissue.
"""

from __future__ import annotations

import json
import logging
import multiprocessing
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .core import (
    IGNORE_INDEX,
    ClassTaxonomy,
    LabeledTile,
    TileProvenance,
    load_image,
    load_mask,
    save_image,
    save_mask,
    tile_anchors,
)

log = logging.getLogger(__name__)

TARGET_MAGNIFICATION = 5.0
TILE_SIZE = 300
SEG_OVERLAP = 0.5
MIN_ANNOTATED_FRACTION = 0.01
MIN_TISSUE_FRACTION = 0.5

# Background detector: near-white, low-chroma pixels. Both thresholds are
# overridable; the defaults are a reproducible proxy for "tissue".
BACKGROUND_BRIGHTNESS = 0.86
BACKGROUND_CHROMA = 0.04


class UpscaleError(ValueError):
    """Raised when a rescale would need to upsample (native below target)."""


@dataclass(frozen=True)
class SlideRecord:
    slide_id: str
    image_path: str
    mask_path: str | None
    native_magnification: float
    tumor_label: bool | None
    domain_id: str

    def __post_init__(self):
        if self.native_magnification <= 0:
            raise ValueError("native_magnification must be positive")

    @property
    def annotation_kind(self) -> str:
        return "segmentation" if self.mask_path else "weak"


@dataclass
class ManifestEntry:
    tile_path: str
    mask_path: str | None
    slide_id: str
    x: int
    y: int
    domain_id: str
    annotation_kind: str  # "segmentation" | "weak"
    tumor_label: bool | None
    split: str  # "train" | "val"


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    seed: int
    taxonomy_path: str

    def split_entries(self, split: str, kind: str | None = None) -> list[ManifestEntry]:
        return [e for e in self.entries
                if e.split == split and (kind is None or e.annotation_kind == kind)]

    def slide_ids(self, split: str) -> set[str]:
        return {e.slide_id for e in self.entries if e.split == split}


# --------------------------------------------------------------------------- #
# Rescaling and filters
# --------------------------------------------------------------------------- #

def _scaled_size(width: int, height: int, factor: float) -> tuple[int, int]:
    return (int(np.floor(width * factor + 0.5)), int(np.floor(height * factor + 0.5)))


def rescale_to_target_magnification(img: np.ndarray, native_mag: float,
                                    target_mag: float = TARGET_MAGNIFICATION) -> np.ndarray:
    """Downscale an image from its native magnification to the target one
    using area averaging. Refuses to upscale."""
    if native_mag < target_mag:
        raise UpscaleError(
            f"native magnification {native_mag} is below target {target_mag}; refusing to upscale")
    if native_mag == target_mag:
        return img
    factor = target_mag / native_mag
    w, h = _scaled_size(img.shape[1], img.shape[0], factor)
    return cv2.resize(img, (w, h), interpolation=cv2.INTER_AREA)


def rescale_mask_to_target_magnification(mask: np.ndarray, native_mag: float,
                                         target_mag: float = TARGET_MAGNIFICATION) -> np.ndarray:
    """Nearest-neighbor rescale so class indices survive exactly."""
    if native_mag < target_mag:
        raise UpscaleError(
            f"native magnification {native_mag} is below target {target_mag}; refusing to upscale")
    if native_mag == target_mag:
        return mask
    factor = target_mag / native_mag
    w, h = _scaled_size(mask.shape[1], mask.shape[0], factor)
    return cv2.resize(mask, (w, h), interpolation=cv2.INTER_NEAREST)


def load_mask_at_target(path, native_mag: float,
                        target_mag: float = TARGET_MAGNIFICATION) -> np.ndarray:
    return rescale_mask_to_target_magnification(load_mask(path), native_mag, target_mag)


def tissue_fraction(img: np.ndarray, brightness_threshold: float = BACKGROUND_BRIGHTNESS,
                    chroma_threshold: float = BACKGROUND_CHROMA) -> float:
    """Fraction of pixels that are not near-white low-chroma background."""
    brightness = img.mean(axis=2)
    chroma = img.max(axis=2) - img.min(axis=2)
    background = (brightness > brightness_threshold) & (chroma < chroma_threshold)
    return float(1.0 - background.mean())


def annotated_fraction(mask: np.ndarray, ignore_index: int = IGNORE_INDEX) -> float:
    return float((mask != ignore_index).mean())


def derive_tile_tumor_label(mask: np.ndarray, taxonomy: ClassTaxonomy) -> bool | None:
    """True when any tumor-class pixel is annotated, False when annotated but
    tumor-free, None when the mask is entirely unannotated."""
    annotated = mask != taxonomy.ignore_index
    if not annotated.any():
        return None
    return bool((mask[annotated] == taxonomy.index_of("tumor")).any())


# --------------------------------------------------------------------------- #
# Tiling
# --------------------------------------------------------------------------- #

def _cut_tiles(height: int, width: int, tile_size: int, stride: int):
    ys = tile_anchors(height, tile_size, stride)
    xs = tile_anchors(width, tile_size, stride)
    if not ys or not xs:
        warnings.warn(
            f"source {height}x{width} is smaller than the tile size {tile_size}; no tiles")
    return [(y, x) for y in ys for x in xs]


def tile_segmentation_patch(img: np.ndarray, mask: np.ndarray, taxonomy: ClassTaxonomy,
                            slide_id: str = "", domain_id: str = "",
                            source_magnification: float = TARGET_MAGNIFICATION,
                            tile_size: int = TILE_SIZE, overlap: float = SEG_OVERLAP,
                            min_annotated: float = MIN_ANNOTATED_FRACTION) -> list[LabeledTile]:
    """Overlapping tiles from an annotated patch; keeps tiles with at least
    ``min_annotated`` labeled pixels and derives their tumor label."""
    if img.shape[:2] != mask.shape:
        raise ValueError("image and mask dimensions differ")
    stride = max(1, int(round(tile_size * (1.0 - overlap))))
    tiles = []
    for y, x in _cut_tiles(img.shape[0], img.shape[1], tile_size, stride):
        sub_mask = mask[y:y + tile_size, x:x + tile_size]
        if annotated_fraction(sub_mask, taxonomy.ignore_index) < min_annotated:
            continue
        tiles.append(LabeledTile(
            image=img[y:y + tile_size, x:x + tile_size].copy(),
            mask=sub_mask.copy(),
            tumor_label=derive_tile_tumor_label(sub_mask, taxonomy),
            domain_id=domain_id,
            provenance=TileProvenance(slide_id, x, y, source_magnification),
        ))
    return tiles


def tile_weak_slide(img: np.ndarray, slide_id: str = "", domain_id: str = "",
                    source_magnification: float = TARGET_MAGNIFICATION,
                    tile_size: int = TILE_SIZE,
                    min_tissue: float = MIN_TISSUE_FRACTION) -> list[LabeledTile]:
    """Non-overlapping tiles from a weakly labeled slide; keeps tiles with at
    least ``min_tissue`` tissue. The tumor label is assigned later from the
    slide label."""
    tiles = []
    for y, x in _cut_tiles(img.shape[0], img.shape[1], tile_size, tile_size):
        sub = img[y:y + tile_size, x:x + tile_size]
        if tissue_fraction(sub) < min_tissue:
            continue
        tiles.append(LabeledTile(
            image=sub.copy(),
            mask=None,
            tumor_label=None,
            domain_id=domain_id,
            provenance=TileProvenance(slide_id, x, y, source_magnification),
        ))
    return tiles


# --------------------------------------------------------------------------- #
# Stratified slide-level split
# --------------------------------------------------------------------------- #

def stratified_slide_split(slides: list[SlideRecord], train_fraction: float = 0.8,
                           seed: int = 0) -> dict[str, str]:
    """Assign each slide to train or val, stratified by (domain, annotation
    kind), with the train share per stratum as close to ``train_fraction`` as
    integer counts allow. Deterministic given the seed; slide-disjoint by
    construction."""
    if not slides:
        raise ValueError("no slides to split")
    if len({s.slide_id for s in slides}) != len(slides):
        raise ValueError("slide_ids must be unique")
    rng = np.random.default_rng(seed)
    assignment: dict[str, str] = {}
    strata: dict[tuple[str, str], list[SlideRecord]] = {}
    for s in slides:
        strata.setdefault((s.domain_id, s.annotation_kind), []).append(s)
    for key in sorted(strata):
        members = sorted(strata[key], key=lambda s: s.slide_id)
        order = rng.permutation(len(members))
        n_train = int(np.floor(len(members) * train_fraction + 0.5))
        for rank, idx in enumerate(order):
            assignment[members[idx].slide_id] = "train" if rank < n_train else "val"
    return assignment


# --------------------------------------------------------------------------- #
# Slide index and manifest files (JSON lines)
# --------------------------------------------------------------------------- #

def save_slide_index(path, slides: list[SlideRecord]):
    with open(path, "w") as fh:
        for s in sorted(slides, key=lambda s: s.slide_id):
            fh.write(json.dumps({
                "slide_id": s.slide_id,
                "image_path": s.image_path,
                "mask_path": s.mask_path,
                "native_magnification": s.native_magnification,
                "tumor_label": s.tumor_label,
                "domain_id": s.domain_id,
            }, sort_keys=True) + "\n")


def load_slide_index(path) -> list[SlideRecord]:
    slides = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        doc = json.loads(line)
        slides.append(SlideRecord(
            slide_id=doc["slide_id"],
            image_path=doc["image_path"],
            mask_path=doc.get("mask_path"),
            native_magnification=float(doc["native_magnification"]),
            tumor_label=doc.get("tumor_label"),
            domain_id=doc.get("domain_id", ""),
        ))
    return slides


def save_manifest(path, manifest: DatasetManifest):
    with open(path, "w") as fh:
        fh.write(json.dumps({"type": "meta", "seed": manifest.seed,
                             "taxonomy": manifest.taxonomy_path}, sort_keys=True) + "\n")
        for e in manifest.entries:
            fh.write(json.dumps({
                "tile_path": e.tile_path, "mask_path": e.mask_path,
                "slide_id": e.slide_id, "x": e.x, "y": e.y,
                "domain_id": e.domain_id, "annotation_kind": e.annotation_kind,
                "tumor_label": e.tumor_label, "split": e.split,
            }, sort_keys=True) + "\n")


def load_manifest(path) -> DatasetManifest:
    seed, taxonomy_path = 0, ""
    entries = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        doc = json.loads(line)
        if doc.get("type") == "meta":
            seed = doc.get("seed", 0)
            taxonomy_path = doc.get("taxonomy", "")
            continue
        entries.append(ManifestEntry(
            tile_path=doc["tile_path"], mask_path=doc.get("mask_path"),
            slide_id=doc["slide_id"], x=int(doc["x"]), y=int(doc["y"]),
            domain_id=doc.get("domain_id", ""),
            annotation_kind=doc["annotation_kind"],
            tumor_label=doc.get("tumor_label"), split=doc["split"],
        ))
    return DatasetManifest(entries=entries, seed=seed, taxonomy_path=taxonomy_path)


# --------------------------------------------------------------------------- #
# Tile extraction for whole slide sets
# --------------------------------------------------------------------------- #

def _extract_slide_tiles(args):
    """Worker: rescale one slide to the target magnification and cut tiles.
    Returns (slide_id, annotation kind, kept tiles, candidate count)."""
    slide, taxonomy, data_root, target_mag = args
    root = Path(data_root)
    img = load_image(root / slide.image_path)
    img = rescale_to_target_magnification(img, slide.native_magnification, target_mag)
    if slide.mask_path:
        mask = load_mask(root / slide.mask_path)
        mask = rescale_mask_to_target_magnification(mask, slide.native_magnification, target_mag)
        if mask.shape != img.shape[:2]:
            raise ValueError(f"slide {slide.slide_id}: mask/image size mismatch after rescale")
        stride = max(1, int(round(TILE_SIZE * (1.0 - SEG_OVERLAP))))
        candidates = len(_cut_tiles(img.shape[0], img.shape[1], TILE_SIZE, stride))
        tiles = tile_segmentation_patch(
            img, mask, taxonomy, slide_id=slide.slide_id, domain_id=slide.domain_id,
            source_magnification=slide.native_magnification)
    else:
        candidates = len(_cut_tiles(img.shape[0], img.shape[1], TILE_SIZE, TILE_SIZE))
        tiles = tile_weak_slide(
            img, slide_id=slide.slide_id, domain_id=slide.domain_id,
            source_magnification=slide.native_magnification)
        tiles = [replace_label(t, slide.tumor_label) for t in tiles]
    return slide.slide_id, slide.annotation_kind, tiles, candidates


def replace_label(tile: LabeledTile, label: bool | None) -> LabeledTile:
    return LabeledTile(image=tile.image, mask=tile.mask, tumor_label=label,
                       domain_id=tile.domain_id, provenance=tile.provenance)


def prepare_dataset(slides: list[SlideRecord], taxonomy: ClassTaxonomy, data_root,
                    out_dir, seed: int = 0, train_fraction: float = 0.8,
                    target_mag: float = TARGET_MAGNIFICATION, workers: int = 1,
                    taxonomy_path: str = "taxonomy.yaml") -> tuple[DatasetManifest, dict]:
    """Full preparation pass: rescale, tile, filter, split and write tiles plus
    the manifest under ``out_dir``. Output ordering is canonical (slide_id,
    then y, then x) regardless of worker scheduling."""
    out = Path(out_dir)
    (out / "tiles").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    assignment = stratified_slide_split(slides, train_fraction, seed)

    jobs = [(s, taxonomy, str(data_root), target_mag)
            for s in sorted(slides, key=lambda s: s.slide_id)]
    if workers > 1:
        # Spawned workers: forking a process that already initialized torch or
        # an OpenMP runtime can deadlock.
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            results = list(pool.map(_extract_slide_tiles, jobs))
    else:
        results = [_extract_slide_tiles(job) for job in jobs]

    entries = []
    kept = {"segmentation": 0, "weak": 0}
    candidates_total = 0
    for slide_id, kind, tiles, candidates in sorted(results, key=lambda r: r[0]):
        candidates_total += candidates
        for tile in sorted(tiles, key=lambda t: (t.provenance.y, t.provenance.x)):
            p = tile.provenance
            stem = f"{slide_id}_y{p.y:06d}_x{p.x:06d}.png"
            save_image(out / "tiles" / stem, tile.image)
            mask_rel = None
            if tile.mask is not None:
                save_mask(out / "masks" / stem, tile.mask)
                mask_rel = f"masks/{stem}"
            entries.append(ManifestEntry(
                tile_path=f"tiles/{stem}", mask_path=mask_rel, slide_id=slide_id,
                x=p.x, y=p.y, domain_id=tile.domain_id, annotation_kind=kind,
                tumor_label=tile.tumor_label, split=assignment[slide_id]))
            kept[kind] += 1
    manifest = DatasetManifest(entries=entries, seed=seed, taxonomy_path=taxonomy_path)
    save_manifest(out / "manifest.jsonl", manifest)
    stats = {"kept_segmentation": kept["segmentation"], "kept_weak": kept["weak"],
             "dropped": candidates_total - kept["segmentation"] - kept["weak"]}
    log.info("kept %d segmentation and %d weak tiles (%d dropped by filters)",
             stats["kept_segmentation"], stats["kept_weak"], stats["dropped"])
    return manifest, stats


# --------------------------------------------------------------------------- #
# Synthetic pseudo-histology fixtures
# --------------------------------------------------------------------------- #

@dataclass
class SyntheticSpec:
    """Counts and sizes for the deterministic synthetic dataset."""

    n_segmentation_slides: int = 4
    n_weak_slides: int = 6
    n_positive: int = 5
    n_test_slides: int = 4          # held-out weak-style slides for detection eval
    seg_size: int = 900             # pixels at seg_magnification
    weak_size: int = 2400           # pixels at weak_magnification
    seg_magnification: float = 10.0
    weak_magnification: float = 20.0
    domains: tuple[str, ...] = ("scanner_a", "scanner_b")
    ellipses_per_slide: tuple[int, int] = (10, 16)
    ignore_rect_probability: float = 0.5
    noise_sigma: float = 0.02
    seed: int = 0


def _draw_ellipse(mask: np.ndarray, cy: float, cx: float, ry: float, rx: float, value: int):
    h, w = mask.shape
    yy, xx = np.ogrid[:h, :w]
    inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    mask[inside] = value


def _render_slide(rng: np.random.Generator, size: int, taxonomy: ClassTaxonomy,
                  positive: bool, n_ellipses: int, noise_sigma: float,
                  tint: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """White canvas with colored tissue ellipses; the mask records the drawn
    class per pixel. Negative slides never contain score-numerator classes so
    detection labels stay clean at desk scale."""
    numerator = set(taxonomy.numerator_indices())
    candidates = [c.index for c in taxonomy.classes if c.index != taxonomy.background_index]
    if not positive:
        candidates = [c for c in candidates if c not in numerator]
    mask = np.full((size, size), taxonomy.background_index, dtype=np.uint8)
    for k in range(n_ellipses):
        if positive and k == 0:
            cls = taxonomy.index_of("tumor")
        else:
            cls = int(rng.choice(candidates))
        cy, cx = rng.uniform(0.1, 0.9, 2) * size
        ry, rx = rng.uniform(0.12, 0.30, 2) * size
        _draw_ellipse(mask, cy, cx, ry, rx, cls)
    palette = taxonomy.palette().astype(np.float32) / 255.0
    img = palette[mask] + tint
    img += rng.normal(0.0, noise_sigma, img.shape).astype(np.float32)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return img, mask


def generate_synthetic_dataset(spec: SyntheticSpec, taxonomy: ClassTaxonomy,
                               out_dir) -> tuple[list[SlideRecord], list[SlideRecord]]:
    """Write a deterministic synthetic dataset under ``out_dir``: training
    slides (slides.jsonl) and held-out test slides (test_slides.jsonl).
    Returns (training slides, test slides)."""
    out = Path(out_dir)
    (out / "slides").mkdir(parents=True, exist_ok=True)
    (out / "slide_masks").mkdir(parents=True, exist_ok=True)

    total = spec.n_segmentation_slides + spec.n_weak_slides
    if spec.n_positive > total:
        raise ValueError("more positives requested than slides")
    pos_seg = int(np.floor(spec.n_positive * spec.n_segmentation_slides / max(total, 1) + 0.5))
    pos_seg = min(pos_seg, spec.n_segmentation_slides)
    pos_weak = min(spec.n_positive - pos_seg, spec.n_weak_slides)

    # Domain tints give each scanner its own color statistics.
    tints = {d: np.array([0.0, 0.0, 0.0], dtype=np.float32) for d in spec.domains}
    for i, d in enumerate(spec.domains):
        tints[d] = np.array([0.015 * i, -0.01 * i, 0.03 * i], dtype=np.float32)

    slides: list[SlideRecord] = []

    stream_ids = {"seg": 1, "weak": 2, "test": 3}

    def emit(idx: int, kind: str, positive: bool, size: int, mag: float,
             domain: str, collection: list[SlideRecord], prefix: str):
        slide_id = f"{prefix}{idx:03d}"
        rng = np.random.default_rng([spec.seed, stream_ids[prefix], idx])
        n_ell = int(rng.integers(spec.ellipses_per_slide[0], spec.ellipses_per_slide[1] + 1))
        img, mask = _render_slide(rng, size, taxonomy, positive, n_ell,
                                  spec.noise_sigma, tints[domain])
        img_rel = f"slides/{slide_id}.png"
        save_image(out / img_rel, img)
        mask_rel = None
        if kind == "segmentation":
            if rng.random() < spec.ignore_rect_probability:
                # Carve an unannotated corner so the ignore path is exercised.
                hh, ww = mask.shape[0] // 3, mask.shape[1] // 3
                mask[:hh, :ww] = taxonomy.ignore_index
            mask_rel = f"slide_masks/{slide_id}.png"
            save_mask(out / mask_rel, mask)
        collection.append(SlideRecord(
            slide_id=slide_id, image_path=img_rel, mask_path=mask_rel,
            native_magnification=mag, tumor_label=positive, domain_id=domain))

    # Segmentation slides stay in one domain so the 80:20 split keeps at
    # least one of them in validation at desk scale.
    for i in range(spec.n_segmentation_slides):
        emit(i, "segmentation", i < pos_seg, spec.seg_size, spec.seg_magnification,
             spec.domains[0], slides, "seg")
    for i in range(spec.n_weak_slides):
        domain = spec.domains[i % len(spec.domains)]
        emit(i, "weak", i < pos_weak, spec.weak_size, spec.weak_magnification,
             domain, slides, "weak")

    test_slides: list[SlideRecord] = []
    n_test_pos = (spec.n_test_slides + 1) // 2
    for i in range(spec.n_test_slides):
        domain = spec.domains[i % len(spec.domains)]
        emit(i, "weak", i < n_test_pos, spec.weak_size, spec.weak_magnification,
             domain, test_slides, "test")

    save_slide_index(out / "slides.jsonl", slides)
    save_slide_index(out / "test_slides.jsonl", test_slides)
    taxonomy.save(out / "taxonomy.yaml")
    return slides, test_slides
