"""Seeded geometric and color augmentations for training tiles.

Geometry (flips, transpose, right-angle rotation, scale jitter plus crop) is
applied identically to image and mask. Color steps (brightness/contrast and
image-statistics color transfer against per-domain reference banks) touch the
image only. Every sub-augmentation fires independently with the configured
probability (default 70%).

All transforms are pure functions of (input, config, rng stream), so results
are reproducible and independent of worker scheduling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np

from .core import Dihedral, LabeledTile, apply_dihedral, save_image

STD_FLOOR = 1e-6


def derive_rng(seed: int, *stream) -> np.random.Generator:
    """Independent RNG stream for (seed, epoch, tile index, ...) tuples."""
    return np.random.default_rng([int(seed) & 0x7FFFFFFF, *[int(s) for s in stream]])


# --------------------------------------------------------------------------- #
# Domain reference statistics
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class DomainStats:
    domain_id: str
    mean: tuple[float, float, float]
    std: tuple[float, float, float]
    sample_count: int
    source: str = "internal"

    def __post_init__(self):
        if any(not (0.0 <= m <= 1.0) for m in self.mean):
            raise ValueError(f"mean components must lie in [0, 1], got {self.mean}")
        if any(s < 0.0 for s in self.std):
            raise ValueError(f"std components must be non-negative, got {self.std}")


@dataclass
class StatsBank:
    entries: list[DomainStats] = field(default_factory=list)

    def __post_init__(self):
        ids = [e.domain_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate domain_id in stats bank")

    def upsert(self, entry: DomainStats):
        self.entries = sorted(
            [e for e in self.entries if e.domain_id != entry.domain_id] + [entry],
            key=lambda e: e.domain_id)

    def save(self, path):
        doc = [{"domain_id": e.domain_id, "mean": list(e.mean), "std": list(e.std),
                "sample_count": e.sample_count, "source": e.source}
               for e in sorted(self.entries, key=lambda e: e.domain_id)]
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "StatsBank":
        doc = json.loads(Path(path).read_text())
        return cls(entries=[DomainStats(
            domain_id=d["domain_id"], mean=tuple(d["mean"]), std=tuple(d["std"]),
            sample_count=int(d["sample_count"]), source=d.get("source", "internal"))
            for d in doc])


def compute_reference_stats(images, domain_id: str, n: int = 2000, seed: int = 0,
                            source: str = "internal") -> DomainStats:
    """Per-channel mean and population standard deviation pooled over all
    pixels of up to ``n`` images sampled without replacement. ``images`` is a
    sequence of arrays or of paths (paths are loaded lazily)."""
    images = list(images)
    if not images:
        raise ValueError("no images to sample reference statistics from")
    rng = derive_rng(seed, 101)
    order = rng.permutation(len(images))[: min(n, len(images))]
    count = np.zeros(3, dtype=np.int64)
    total = np.zeros(3, dtype=np.float64)
    total_sq = np.zeros(3, dtype=np.float64)
    for idx in order:
        img = images[idx]
        if not isinstance(img, np.ndarray):
            from .core import load_image
            img = load_image(img)
        flat = img.reshape(-1, 3).astype(np.float64)
        count += flat.shape[0]
        total += flat.sum(axis=0)
        total_sq += (flat ** 2).sum(axis=0)
    mean = total / count
    var = np.maximum(total_sq / count - mean ** 2, 0.0)
    return DomainStats(domain_id=domain_id, mean=tuple(mean.tolist()),
                       std=tuple(np.sqrt(var).tolist()),
                       sample_count=int(len(order)), source=source)


# --------------------------------------------------------------------------- #
# Individual transforms
# --------------------------------------------------------------------------- #

@dataclass
class AugmentConfig:
    probability: float = 0.7
    enable_flip_h: bool = True
    enable_flip_v: bool = True
    enable_transpose: bool = True
    enable_rotation: bool = True
    enable_scale_crop: bool = True
    scale_delta: float = 0.10
    crop_size: int = 260
    # Baseline global variant is off by default; the channel-wise variant
    # replaces it in the final configuration.
    enable_bc_global: bool = False
    bc_range_global: float = 0.30
    enable_bc_channelwise: bool = True
    bc_range_channelwise: float = 0.20
    enable_stat_transfer: bool = True
    stats_bank: StatsBank | None = None

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError("probability must lie in [0, 1]")
        for r in (self.bc_range_global, self.bc_range_channelwise):
            if not 0.0 <= r < 1.0:
                raise ValueError("brightness/contrast range must lie in [0, 1)")


def random_geometric(tile: LabeledTile, rng: np.random.Generator,
                     config: AugmentConfig | None = None) -> LabeledTile:
    """Flips, transpose and a right-angle rotation, each applied independently
    with the configured probability; the mask follows the image exactly."""
    config = config or AugmentConfig()
    p = config.probability
    img, mask = tile.image, tile.mask
    steps = [(config.enable_flip_h, Dihedral.FLIP_H),
             (config.enable_flip_v, Dihedral.FLIP_V),
             (config.enable_transpose, Dihedral.TRANSPOSE)]
    for enabled, t in steps:
        if enabled and rng.random() < p:
            img = apply_dihedral(t, img)
            if mask is not None:
                mask = apply_dihedral(t, mask)
    if config.enable_rotation and rng.random() < p:
        t = (Dihedral.ROT90, Dihedral.ROT180, Dihedral.ROT270)[int(rng.integers(3))]
        img = apply_dihedral(t, img)
        if mask is not None:
            mask = apply_dihedral(t, mask)
    return replace(tile, image=img, mask=mask)


def random_scale_crop(tile: LabeledTile, rng: np.random.Generator,
                      scale_delta: float = 0.10, crop_size: int = 260,
                      probability: float = 0.7) -> LabeledTile:
    """Scale by a factor from 1 +- scale_delta (with the given probability,
    else 1.0), then crop to crop_size. The crop position is uniform; with
    probability 0 the whole step degrades to a deterministic center crop."""
    img, mask = tile.image, tile.mask
    factor = 1.0
    if probability > 0.0 and rng.random() < probability:
        factor = rng.uniform(1.0 - scale_delta, 1.0 + scale_delta)
    h = int(np.floor(img.shape[0] * factor + 0.5))
    w = int(np.floor(img.shape[1] * factor + 0.5))
    if h < crop_size or w < crop_size:
        raise ValueError(
            f"post-scale size {h}x{w} cannot contain a {crop_size} crop; "
            f"input tiles must be large enough for the minimum scale factor")
    if factor != 1.0:
        img = cv2.resize(img, (w, h), interpolation=cv2.INTER_LINEAR)
        if mask is not None:
            mask = cv2.resize(mask, (w, h), interpolation=cv2.INTER_NEAREST)
    if probability > 0.0:
        y0 = int(rng.integers(0, h - crop_size + 1))
        x0 = int(rng.integers(0, w - crop_size + 1))
    else:
        y0, x0 = (h - crop_size) // 2, (w - crop_size) // 2
    img = img[y0:y0 + crop_size, x0:x0 + crop_size].copy()
    if mask is not None:
        mask = mask[y0:y0 + crop_size, x0:x0 + crop_size].copy()
    return replace(tile, image=img, mask=mask)


def brightness_contrast(img: np.ndarray, range_r: float, channel_wise: bool,
                        rng: np.random.Generator, probability: float = 0.7) -> np.ndarray:
    """out = clip((x - 0.5) * (1 + gamma) + 0.5 + beta) with gamma, beta drawn
    uniformly from +-range_r; independent draws (and independent probability
    gates) per channel in channel-wise mode."""
    if not 0.0 <= range_r < 1.0:
        raise ValueError("range_r must lie in [0, 1)")
    out = img.astype(np.float32, copy=True)
    scopes = range(3) if channel_wise else [slice(None)]
    for c in scopes:
        if rng.random() >= probability:
            continue
        gamma = rng.uniform(-range_r, range_r)
        beta = rng.uniform(-range_r, range_r)
        sel = (..., c) if channel_wise else slice(None)
        out[sel] = (out[sel] - 0.5) * (1.0 + gamma) + 0.5 + beta
    return np.clip(out, 0.0, 1.0)


def stat_color_transfer(img: np.ndarray, ref: DomainStats) -> np.ndarray:
    """Shift each channel to the reference mean and rescale to the reference
    standard deviation; statistics of the input are taken from the tile
    itself. Output is clipped to [0, 1]."""
    flat = img.reshape(-1, 3).astype(np.float64)
    mean = flat.mean(axis=0)
    std = np.maximum(flat.std(axis=0), STD_FLOOR)
    out = (img.astype(np.float64) - mean) / std * np.asarray(ref.std) + np.asarray(ref.mean)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# --------------------------------------------------------------------------- #
# Pipeline
# --------------------------------------------------------------------------- #

def augment_pipeline(tile: LabeledTile, config: AugmentConfig,
                     rng: np.random.Generator) -> LabeledTile:
    """Geometry, then scale+crop, then color. Masks are never touched by the
    color steps; the output tile is crop_size x crop_size."""
    tile = random_geometric(tile, rng, config)
    if config.enable_scale_crop:
        tile = random_scale_crop(tile, rng, config.scale_delta, config.crop_size,
                                 config.probability)
    img = tile.image
    if config.enable_bc_global:
        img = brightness_contrast(img, config.bc_range_global, False, rng,
                                  config.probability)
    if config.enable_bc_channelwise:
        img = brightness_contrast(img, config.bc_range_channelwise, True, rng,
                                  config.probability)
    if config.enable_stat_transfer and config.stats_bank and config.stats_bank.entries:
        if rng.random() < config.probability:
            ref = config.stats_bank.entries[int(rng.integers(len(config.stats_bank.entries)))]
            img = stat_color_transfer(img, ref)
    return replace(tile, image=img)


def preview_grid(tiles: list[LabeledTile], config: AugmentConfig,
                 rng: np.random.Generator, out_path) -> np.ndarray:
    """Write a comparison grid: one row per tile, first column the original,
    then one color-augmented variant per bank reference (color steps forced)."""
    if not tiles:
        raise ValueError("at least one tile is required")
    refs = config.stats_bank.entries if config.stats_bank else []
    gutter = 2
    th, tw = tiles[0].image.shape[:2]
    rows, cols = len(tiles), 1 + len(refs)
    canvas = np.ones((rows * th + (rows - 1) * gutter,
                      cols * tw + (cols - 1) * gutter, 3), dtype=np.float32)
    for r, tile in enumerate(tiles):
        cells = [tile.image]
        for ref in refs:
            img = tile.image
            if config.enable_bc_global:
                img = brightness_contrast(img, config.bc_range_global, False, rng,
                                          probability=1.0)
            if config.enable_bc_channelwise:
                img = brightness_contrast(img, config.bc_range_channelwise, True, rng,
                                          probability=1.0)
            cells.append(stat_color_transfer(img, ref))
        for c, cell in enumerate(cells):
            y0, x0 = r * (th + gutter), c * (tw + gutter)
            canvas[y0:y0 + th, x0:x0 + tw] = cell
    save_image(out_path, canvas)
    return canvas
