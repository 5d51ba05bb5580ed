"""Whole-image inference: rescale to the working magnification, reflect-pad so
the prediction map matches the input size exactly, tile, predict (optionally
with 8-fold dihedral test-time augmentation), stitch, count class pixels and
compute the pixel-count tumor detection score.

Output tiles are laid out without overlap (stride = model output size); the
padding on the right/bottom absorbs the grid alignment remainder and is
cropped away after stitching.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .core import (
    DIHEDRAL_ELEMENTS,
    ClassTaxonomy,
    TileGrid,
    apply_dihedral,
    dihedral_inverse,
    to_uint8,
    validate_image,
)
from .dataprep import TARGET_MAGNIFICATION, rescale_to_target_magnification
from .model import GeometryReport, MultiTaskUNet, output_geometry


@dataclass
class InferenceConfig:
    input_tile: int = 260
    tta: bool = False
    batch_size: int = 8
    target_magnification: float = TARGET_MAGNIFICATION


@dataclass
class WsiPrediction:
    """Stitched class map (same size as the rescaled input), per-class pixel
    counts, the tumor detection score, and mean softmax per class."""

    class_map: np.ndarray
    class_counts: dict[str, int]
    tumor_score: float
    probability_mean: dict[str, float]


def pad_reflect(img: np.ndarray, left: int, top: int, right: int, bottom: int) -> np.ndarray:
    """Mirror padding that does not duplicate the edge pixel (reflect-101):
    a row [1, 2, 3] padded by one on each side becomes [2, 1, 2, 3, 2]."""
    h, w = img.shape[:2]
    if min(left, top, right, bottom) < 0:
        raise ValueError("margins must be non-negative")
    if left >= w or right >= w or top >= h or bottom >= h:
        raise ValueError(
            f"margins ({left},{top},{right},{bottom}) must stay below the "
            f"image dimensions {h}x{w} for single reflection")
    pad = [(top, bottom), (left, right)] + [(0, 0)] * (img.ndim - 2)
    return np.pad(img, pad, mode="reflect")


def plan_tile_grid(wsi_size: tuple[int, int], geometry: GeometryReport
                   ) -> tuple[tuple[int, int, int, int], TileGrid]:
    """Padding (left, top, right, bottom) and the input-tile grid over the
    padded image such that output tiles cover the input without overlap."""
    h, w = wsi_size
    out = geometry.output_size
    margin = geometry.margin
    cols = -(-w // out)  # ceil
    rows = -(-h // out)
    extra_w = cols * out - w
    extra_h = rows * out - h
    paddings = (margin, margin, margin + extra_w, margin + extra_h)
    left, top, right, bottom = paddings
    if left >= w or right >= w or top >= h or bottom >= h:
        raise ValueError(
            f"image {h}x{w} is too small for reflect padding "
            f"({left},{top},{right},{bottom}); use a model/tile geometry with "
            f"a smaller margin or output size")
    grid = TileGrid(origin=(0, 0), stride=out, tile_size=geometry.input_size,
                    rows=rows, cols=cols)
    return paddings, grid


class ModelPredictor:
    """Softmax tile predictor backed by the trained network. ``predict_soft``
    maps a (B, h, w, 3) image batch to (B, out, out, C) class probabilities."""

    def __init__(self, model: MultiTaskUNet, input_tile: int | None = None):
        self.model = model.eval()
        size = input_tile or model.config.input_size
        self.geometry = output_geometry(model.config, size)

    def predict_soft(self, batch: np.ndarray) -> np.ndarray:
        x = torch.from_numpy(np.ascontiguousarray(batch.transpose(0, 3, 1, 2))).float()
        with torch.no_grad():
            out = self.model(x)
            soft = torch.softmax(out.seg_logits, dim=1)
        return soft.permute(0, 2, 3, 1).contiguous().numpy()


def tta_predict(predictor, tile: np.ndarray) -> np.ndarray:
    """Mean softmax over all 8 dihedral variants of a square tile, each
    mapped back through the inverse transform."""
    if tile.shape[0] != tile.shape[1]:
        raise ValueError("test-time augmentation needs a square tile")
    batch = np.stack([apply_dihedral(t, tile) for t in DIHEDRAL_ELEMENTS])
    maps = predictor.predict_soft(batch)
    acc = np.zeros(maps.shape[1:], dtype=np.float64)
    for t, m in zip(DIHEDRAL_ELEMENTS, maps):
        acc += apply_dihedral(dihedral_inverse(t), m.astype(np.float64))
    return (acc / len(DIHEDRAL_ELEMENTS)).astype(np.float32)


def tumor_score(class_counts, taxonomy: ClassTaxonomy) -> float:
    """Pixel-count score: numerator classes over numerator plus the extra
    denominator classes; 0 when none of those pixels exist."""
    if isinstance(class_counts, dict):
        get = lambda name: class_counts.get(name, 0)
    else:
        counts = np.asarray(class_counts)
        get = lambda name: counts[taxonomy.index_of(name)]
    values = {name: get(name) for name in
              taxonomy.score_numerator | taxonomy.score_denominator_extra}
    if any(v < 0 for v in values.values()):
        raise ValueError("class counts must be non-negative")
    numerator = sum(values[n] for n in taxonomy.score_numerator)
    denominator = numerator + sum(values[n] for n in taxonomy.score_denominator_extra)
    if denominator == 0:
        return 0.0
    return float(numerator / denominator)


def predict_wsi(predictor, image: np.ndarray, native_mag: float,
                taxonomy: ClassTaxonomy, config: InferenceConfig | None = None
                ) -> WsiPrediction:
    """Rescale, pad, tile, predict, stitch and score one image. The result is
    independent of tile processing order; the class map matches the rescaled
    input size exactly."""
    config = config or InferenceConfig()
    validate_image(image)
    img = rescale_to_target_magnification(image, native_mag, config.target_magnification)
    h, w = img.shape[:2]
    geometry = predictor.geometry
    paddings, grid = plan_tile_grid((h, w), geometry)
    left, top, right, bottom = paddings
    padded = pad_reflect(img, left, top, right, bottom)

    out = geometry.output_size
    tile_in = geometry.input_size
    stitched = np.zeros((grid.rows * out, grid.cols * out), dtype=np.uint8)
    prob_sum = np.zeros(taxonomy.num_classes, dtype=np.float64)

    anchors = [(r, c) for r in range(grid.rows) for c in range(grid.cols)]

    def handle(r: int, c: int, soft: np.ndarray):
        y0, x0 = r * out, c * out
        stitched[y0:y0 + out, x0:x0 + out] = np.argmax(soft, axis=-1).astype(np.uint8)
        # Accumulate the probability summary over the valid (uncropped) region.
        vy = min(out, h - y0)
        vx = min(out, w - x0)
        if vy > 0 and vx > 0:
            prob_sum[:] += soft[:vy, :vx].reshape(-1, taxonomy.num_classes).sum(axis=0)

    if config.tta:
        for r, c in anchors:
            tile = padded[r * out:r * out + tile_in, c * out:c * out + tile_in]
            handle(r, c, tta_predict(predictor, tile))
    else:
        for start in range(0, len(anchors), config.batch_size):
            chunk = anchors[start:start + config.batch_size]
            batch = np.stack([
                padded[r * out:r * out + tile_in, c * out:c * out + tile_in]
                for r, c in chunk])
            maps = predictor.predict_soft(batch)
            for (r, c), soft in zip(chunk, maps):
                handle(r, c, soft)

    class_map = stitched[:h, :w]
    counts = np.bincount(class_map.ravel(), minlength=taxonomy.num_classes)
    count_by_name = {taxonomy.name_of(i): int(counts[i]) for i in range(taxonomy.num_classes)}
    prob_mean = {taxonomy.name_of(i): float(prob_sum[i] / (h * w))
                 for i in range(taxonomy.num_classes)}
    return WsiPrediction(
        class_map=class_map,
        class_counts=count_by_name,
        tumor_score=tumor_score(count_by_name, taxonomy),
        probability_mean=prob_mean,
    )


# --------------------------------------------------------------------------- #
# Per-slide outputs
# --------------------------------------------------------------------------- #

def save_class_map(path, class_map: np.ndarray, taxonomy: ClassTaxonomy):
    """Indexed PNG with the taxonomy colors as its palette."""
    im = Image.fromarray(class_map.astype(np.uint8), mode="P")
    im.putpalette(taxonomy.palette().ravel().tolist())
    im.save(path)


def load_class_map(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im).copy()


def save_overlay(path, image_5x: np.ndarray, class_map: np.ndarray,
                 taxonomy: ClassTaxonomy, alpha: float = 0.5):
    colors = taxonomy.palette().astype(np.float32)[class_map] / 255.0
    blend = np.clip((1 - alpha) * image_5x + alpha * colors, 0.0, 1.0)
    Image.fromarray(to_uint8(blend)).save(path)


def save_prediction_json(path, slide_id: str, pred: WsiPrediction):
    doc = {
        "slide_id": slide_id,
        "counts": pred.class_counts,
        "tumor_score": pred.tumor_score,
        "probability_mean": pred.probability_mean,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_prediction_json(path) -> dict:
    return json.loads(Path(path).read_text())
