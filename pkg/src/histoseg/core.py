"""Shared domain vocabulary: tissue class taxonomy, raster/mask containers,
the 8-element dihedral symmetry group and tile-grid geometry.

Images are float32 arrays of shape (H, W, 3) with values in [0, 1]; 8-bit
files are divided by 255 on load and rescaled back on save. Masks are uint8
arrays of shape (H, W) holding class indices, with 255 reserved for
unannotated (ignored) pixels.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

IGNORE_INDEX = 255

# Class names that must exist in every taxonomy: they define the tumor
# detection score (numerator / extra denominator classes).
SCORE_NUMERATOR_CLASSES = ("tumor", "tumor_stroma", "ulcus_necrosis")
SCORE_DENOMINATOR_EXTRA_CLASSES = ("benign_mucosa", "submucosa")


@dataclass(frozen=True)
class TissueClass:
    name: str
    index: int
    color: tuple[int, int, int]


@dataclass(frozen=True)
class ClassTaxonomy:
    """Ordered tissue-class vocabulary with score-role tags.

    Indices are contiguous from 0; ``ignore_index`` lies outside that range.
    ``score_numerator`` and ``score_denominator_extra`` name the classes that
    enter the tumor detection score.
    """

    classes: tuple[TissueClass, ...]
    ignore_index: int = IGNORE_INDEX
    background_index: int = 0
    score_numerator: frozenset[str] = frozenset(SCORE_NUMERATOR_CLASSES)
    score_denominator_extra: frozenset[str] = frozenset(SCORE_DENOMINATOR_EXTRA_CLASSES)

    def __post_init__(self):
        indices = [c.index for c in self.classes]
        if sorted(indices) != list(range(len(self.classes))):
            raise ValueError(f"class indices must be contiguous from 0, got {sorted(indices)}")
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise ValueError("class names must be unique")
        if 0 <= self.ignore_index < len(self.classes):
            raise ValueError(f"ignore_index {self.ignore_index} collides with a class index")
        if self.background_index not in indices:
            raise ValueError(f"background_index {self.background_index} is not a class index")
        for required in SCORE_NUMERATOR_CLASSES + SCORE_DENOMINATOR_EXTRA_CLASSES:
            if required not in names:
                raise ValueError(f"taxonomy is missing required class {required!r}")
        if self.score_numerator & self.score_denominator_extra:
            raise ValueError("score numerator and denominator-extra classes must be disjoint")
        for name in self.score_numerator | self.score_denominator_extra:
            if name not in names:
                raise ValueError(f"score class {name!r} is not in the taxonomy")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def names(self) -> list[str]:
        return [c.name for c in sorted(self.classes, key=lambda c: c.index)]

    def index_of(self, name: str) -> int:
        for c in self.classes:
            if c.name == name:
                return c.index
        raise KeyError(name)

    def name_of(self, index: int) -> str:
        for c in self.classes:
            if c.index == index:
                return c.name
        raise KeyError(index)

    def numerator_indices(self) -> list[int]:
        return sorted(self.index_of(n) for n in self.score_numerator)

    def denominator_extra_indices(self) -> list[int]:
        return sorted(self.index_of(n) for n in self.score_denominator_extra)

    def palette(self) -> np.ndarray:
        """(256, 3) uint8 color table indexed by class index."""
        pal = np.zeros((256, 3), dtype=np.uint8)
        for c in self.classes:
            pal[c.index] = c.color
        return pal

    def content_hash(self) -> str:
        doc = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(doc.encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        roles = {}
        for name in self.score_numerator:
            roles[name] = "numerator"
        for name in self.score_denominator_extra:
            roles[name] = "denominator_extra"
        classes = []
        for c in sorted(self.classes, key=lambda c: c.index):
            role = roles.get(c.name, "other")
            if c.index == self.background_index:
                role = "background"
            classes.append(
                {"name": c.name, "index": c.index, "color": list(c.color), "role": role}
            )
        return {"ignore_index": self.ignore_index, "classes": classes}

    def save(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def from_dict(cls, doc: dict) -> "ClassTaxonomy":
        classes = []
        numerator, extra = set(), set()
        background_index = 0
        for entry in doc["classes"]:
            classes.append(
                TissueClass(entry["name"], int(entry["index"]), tuple(entry["color"]))
            )
            role = entry.get("role", "other")
            if role == "numerator":
                numerator.add(entry["name"])
            elif role == "denominator_extra":
                extra.add(entry["name"])
            elif role == "background":
                background_index = int(entry["index"])
        return cls(
            classes=tuple(classes),
            ignore_index=int(doc.get("ignore_index", IGNORE_INDEX)),
            background_index=background_index,
            score_numerator=frozenset(numerator),
            score_denominator_extra=frozenset(extra),
        )

    @classmethod
    def load(cls, path) -> "ClassTaxonomy":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))

    @classmethod
    def default(cls) -> "ClassTaxonomy":
        """Seven-class taxonomy used by the synthetic fixtures: background,
        the five score classes and one extra tissue class."""
        spec = [
            ("background", (255, 255, 255)),
            ("tumor", (170, 40, 60)),
            ("tumor_stroma", (230, 140, 150)),
            ("ulcus_necrosis", (120, 90, 40)),
            ("benign_mucosa", (90, 160, 220)),
            ("submucosa", (140, 210, 120)),
            ("muscle", (200, 180, 90)),
        ]
        classes = tuple(TissueClass(n, i, c) for i, (n, c) in enumerate(spec))
        return cls(classes=classes)


# --------------------------------------------------------------------------- #
# Raster containers
# --------------------------------------------------------------------------- #

def validate_image(img: np.ndarray) -> np.ndarray:
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"image must have shape (H, W, 3), got {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError("image must be at least 1x1")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return img


def validate_mask(mask: np.ndarray, num_classes: int | None = None,
                  ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    if mask.ndim != 2:
        raise ValueError(f"mask must have shape (H, W), got {mask.shape}")
    if num_classes is not None:
        values = np.unique(mask)
        bad = values[(values >= num_classes) & (values != ignore_index)]
        if bad.size:
            raise ValueError(f"mask holds invalid class indices {bad.tolist()}")
    return mask


def to_unit(img8: np.ndarray) -> np.ndarray:
    return img8.astype(np.float32) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return to_unit(arr)


def save_image(path, img: np.ndarray):
    validate_image(img)
    Image.fromarray(to_uint8(img)).save(path)


def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")).copy()


def save_mask(path, mask: np.ndarray):
    validate_mask(mask)
    Image.fromarray(mask.astype(np.uint8), mode="L").save(path)


@dataclass(frozen=True)
class TileProvenance:
    slide_id: str
    x: int
    y: int
    source_magnification: float


@dataclass
class LabeledTile:
    """RGB tile plus optional index mask and/or tumor label."""

    image: np.ndarray
    mask: np.ndarray | None = None
    tumor_label: bool | None = None
    domain_id: str = ""
    provenance: TileProvenance | None = None

    def __post_init__(self):
        if self.mask is not None and self.mask.shape != self.image.shape[:2]:
            raise ValueError(
                f"mask shape {self.mask.shape} does not match image {self.image.shape[:2]}"
            )


# --------------------------------------------------------------------------- #
# Dihedral symmetry group (the 8 rotation/flip combinations of a square)
# --------------------------------------------------------------------------- #

class Dihedral(str, Enum):
    IDENTITY = "id"
    ROT90 = "r90"
    ROT180 = "r180"
    ROT270 = "r270"
    FLIP_H = "flip_h"
    FLIP_V = "flip_v"
    TRANSPOSE = "transpose"
    ANTI_TRANSPOSE = "anti_transpose"


DIHEDRAL_ELEMENTS = tuple(Dihedral)

# Elements that keep (H, W) of a non-square raster unchanged.
SHAPE_PRESERVING = (Dihedral.IDENTITY, Dihedral.ROT180, Dihedral.FLIP_H, Dihedral.FLIP_V)


def apply_dihedral(t: Dihedral, arr: np.ndarray) -> np.ndarray:
    """Permute pixels of a (H, W) mask or (H, W, C) image by group element ``t``."""
    t = Dihedral(t)
    if t is Dihedral.IDENTITY:
        out = arr
    elif t is Dihedral.ROT90:
        out = np.rot90(arr, 1, axes=(0, 1))
    elif t is Dihedral.ROT180:
        out = np.rot90(arr, 2, axes=(0, 1))
    elif t is Dihedral.ROT270:
        out = np.rot90(arr, 3, axes=(0, 1))
    elif t is Dihedral.FLIP_H:
        out = np.flip(arr, axis=1)
    elif t is Dihedral.FLIP_V:
        out = np.flip(arr, axis=0)
    elif t is Dihedral.TRANSPOSE:
        out = arr.swapaxes(0, 1)
    else:  # ANTI_TRANSPOSE
        out = np.rot90(arr.swapaxes(0, 1), 2, axes=(0, 1))
    return np.ascontiguousarray(out)


def _permutation_of(t: Dihedral) -> tuple:
    probe = np.arange(9).reshape(3, 3)
    return tuple(apply_dihedral(t, probe).ravel().tolist())


_PERM = {_permutation_of(t): t for t in DIHEDRAL_ELEMENTS}


def dihedral_compose(a: Dihedral, b: Dihedral) -> Dihedral:
    """Element c with apply(c, x) == apply(a, apply(b, x))."""
    probe = np.arange(9).reshape(3, 3)
    return _PERM[tuple(apply_dihedral(a, apply_dihedral(b, probe)).ravel().tolist())]


_INVERSE = {
    t: next(u for u in DIHEDRAL_ELEMENTS if dihedral_compose(u, t) is Dihedral.IDENTITY)
    for t in DIHEDRAL_ELEMENTS
}


def dihedral_inverse(t: Dihedral) -> Dihedral:
    return _INVERSE[Dihedral(t)]


# --------------------------------------------------------------------------- #
# Tile-grid geometry
# --------------------------------------------------------------------------- #

def tile_anchors(extent: int, tile_size: int, stride: int) -> list[int]:
    """Anchor offsets of a grid over ``extent``, anchored at 0, plus one
    final anchor flush with the far edge when the stride does not cover the
    extent exactly. Empty when the extent is smaller than the tile."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if extent < tile_size:
        return []
    anchors = list(range(0, extent - tile_size + 1, stride))
    if anchors[-1] != extent - tile_size:
        anchors.append(extent - tile_size)
    return anchors


@dataclass(frozen=True)
class TileGrid:
    """Uniform-stride grid of square tiles (origin in (x, y) pixel coords)."""

    origin: tuple[int, int]
    stride: int
    tile_size: int
    rows: int
    cols: int

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.rows * self.cols < 1:
            raise ValueError("grid must hold at least one tile")

    def anchors(self) -> list[tuple[int, int]]:
        """(x, y) anchors in row-major order."""
        x0, y0 = self.origin
        return [
            (x0 + c * self.stride, y0 + r * self.stride)
            for r in range(self.rows)
            for c in range(self.cols)
        ]
