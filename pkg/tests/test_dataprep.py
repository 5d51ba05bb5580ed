import hashlib
from pathlib import Path

import numpy as np
import pytest

from histoseg.core import ClassTaxonomy, load_image, load_mask
from histoseg.dataprep import (
    DatasetManifest,
    SlideRecord,
    SyntheticSpec,
    UpscaleError,
    annotated_fraction,
    derive_tile_tumor_label,
    generate_synthetic_dataset,
    load_manifest,
    load_slide_index,
    prepare_dataset,
    rescale_mask_to_target_magnification,
    rescale_to_target_magnification,
    save_manifest,
    stratified_slide_split,
    tile_segmentation_patch,
    tile_weak_slide,
    tissue_fraction,
)

TAX = ClassTaxonomy.default()

PINK = np.array([0.9, 0.5, 0.7], dtype=np.float32)


def pink_image(h, w):
    return np.broadcast_to(PINK, (h, w, 3)).copy()


class TestRescale:
    def test_10x_patch_to_5x(self):
        img = pink_image(3000, 3000)
        out = rescale_to_target_magnification(img, native_mag=10)
        assert out.shape == (1500, 1500, 3)

    def test_20x_slide_to_5x(self):
        img = pink_image(6000, 8000)
        out = rescale_to_target_magnification(img, native_mag=20)
        assert out.shape == (1500, 2000, 3)

    def test_identity_at_target(self):
        img = pink_image(64, 64)
        out = rescale_to_target_magnification(img, native_mag=5)
        assert out is img

    def test_upscale_refused(self):
        with pytest.raises(UpscaleError):
            rescale_to_target_magnification(pink_image(10, 10), native_mag=2.5)

    def test_area_average_of_constant_blocks(self):
        # 2x downscale of a 2x2-blocked image averages each block.
        img = np.zeros((4, 4, 3), dtype=np.float32)
        img[:2, :2] = 1.0
        out = rescale_to_target_magnification(img, native_mag=10)
        assert out.shape == (2, 2, 3)
        assert out[0, 0, 0] == pytest.approx(1.0)
        assert out[1, 1, 0] == pytest.approx(0.0)

    def test_mask_rescale_preserves_indices(self):
        mask = np.zeros((100, 100), dtype=np.uint8)
        mask[:50] = 3
        mask[50:, :50] = 255
        out = rescale_mask_to_target_magnification(mask, native_mag=10)
        assert out.shape == (50, 50)
        assert set(np.unique(out)) <= {0, 3, 255}


class TestFilters:
    def test_all_white_is_background(self):
        assert tissue_fraction(np.ones((10, 10, 3), dtype=np.float32)) == 0.0

    def test_all_pink_is_tissue(self):
        assert tissue_fraction(pink_image(10, 10)) == 1.0

    def test_half_and_half(self):
        img = np.ones((10, 10, 3), dtype=np.float32)
        img[:5] = PINK
        assert tissue_fraction(img) == 0.5

    def test_annotated_fraction(self):
        mask = np.full((300, 300), 255, dtype=np.uint8)
        assert annotated_fraction(mask) == 0.0
        mask[:, :] = 1
        assert annotated_fraction(mask) == 1.0
        mask[:, :] = 255
        mask.ravel()[:900] = 2
        assert annotated_fraction(mask) == pytest.approx(0.01)


class TestTumorLabel:
    def test_single_tumor_pixel(self):
        mask = np.full((8, 8), TAX.index_of("benign_mucosa"), dtype=np.uint8)
        mask[3, 3] = TAX.index_of("tumor")
        assert derive_tile_tumor_label(mask, TAX) is True

    def test_benign_only(self):
        mask = np.full((8, 8), TAX.index_of("benign_mucosa"), dtype=np.uint8)
        assert derive_tile_tumor_label(mask, TAX) is False

    def test_all_ignore_is_unset(self):
        mask = np.full((8, 8), TAX.ignore_index, dtype=np.uint8)
        assert derive_tile_tumor_label(mask, TAX) is None


class TestTiling:
    def test_fully_annotated_1500_patch_gives_81_tiles(self):
        img = pink_image(1500, 1500)
        mask = np.full((1500, 1500), 1, dtype=np.uint8)
        tiles = tile_segmentation_patch(img, mask, TAX)
        assert len(tiles) == 81

    def test_all_ignore_gives_nothing(self):
        img = pink_image(600, 600)
        mask = np.full((600, 600), 255, dtype=np.uint8)
        assert tile_segmentation_patch(img, mask, TAX) == []

    def test_single_cell(self):
        img = pink_image(300, 300)
        mask = np.full((300, 300), 4, dtype=np.uint8)
        tiles = tile_segmentation_patch(img, mask, TAX)
        assert len(tiles) == 1
        assert tiles[0].tumor_label is False

    def test_small_source_warns_and_returns_empty(self):
        img = pink_image(200, 200)
        mask = np.zeros((200, 200), dtype=np.uint8)
        with pytest.warns(UserWarning, match="smaller than the tile size"):
            assert tile_segmentation_patch(img, mask, TAX) == []

    def test_weak_grid_3x2(self):
        tiles = tile_weak_slide(pink_image(600, 900))
        assert len(tiles) == 6
        assert all(t.mask is None and t.tumor_label is None for t in tiles)

    def test_weak_all_white_dropped(self):
        assert tile_weak_slide(np.ones((600, 600, 3), dtype=np.float32)) == []

    def test_weak_filter_boundary(self):
        img = np.ones((300, 300, 3), dtype=np.float32)
        n_tissue = int(0.49 * 300 * 300)
        img.reshape(-1, 3)[:n_tissue] = PINK
        assert tile_weak_slide(img) == []
        img.reshape(-1, 3)[: int(0.5 * 300 * 300)] = PINK
        assert len(tile_weak_slide(img)) == 1

    def test_filter_monotonicity(self):
        rng = np.random.default_rng(11)
        img = pink_image(600, 600)
        mask = np.where(rng.random((600, 600)) < 0.03, 1, 255).astype(np.uint8)
        counts = [len(tile_segmentation_patch(img, mask, TAX, min_annotated=t))
                  for t in (0.08, 0.04, 0.02, 0.0)]
        assert counts == sorted(counts)

    def test_coverage_painting(self):
        # Union of tile footprints covers the source exactly, including the
        # flush last row/column.
        for h, w in [(450, 750), (600, 600), (310, 473)]:
            img = pink_image(h, w)
            tiles = tile_weak_slide(img, min_tissue=0.0)
            paint = np.zeros((h, w), dtype=np.int32)
            for t in tiles:
                p = t.provenance
                paint[p.y:p.y + 300, p.x:p.x + 300] += 1
            assert (paint >= 1).all()

    def test_provenance_and_label_derivation(self):
        img = pink_image(450, 450)
        mask = np.full((450, 450), TAX.index_of("submucosa"), dtype=np.uint8)
        mask[:20, :20] = TAX.index_of("tumor")
        tiles = tile_segmentation_patch(img, mask, TAX)
        assert len(tiles) == 4
        by_origin = {(t.provenance.y, t.provenance.x): t for t in tiles}
        assert by_origin[(0, 0)].tumor_label is True
        assert by_origin[(150, 150)].tumor_label is False


def make_slides(n, kind, domain="d0", mag=10.0):
    return [SlideRecord(
        slide_id=f"{kind[:1]}{domain}{i:03d}", image_path=f"{i}.png",
        mask_path="m.png" if kind == "segmentation" else None,
        native_magnification=mag, tumor_label=None, domain_id=domain)
        for i in range(n)]


class TestSplit:
    def test_paper_scale_counts(self):
        seg = make_slides(20, "segmentation")
        assign = stratified_slide_split(seg, 0.8, seed=1)
        counts = [list(assign.values()).count(s) for s in ("train", "val")]
        assert counts == [16, 4]

        weak = make_slides(499, "weak")
        assign = stratified_slide_split(weak, 0.8, seed=1)
        counts = [list(assign.values()).count(s) for s in ("train", "val")]
        assert counts == [399, 100]

    def test_single_slide_stratum_goes_to_train(self):
        assign = stratified_slide_split(make_slides(1, "weak"), 0.8, seed=0)
        assert list(assign.values()) == ["train"]

    def test_stratification_is_per_domain_and_kind(self):
        slides = (make_slides(10, "segmentation", "a") + make_slides(10, "weak", "a")
                  + make_slides(5, "weak", "b"))
        assign = stratified_slide_split(slides, 0.8, seed=3)
        for subset, expected_train in [
            (make_slides(10, "segmentation", "a"), 8),
            (make_slides(10, "weak", "a"), 8),
            (make_slides(5, "weak", "b"), 4),
        ]:
            ids = [s.slide_id for s in subset]
            assert sum(assign[i] == "train" for i in ids) == expected_train

    def test_deterministic_and_disjoint(self):
        slides = make_slides(13, "weak", "a") + make_slides(7, "weak", "b")
        a = stratified_slide_split(slides, 0.8, seed=5)
        b = stratified_slide_split(slides, 0.8, seed=5)
        assert a == b
        c = stratified_slide_split(slides, 0.8, seed=6)
        assert a != c  # overwhelmingly likely for 20 slides
        train = {k for k, v in a.items() if v == "train"}
        val = {k for k, v in a.items() if v == "val"}
        assert not train & val

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            stratified_slide_split([], 0.8, seed=0)


def dir_digest(root) -> str:
    h = hashlib.sha256()
    for path in sorted(Path(root).rglob("*")):
        if path.is_file():
            h.update(path.name.encode())
            h.update(path.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def tiny_spec():
    return SyntheticSpec(
        n_segmentation_slides=2, n_weak_slides=2, n_positive=2, n_test_slides=2,
        seg_size=450, weak_size=1200, seed=9)


class TestSyntheticDataset:
    def test_determinism_byte_identical(self, tmp_path, tiny_spec):
        generate_synthetic_dataset(tiny_spec, TAX, tmp_path / "a")
        generate_synthetic_dataset(tiny_spec, TAX, tmp_path / "b")
        assert dir_digest(tmp_path / "a") == dir_digest(tmp_path / "b")

    def test_negative_slides_have_no_tumor_pixels(self, tmp_path, tiny_spec):
        slides, _ = generate_synthetic_dataset(tiny_spec, TAX, tmp_path / "d")
        for s in slides:
            if s.mask_path and not s.tumor_label:
                mask = load_mask(tmp_path / "d" / s.mask_path)
                assert (mask != TAX.index_of("tumor")).all()

    def test_positive_count(self, tmp_path):
        spec = SyntheticSpec(n_segmentation_slides=4, n_weak_slides=6, n_positive=5,
                             n_test_slides=0, seg_size=450, weak_size=1200, seed=2)
        slides, _ = generate_synthetic_dataset(spec, TAX, tmp_path / "p")
        assert sum(bool(s.tumor_label) for s in slides) == 5

    def test_masks_match_images(self, tmp_path, tiny_spec):
        slides, _ = generate_synthetic_dataset(tiny_spec, TAX, tmp_path / "m")
        seg = [s for s in slides if s.mask_path]
        assert seg
        for s in seg:
            img = load_image(tmp_path / "m" / s.image_path)
            mask = load_mask(tmp_path / "m" / s.mask_path)
            assert mask.shape == img.shape[:2]

    def test_slide_index_roundtrip(self, tmp_path, tiny_spec):
        slides, test_slides = generate_synthetic_dataset(tiny_spec, TAX, tmp_path / "r")
        assert load_slide_index(tmp_path / "r" / "slides.jsonl") == slides
        assert load_slide_index(tmp_path / "r" / "test_slides.jsonl") == test_slides


@pytest.fixture(scope="module")
def prepared(tmp_path_factory):
    root = tmp_path_factory.mktemp("prep")
    spec = SyntheticSpec(n_segmentation_slides=2, n_weak_slides=3, n_positive=2,
                         n_test_slides=0, seg_size=900, weak_size=1200, seed=4)
    slides, _ = generate_synthetic_dataset(spec, TAX, root / "data")
    manifest, stats = prepare_dataset(slides, TAX, root / "data", root / "out", seed=4)
    return root, slides, manifest, stats


class TestPrepare:
    def test_entries_exist_and_are_recheckable(self, prepared):
        root, slides, manifest, stats = prepared
        assert manifest.entries
        kinds = {e.annotation_kind for e in manifest.entries}
        assert kinds == {"segmentation", "weak"}
        for e in manifest.entries:
            img = load_image(root / "out" / e.tile_path)
            assert img.shape == (300, 300, 3)
            if e.annotation_kind == "segmentation":
                mask = load_mask(root / "out" / e.mask_path)
                assert annotated_fraction(mask) >= 0.01
                assert e.tumor_label is not None
            else:
                assert e.mask_path is None
                assert tissue_fraction(img) >= 0.5

    def test_split_is_slide_disjoint(self, prepared):
        _, _, manifest, _ = prepared
        assert not manifest.slide_ids("train") & manifest.slide_ids("val")

    def test_manifest_roundtrip(self, prepared):
        root, _, manifest, _ = prepared
        loaded = load_manifest(root / "out" / "manifest.jsonl")
        assert loaded == manifest

    def test_canonical_ordering(self, prepared):
        _, _, manifest, _ = prepared
        keys = [(e.slide_id, e.y, e.x) for e in manifest.entries]
        assert keys == sorted(keys)

    def test_worker_invariance(self, tmp_path):
        spec = SyntheticSpec(n_segmentation_slides=2, n_weak_slides=2, n_positive=1,
                             n_test_slides=0, seg_size=600, weak_size=1200, seed=6)
        slides, _ = generate_synthetic_dataset(spec, TAX, tmp_path / "data")
        prepare_dataset(slides, TAX, tmp_path / "data", tmp_path / "w1", seed=6, workers=1)
        prepare_dataset(slides, TAX, tmp_path / "data", tmp_path / "w2", seed=6, workers=2)
        assert dir_digest(tmp_path / "w1") == dir_digest(tmp_path / "w2")

    def test_prepare_determinism(self, tmp_path):
        spec = SyntheticSpec(n_segmentation_slides=2, n_weak_slides=2, n_positive=1,
                             n_test_slides=0, seg_size=600, weak_size=1200, seed=8)
        slides, _ = generate_synthetic_dataset(spec, TAX, tmp_path / "data")
        prepare_dataset(slides, TAX, tmp_path / "data", tmp_path / "r1", seed=8)
        prepare_dataset(slides, TAX, tmp_path / "data", tmp_path / "r2", seed=8)
        assert dir_digest(tmp_path / "r1") == dir_digest(tmp_path / "r2")
