"""Command-line pipeline: synth, prepare, stats, train, infer, eval-seg,
eval-det, report and preview-augment subcommands.

Commands are driven by a YAML configuration file (paths inside it resolve
relative to the file); command-line flags override config values. Exit codes:
0 success, 1 runtime failure, 2 invalid arguments.
"""

from __future__ import annotations

import argparse
import json
import multiprocessing
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import augment as aug
from . import dataprep, infer, metrics, train
from .core import ClassTaxonomy, LabeledTile, load_image
from .model import ModelConfig, load_checkpoint


# --------------------------------------------------------------------------- #
# Configuration file
# --------------------------------------------------------------------------- #

class PipelineConfig:
    """Parsed pipeline configuration; all relative paths are resolved against
    the directory containing the config file."""

    def __init__(self, doc: dict, base_dir: Path):
        self.doc = doc
        self.base = base_dir

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        return cls(yaml.safe_load(path.read_text()) or {}, path.parent)

    def path(self, key: str, default: str | None = None) -> Path:
        value = self.doc.get(key, default)
        if value is None:
            raise ValueError(f"config is missing required path {key!r}")
        p = Path(value)
        return p if p.is_absolute() else self.base / p

    def section(self, name: str) -> dict:
        return dict(self.doc.get(name) or {})

    @property
    def seed(self) -> int:
        return int(self.doc.get("seed", 0))

    def taxonomy(self) -> ClassTaxonomy:
        return ClassTaxonomy.load(self.path("taxonomy"))

    def stats_bank(self) -> aug.StatsBank | None:
        if "stats_bank" not in self.doc:
            return None
        bank_path = self.path("stats_bank")
        return aug.StatsBank.load(bank_path) if bank_path.exists() else None

    def augment_config(self) -> aug.AugmentConfig:
        return aug.AugmentConfig(stats_bank=self.stats_bank(), **self.section("augment"))

    def model_config(self, num_classes: int) -> ModelConfig:
        return ModelConfig(num_classes=num_classes, **self.section("model"))

    def train_config(self) -> train.TrainConfig:
        section = self.section("train")
        section.setdefault("seed", self.seed)
        return train.TrainConfig(augment=self.augment_config(), **section)

    def infer_config(self, tta: bool | None = None) -> infer.InferenceConfig:
        section = self.section("infer")
        if tta is not None:
            section["tta"] = tta
        return infer.InferenceConfig(**section)


# Desk-scale defaults written next to a synthetic dataset: a reduced model and
# schedule that overfit the color-separable fixture in a few hundred steps on
# a CPU. Paper-scale values (base 32, 5 levels, batch 128, lr 0.2, gamma 0.97,
# 100 epochs, no normalization) go in a real config.
DESK_CONFIG = {
    "seed": 7,
    "taxonomy": "taxonomy.yaml",
    "slides": "slides.jsonl",
    "data_root": ".",
    "prep_dir": "prep",
    "run_dir": "run",
    "stats_bank": "bank.json",
    "dataprep": {"train_fraction": 0.8, "target_magnification": 5.0},
    "augment": {"probability": 0.7, "crop_size": 260,
                "enable_bc_channelwise": True, "enable_stat_transfer": True},
    "model": {"base_channels": 8, "levels": 4, "input_size": 260, "norm": "batch"},
    "train": {"epochs": 150, "batch_size": 8, "lr0": 0.05, "momentum": 0.9,
              "weight_decay": 5.0e-6, "gamma": 0.995, "loss_weight": 0.5,
              "validate_every": 25, "max_steps": 400},
    "infer": {"input_tile": 260, "tta": False, "batch_size": 8},
}


# --------------------------------------------------------------------------- #
# Commands
# --------------------------------------------------------------------------- #

def cmd_synth(args) -> int:
    out = Path(args.out)
    taxonomy = (ClassTaxonomy.load(args.taxonomy) if args.taxonomy
                else ClassTaxonomy.default())
    spec = dataprep.SyntheticSpec(
        n_segmentation_slides=args.seg_slides, n_weak_slides=args.weak_slides,
        n_positive=args.positives, n_test_slides=args.test_slides,
        seg_size=args.seg_size, weak_size=args.weak_size, seed=args.seed)
    slides, test_slides = dataprep.generate_synthetic_dataset(spec, taxonomy, out)
    if args.write_config:
        doc = dict(DESK_CONFIG)
        doc["seed"] = args.seed
        (out / "config.yaml").write_text(yaml.safe_dump(doc, sort_keys=False))
    print(f"wrote {len(slides)} slides and {len(test_slides)} test slides to {out}")
    return 0


def cmd_prepare(args) -> int:
    config = PipelineConfig.load(args.config)
    taxonomy = config.taxonomy()
    slides_path = Path(args.slides) if args.slides else config.path("slides")
    data_root = Path(args.data_root) if args.data_root else config.path("data_root")
    out_dir = Path(args.out) if args.out else config.path("prep_dir")
    seed = args.seed if args.seed is not None else config.seed
    slides = dataprep.load_slide_index(slides_path)
    if not slides:
        raise ValueError(f"slide index {slides_path} is empty")
    for s in slides:
        if not (data_root / s.image_path).exists():
            raise ValueError(f"slide {s.slide_id}: missing image file {s.image_path}")
        if s.mask_path and not (data_root / s.mask_path).exists():
            raise ValueError(f"slide {s.slide_id}: missing mask file {s.mask_path}")
    section = config.section("dataprep")
    manifest, stats = dataprep.prepare_dataset(
        slides, taxonomy, data_root, out_dir, seed=seed,
        train_fraction=float(section.get("train_fraction", 0.8)),
        target_mag=float(section.get("target_magnification", 5.0)),
        workers=args.workers, taxonomy_path=str(config.path("taxonomy")))
    print(f"kept {stats['kept_segmentation']} segmentation tiles and "
          f"{stats['kept_weak']} weak tiles ({stats['dropped']} dropped); "
          f"manifest: {out_dir / 'manifest.jsonl'}")
    return 0


def cmd_stats(args) -> int:
    config = PipelineConfig.load(args.config) if args.config else None
    if args.bank:
        bank_path = Path(args.bank)
    elif config is not None:
        bank_path = config.path("stats_bank")
    else:
        raise ValueError("either --bank or --config is required")
    bank = aug.StatsBank.load(bank_path) if bank_path.exists() else aug.StatsBank()
    seed = args.seed if args.seed is not None else (config.seed if config else 0)

    jobs: list[tuple[str, list]] = []
    if args.image_dir:
        if not args.domain:
            raise ValueError("--domain is required with --image-dir")
        paths = sorted(Path(args.image_dir).glob("*.png"))
        if not paths:
            raise ValueError(f"no PNG images under {args.image_dir}")
        jobs.append((args.domain, paths))
    else:
        if config is None:
            raise ValueError("either --image-dir or --config is required")
        prep_dir = config.path("prep_dir")
        manifest = dataprep.load_manifest(prep_dir / "manifest.jsonl")
        by_domain: dict[str, list] = {}
        for e in manifest.split_entries("train"):
            by_domain.setdefault(e.domain_id, []).append(prep_dir / e.tile_path)
        if not by_domain:
            raise ValueError("manifest has no training tiles")
        jobs.extend(sorted(by_domain.items()))

    for domain_id, paths in jobs:
        stats = aug.compute_reference_stats(paths, domain_id, n=args.n, seed=seed,
                                            source=args.source)
        bank.upsert(stats)
        print(f"domain {domain_id}: mean {np.round(stats.mean, 4).tolist()} "
              f"std {np.round(stats.std, 4).tolist()} (n={stats.sample_count})")
    bank.save(bank_path)
    print(f"stats bank with {len(bank.entries)} entries: {bank_path}")
    return 0


def cmd_train(args) -> int:
    config = PipelineConfig.load(args.config)
    taxonomy = config.taxonomy()
    prep_dir = config.path("prep_dir")
    out_dir = Path(args.out) if args.out else config.path("run_dir")
    manifest = dataprep.load_manifest(prep_dir / "manifest.jsonl")
    train_config = config.train_config()
    if args.seed is not None:
        train_config.seed = args.seed
    if args.epochs is not None:
        train_config.epochs = args.epochs
    if args.max_steps is not None:
        train_config.max_steps = args.max_steps
    model_config = config.model_config(taxonomy.num_classes)
    result = train.run_training(train_config, model_config, manifest, taxonomy,
                                prep_dir, out_dir, resume_from=args.resume,
                                log_stream=sys.stderr)
    best = f"{result.best_dice:.4f}" if result.best_dice is not None else "n/a"
    print(f"trained {len(result.logs)} epochs; best val dice {best} "
          f"(epoch {result.best_epoch}); checkpoints in {out_dir / 'checkpoints'}")
    return 0


_WORKER = {}


def _infer_init(checkpoint, input_tile):
    model, _ = load_checkpoint(checkpoint)
    _WORKER["predictor"] = infer.ModelPredictor(model, input_tile)


def _infer_one(job):
    slide_doc, data_root, out_dir, config_doc, taxonomy_doc, overlay = job
    taxonomy = ClassTaxonomy.from_dict(taxonomy_doc)
    config = infer.InferenceConfig(**config_doc)
    predictor = _WORKER["predictor"]
    image = load_image(Path(data_root) / slide_doc["image_path"])
    pred = infer.predict_wsi(predictor, image, slide_doc["native_magnification"],
                             taxonomy, config)
    out = Path(out_dir)
    sid = slide_doc["slide_id"]
    infer.save_class_map(out / f"{sid}_classmap.png", pred.class_map, taxonomy)
    infer.save_prediction_json(out / f"{sid}_result.json", sid, pred)
    if overlay:
        img5 = dataprep.rescale_to_target_magnification(
            image, slide_doc["native_magnification"], config.target_magnification)
        infer.save_overlay(out / f"{sid}_overlay.png", img5, pred.class_map, taxonomy)
    return sid, pred.tumor_score


def cmd_infer(args) -> int:
    config = PipelineConfig.load(args.config)
    taxonomy = config.taxonomy()
    run_dir = config.path("run_dir")
    checkpoint = Path(args.checkpoint) if args.checkpoint else run_dir / "checkpoints" / "best.pt"
    slides_path = Path(args.slides) if args.slides else config.path("slides")
    data_root = Path(args.data_root) if args.data_root else config.path("data_root")
    out_dir = Path(args.out) if args.out else run_dir / "pred"
    out_dir.mkdir(parents=True, exist_ok=True)
    infer_config = config.infer_config(tta=args.tta)
    slides = dataprep.load_slide_index(slides_path)
    if not slides:
        raise ValueError(f"slide index {slides_path} is empty")

    jobs = [({"slide_id": s.slide_id, "image_path": s.image_path,
              "native_magnification": s.native_magnification},
             str(data_root), str(out_dir), infer_config.__dict__,
             taxonomy.to_dict(), args.overlay)
            for s in sorted(slides, key=lambda s: s.slide_id)]
    if args.workers > 1:
        # Spawned workers: forking after torch initialization can deadlock.
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=args.workers, mp_context=ctx,
                                 initializer=_infer_init,
                                 initargs=(str(checkpoint), infer_config.input_tile)) as pool:
            results = list(pool.map(_infer_one, jobs))
    else:
        _infer_init(checkpoint, infer_config.input_tile)
        results = [_infer_one(job) for job in jobs]
    for sid, score in results:
        print(f"{sid}: tumor_score {score:.4f}")
    print(f"predictions written to {out_dir}")
    return 0


def cmd_eval_seg(args) -> int:
    taxonomy = ClassTaxonomy.load(args.taxonomy)
    slides = dataprep.load_slide_index(args.slides)
    data_root = Path(args.data_root)
    pred_dir = Path(args.pred_dir)
    acc = metrics.DiceAccumulator(taxonomy.num_classes, taxonomy.ignore_index)
    n = 0
    for s in slides:
        if not s.mask_path:
            continue
        pred_path = pred_dir / f"{s.slide_id}_classmap.png"
        if not pred_path.exists():
            raise ValueError(f"missing prediction {pred_path}")
        pred = infer.load_class_map(pred_path)
        mask = dataprep.load_mask_at_target(data_root / s.mask_path,
                                            s.native_magnification)
        acc.update(pred, mask)
        n += 1
    if n == 0:
        raise ValueError("no annotated slides to evaluate")
    dice = acc.macro()
    doc = {"configuration": args.configuration, "split": args.split,
           "multi_class_dice": dice, "n_slides": n}
    Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"multi_class_dice {dice:.4f} over {n} slides -> {args.out}")
    return 0


def cmd_eval_det(args) -> int:
    slides = dataprep.load_slide_index(args.slides)
    pred_dir = Path(args.pred_dir)
    scores, labels = [], []
    for s in slides:
        if s.tumor_label is None:
            continue
        doc = infer.load_prediction_json(pred_dir / f"{s.slide_id}_result.json")
        scores.append(doc["tumor_score"])
        labels.append(int(s.tumor_label))
    value = metrics.auroc(scores, labels)
    doc = {"configuration": args.configuration, "split": args.split,
           "auroc": value, "n_slides": len(scores)}
    Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"auroc {value:.4f} over {len(scores)} slides -> {args.out}")
    return 0


def cmd_report(args) -> int:
    runs = [metrics.load_run_metrics(p) for p in args.metrics]
    report = metrics.build_report(runs)
    text = metrics.render_report_text(report)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.txt").write_text(text)
    metrics.write_report_csv(report, out_dir / "report.csv")
    print(text, end="")
    return 0


def cmd_preview_augment(args) -> int:
    bank = aug.StatsBank.load(args.bank) if args.bank else aug.StatsBank()
    config = aug.AugmentConfig(stats_bank=bank)
    tiles = [LabeledTile(image=load_image(p)) for p in args.tiles]
    aug.preview_grid(tiles, config, aug.derive_rng(args.seed), args.out)
    print(f"wrote preview grid to {args.out}")
    return 0


# --------------------------------------------------------------------------- #
# Parser
# --------------------------------------------------------------------------- #

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="histoseg",
        description="Tile-based tissue segmentation and tumor detection pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a deterministic synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--seg-slides", type=int, default=4)
    p.add_argument("--weak-slides", type=int, default=6)
    p.add_argument("--positives", type=int, default=5)
    p.add_argument("--test-slides", type=int, default=4)
    p.add_argument("--seg-size", type=int, default=900)
    p.add_argument("--weak-size", type=int, default=2400)
    p.add_argument("--taxonomy", help="taxonomy YAML (default: built-in)")
    p.add_argument("--write-config", action=argparse.BooleanOptionalAction, default=True,
                   help="also write a desk-scale pipeline config.yaml")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="rescale, tile, filter and split the slides")
    p.add_argument("--config", required=True, help="pipeline config YAML")
    p.add_argument("--slides", help="slide index (overrides config)")
    p.add_argument("--data-root", help="root for slide paths (overrides config)")
    p.add_argument("--out", help="output directory (overrides config prep_dir)")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("stats", help="compute per-domain reference color statistics")
    p.add_argument("--config", help="pipeline config YAML (for manifest mode)")
    p.add_argument("--image-dir", help="directory of PNG tiles for one domain")
    p.add_argument("--domain", help="domain id for --image-dir mode")
    p.add_argument("--bank", help="stats bank JSON (overrides config)")
    p.add_argument("-n", type=int, default=2000, help="sample size per domain")
    p.add_argument("--seed", type=int)
    p.add_argument("--source", default="internal", help="source tag for the entries")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train the multi-task model")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="run directory (overrides config run_dir)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict class maps and tumor scores for slides")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", help="model checkpoint (default: run_dir best)")
    p.add_argument("--slides", help="slide index (overrides config)")
    p.add_argument("--data-root", help="root for slide paths (overrides config)")
    p.add_argument("--out", help="prediction directory (default: run_dir/pred)")
    p.add_argument("--tta", action=argparse.BooleanOptionalAction, default=None,
                   help="8-fold dihedral test-time augmentation")
    p.add_argument("--overlay", action="store_true", help="also write RGB overlays")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval-seg", help="multi-class Dice of predicted class maps")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--slides", required=True, help="slide index with mask paths")
    p.add_argument("--data-root", required=True)
    p.add_argument("--taxonomy", required=True)
    p.add_argument("--out", required=True, help="metrics JSON to write")
    p.add_argument("--configuration", default="default")
    p.add_argument("--split", default="internal")
    p.set_defaults(func=cmd_eval_seg)

    p = sub.add_parser("eval-det", help="slide-level AUROC of tumor scores")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--slides", required=True, help="slide index with tumor labels")
    p.add_argument("--out", required=True, help="metrics JSON to write")
    p.add_argument("--configuration", default="default")
    p.add_argument("--split", default="internal")
    p.set_defaults(func=cmd_eval_det)

    p = sub.add_parser("report", help="aggregate run metrics into a comparison table")
    p.add_argument("metrics", nargs="+", help="metrics JSON files")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("preview-augment", help="write an augmentation preview grid")
    p.add_argument("tiles", nargs="+", help="tile PNGs")
    p.add_argument("--bank", help="stats bank JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_preview_augment)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
