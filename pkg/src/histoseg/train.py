"""Multi-task training: weighted cross-entropy + binary cross-entropy loss,
50/50 balanced batches of segmentation and weakly labeled tiles, SGD with
Nesterov momentum, exponential learning-rate decay, per-epoch validation and
Dice-based model selection.

An epoch is the number of batches needed to show every segmentation training
tile once; the weak pool is randomly undersampled to the segmentation pool
size with a fresh draw each epoch.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .augment import AugmentConfig, augment_pipeline, derive_rng
from .core import ClassTaxonomy, LabeledTile, load_image, load_mask
from .dataprep import DatasetManifest, ManifestEntry
from .infer import InferenceConfig, ModelPredictor, predict_wsi
from .metrics import DiceAccumulator, UndefinedMetricError, auroc
from .model import ModelConfig, MultiTaskUNet, build_model, load_checkpoint, output_geometry, save_checkpoint


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    lr0: float = 0.2
    momentum: float = 0.9
    weight_decay: float = 5e-6
    gamma: float = 0.97
    loss_weight: float = 0.5
    seed: int = 0
    validate_every: int = 1
    max_steps: int | None = None  # desk-scale cap; None trains all epochs
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.batch_size % 2 != 0:
            raise ValueError("batch_size must be even for the 50/50 split")
        if not 0.0 <= self.loss_weight <= 1.0:
            raise ValueError("loss_weight must lie in [0, 1]")


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    mean_ce: float
    mean_bce: float
    val_dice: float | None
    val_auroc: float | None
    lr: float
    wall_time: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TrainResult:
    best_path: str
    last_path: str
    logs: list[EpochLog]
    best_epoch: int
    best_dice: float | None


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return config.lr0 * config.gamma ** epoch


def multi_task_loss(seg_logits: torch.Tensor, mask_cropped: torch.Tensor,
                    tumor_logit: torch.Tensor, tumor_label: torch.Tensor,
                    w: float = 0.5, ignore_index: int = 255
                    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """total = w * CE + (1 - w) * BCE.

    CE is the mean cross-entropy over non-ignored pixels (0 when the batch has
    none, so unannotated tiles contribute nothing to the segmentation term);
    BCE is the mean binary cross-entropy of the tumor logits. Returns
    (total, ce, bce); the total is accumulated in float64 so the affine
    combination of the parts is exact.
    """
    if mask_cropped.shape[-2:] != seg_logits.shape[-2:]:
        raise ValueError(
            f"mask {tuple(mask_cropped.shape[-2:])} must match the prediction "
            f"map {tuple(seg_logits.shape[-2:])} (center-crop it by the model margin)")
    if not bool(((tumor_label == 0) | (tumor_label == 1)).all()):
        raise ValueError("tumor labels must be 0 or 1")
    if bool((mask_cropped != ignore_index).any()):
        ce = F.cross_entropy(seg_logits, mask_cropped, ignore_index=ignore_index)
    else:
        ce = seg_logits.sum() * 0.0
    bce = F.binary_cross_entropy_with_logits(tumor_logit, tumor_label.float())
    total = w * ce.double() + (1.0 - w) * bce.double()
    return total, ce, bce


# --------------------------------------------------------------------------- #
# Balanced batching
# --------------------------------------------------------------------------- #

@dataclass
class BalancedBatch:
    seg: list
    weak: list
    short: bool = False


def balanced_batches(seg_items: list, weak_items: list, batch_size: int,
                     seed: int, epoch: int) -> list[BalancedBatch]:
    """Batches of batch_size/2 segmentation plus batch_size/2 weak items.

    Every segmentation item appears exactly once per epoch. The weak pool is
    undersampled (without replacement) to the segmentation pool size each
    epoch; when it is smaller it is recycled. A final short batch keeps the
    truncated segmentation remainder and refills the weak side by wrapping
    around the epoch's weak sample.
    """
    if not seg_items or not weak_items:
        raise ValueError("both the segmentation and weak sets must be non-empty")
    if batch_size % 2 != 0:
        raise ValueError("batch_size must be even")
    half = batch_size // 2
    rng = derive_rng(seed, epoch, 7001)
    n_seg = len(seg_items)
    seg_order = [seg_items[i] for i in rng.permutation(n_seg)]
    weak_perm = [weak_items[i] for i in rng.permutation(len(weak_items))]
    if len(weak_perm) >= n_seg:
        weak_epoch = weak_perm[:n_seg]
    else:
        reps = math.ceil(n_seg / len(weak_perm))
        weak_epoch = (weak_perm * reps)[:n_seg]
    batches = []
    n_batches = math.ceil(n_seg / half)
    for b in range(n_batches):
        seg_chunk = seg_order[b * half:(b + 1) * half]
        weak_chunk = weak_epoch[b * half:(b + 1) * half]
        short = len(seg_chunk) < half
        if short:
            while len(weak_chunk) < half:
                weak_chunk = weak_chunk + weak_epoch[: half - len(weak_chunk)]
        batches.append(BalancedBatch(seg=seg_chunk, weak=weak_chunk, short=short))
    return batches


# --------------------------------------------------------------------------- #
# Tile loading
# --------------------------------------------------------------------------- #

class TileStore:
    """Loads manifest tiles from disk with a simple in-memory cache."""

    def __init__(self, manifest: DatasetManifest, data_root, taxonomy: ClassTaxonomy):
        self.root = Path(data_root)
        self.taxonomy = taxonomy
        self._cache: dict[str, tuple[np.ndarray, np.ndarray | None]] = {}
        self.manifest = manifest

    def load(self, entry: ManifestEntry) -> LabeledTile:
        key = entry.tile_path
        if key not in self._cache:
            img = load_image(self.root / entry.tile_path)
            mask = load_mask(self.root / entry.mask_path) if entry.mask_path else None
            self._cache[key] = (img, mask)
        img, mask = self._cache[key]
        return LabeledTile(image=img, mask=mask, tumor_label=entry.tumor_label,
                           domain_id=entry.domain_id)


def _assemble_batch(batch: BalancedBatch, store: TileStore, config: TrainConfig,
                    epoch: int, index_of: dict, margin: int, out_size: int,
                    ignore_index: int):
    """Augment and tensorize one balanced batch. Masks are center-cropped by
    the model margin; weak tiles get an all-ignore mask."""
    images, masks, labels = [], [], []
    for entry in batch.seg + batch.weak:
        tile = store.load(entry)
        rng = derive_rng(config.seed, epoch, index_of[id(entry)])
        tile = augment_pipeline(tile, config.augment, rng)
        images.append(tile.image.transpose(2, 0, 1))
        if tile.mask is not None:
            cropped = tile.mask[margin:margin + out_size, margin:margin + out_size]
            masks.append(cropped.astype(np.int64))
        else:
            masks.append(np.full((out_size, out_size), ignore_index, dtype=np.int64))
        if entry.tumor_label is None:
            raise ValueError(f"tile {entry.tile_path} has no tumor label")
        labels.append(float(entry.tumor_label))
    x = torch.from_numpy(np.stack(images)).float()
    y = torch.from_numpy(np.stack(masks))
    t = torch.tensor(labels, dtype=torch.float32)
    return x, y, t


# --------------------------------------------------------------------------- #
# Validation
# --------------------------------------------------------------------------- #

def evaluate_segmentation_tiles(predictor, entries: list[ManifestEntry],
                                store: TileStore, taxonomy: ClassTaxonomy,
                                tta: bool = False) -> float:
    """Macro Dice over a set of annotated tiles, each predicted at full size
    through the reflection-padding pipeline."""
    if not entries:
        raise ValueError("no annotated tiles to evaluate")
    acc = DiceAccumulator(taxonomy.num_classes, taxonomy.ignore_index)
    config = InferenceConfig(tta=tta)
    for entry in entries:
        tile = store.load(entry)
        pred = predict_wsi(predictor, tile.image, config.target_magnification,
                           taxonomy, config)
        acc.update(pred.class_map, tile.mask)
    return acc.macro()


def evaluate_detection_tiles(predictor, entries: list[ManifestEntry],
                             store: TileStore, taxonomy: ClassTaxonomy,
                             tta: bool = False) -> tuple[dict, dict]:
    """Slide-level tumor scores from tile class counts: predicts every tile of
    each slide, pools the pixel counts per slide and scores the pool.
    Returns ({slide_id: score}, {slide_id: label})."""
    from .infer import tumor_score

    config = InferenceConfig(tta=tta)
    counts: dict[str, dict] = {}
    labels: dict[str, bool] = {}
    for entry in entries:
        tile = store.load(entry)
        pred = predict_wsi(predictor, tile.image, config.target_magnification,
                           taxonomy, config)
        slide_counts = counts.setdefault(entry.slide_id, {})
        for name, n in pred.class_counts.items():
            slide_counts[name] = slide_counts.get(name, 0) + n
        if entry.tumor_label is not None:
            labels[entry.slide_id] = bool(entry.tumor_label)
    scores = {sid: tumor_score(c, taxonomy) for sid, c in counts.items()}
    return scores, labels


def validate(model: MultiTaskUNet, manifest: DatasetManifest, taxonomy: ClassTaxonomy,
             data_root, split: str = "val", tta: bool = False,
             store: TileStore | None = None) -> tuple[float | None, float | None]:
    """(macro Dice over annotated tiles, slide-level AUROC over weak slides).

    Either metric is None when its subset is missing or the AUROC is undefined
    (single-class labels); an entirely empty split is an error.
    """
    entries = manifest.split_entries(split)
    if not entries:
        raise ValueError(f"validation split {split!r} is empty")
    store = store or TileStore(manifest, data_root, taxonomy)
    predictor = ModelPredictor(model)
    seg = [e for e in entries if e.annotation_kind == "segmentation"]
    weak = [e for e in entries if e.annotation_kind == "weak"]
    dice = evaluate_segmentation_tiles(predictor, seg, store, taxonomy, tta) if seg else None
    score = None
    if weak:
        scores, labels = evaluate_detection_tiles(predictor, weak, store, taxonomy, tta)
        sids = sorted(labels)
        try:
            score = auroc([scores[s] for s in sids], [int(labels[s]) for s in sids])
        except UndefinedMetricError:
            score = None
    return dice, score


# --------------------------------------------------------------------------- #
# Training driver
# --------------------------------------------------------------------------- #

def run_training(train_config: TrainConfig, model_config: ModelConfig,
                 manifest: DatasetManifest, taxonomy: ClassTaxonomy,
                 data_root, out_dir, resume_from=None,
                 log_stream=None) -> TrainResult:
    """Train on the manifest's train split, validate per the configured
    cadence, and keep last plus best-by-validation-Dice checkpoints."""
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    if model_config.input_size != train_config.augment.crop_size:
        raise ValueError(
            f"model input size {model_config.input_size} must equal the "
            f"augmentation crop size {train_config.augment.crop_size}")
    geometry = output_geometry(model_config, train_config.augment.crop_size)

    seg_train = manifest.split_entries("train", "segmentation")
    weak_train = manifest.split_entries("train", "weak")
    if not seg_train or not weak_train:
        raise ValueError("training needs both segmentation and weak tiles")
    train_entries = seg_train + weak_train
    index_of = {id(e): i for i, e in enumerate(train_entries)}
    store = TileStore(manifest, data_root, taxonomy)

    if resume_from is not None:
        model, payload = load_checkpoint(resume_from)
        if payload["model_config"] != asdict(model_config):
            raise ValueError("checkpoint model configuration does not match")
        start_epoch = payload["epoch"] + 1
    else:
        model = build_model(model_config, seed=train_config.seed)
        payload = None
        start_epoch = 0
    model.train()
    optimizer = torch.optim.SGD(model.parameters(), lr=train_config.lr0,
                                momentum=train_config.momentum, nesterov=True,
                                weight_decay=train_config.weight_decay)
    if payload is not None and "optimizer_state" in payload:
        optimizer.load_state_dict(payload["optimizer_state"])

    logs: list[EpochLog] = []
    best_dice: float | None = None
    best_epoch = -1
    if payload is not None:
        best_dice = payload["metrics"].get("best_dice")
        best_epoch = payload["metrics"].get("best_epoch", -1)
    best_path = out / "checkpoints" / "best.pt"
    last_path = out / "checkpoints" / "last.pt"
    log_path = out / "train_log.jsonl"
    steps_done = 0
    stop = False

    for epoch in range(start_epoch, train_config.epochs):
        t0 = time.time()
        lr = lr_at_epoch(train_config, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        model.train()
        sums = np.zeros(3, dtype=np.float64)
        n_batches = 0
        for batch in balanced_batches(seg_train, weak_train, train_config.batch_size,
                                      train_config.seed, epoch):
            x, y, t = _assemble_batch(batch, store, train_config, epoch, index_of,
                                      geometry.margin, geometry.output_size,
                                      taxonomy.ignore_index)
            optimizer.zero_grad()
            out_batch = model(x)
            total, ce, bce = multi_task_loss(out_batch.seg_logits, y,
                                             out_batch.tumor_logit, t,
                                             w=train_config.loss_weight,
                                             ignore_index=taxonomy.ignore_index)
            total.backward()
            optimizer.step()
            sums += (total.item(), ce.item(), bce.item())
            n_batches += 1
            steps_done += 1
            if train_config.max_steps is not None and steps_done >= train_config.max_steps:
                stop = True
                break

        val_dice = val_auroc = None
        last_epoch = stop or epoch == train_config.epochs - 1
        has_val = bool(manifest.split_entries("val"))
        if has_val and ((epoch + 1) % train_config.validate_every == 0 or last_epoch):
            val_dice, val_auroc = validate(model, manifest, taxonomy, data_root,
                                           store=store)
        log = EpochLog(epoch=epoch, mean_loss=sums[0] / n_batches,
                       mean_ce=sums[1] / n_batches, mean_bce=sums[2] / n_batches,
                       val_dice=val_dice, val_auroc=val_auroc, lr=lr,
                       wall_time=time.time() - t0)
        logs.append(log)
        with open(log_path, "a") as fh:
            fh.write(log.to_json() + "\n")

        if val_dice is not None and (best_dice is None or val_dice > best_dice):
            best_dice, best_epoch = val_dice, epoch
            save_checkpoint(best_path, model, taxonomy.content_hash(), epoch,
                            metrics={"val_dice": val_dice, "val_auroc": val_auroc})
        save_checkpoint(last_path, model, taxonomy.content_hash(), epoch,
                        metrics={"val_dice": val_dice, "val_auroc": val_auroc,
                                 "best_dice": best_dice, "best_epoch": best_epoch},
                        optimizer=optimizer)
        if log_stream is not None:
            print(f"epoch {epoch}: loss {log.mean_loss:.4f} "
                  f"(ce {log.mean_ce:.4f} bce {log.mean_bce:.4f}) lr {lr:.5f}"
                  + (f" val_dice {val_dice:.4f}" if val_dice is not None else ""),
                  file=log_stream)
        if stop:
            break

    if not best_path.exists():
        # No validation Dice was ever computed; fall back to the last state.
        save_checkpoint(best_path, model, taxonomy.content_hash(),
                        logs[-1].epoch if logs else 0, metrics={})
    return TrainResult(best_path=str(best_path), last_path=str(last_path),
                       logs=logs, best_epoch=best_epoch, best_dice=best_dice)
