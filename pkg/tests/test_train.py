import json
import math

import numpy as np
import pytest
import torch

from histoseg.augment import AugmentConfig
from histoseg.core import ClassTaxonomy
from histoseg.dataprep import SyntheticSpec, generate_synthetic_dataset, prepare_dataset
from histoseg.model import ModelConfig, load_checkpoint
from histoseg.train import (
    BalancedBatch,
    EpochLog,
    TileStore,
    TrainConfig,
    balanced_batches,
    lr_at_epoch,
    multi_task_loss,
    run_training,
    validate,
)

TAX = ClassTaxonomy.default()


class TestLoss:
    @staticmethod
    def random_inputs(seed=0, batch=4, classes=5, size=6, annotated=True):
        g = torch.Generator().manual_seed(seed)
        logits = torch.randn(batch, classes, size, size, generator=g)
        if annotated:
            mask = torch.randint(0, classes, (batch, size, size), generator=g)
            mask[0, 0, 0] = 255  # some ignore
        else:
            mask = torch.full((batch, size, size), 255, dtype=torch.long)
        tumor_logit = torch.randn(batch, generator=g)
        label = torch.randint(0, 2, (batch,), generator=g)
        return logits, mask, tumor_logit, label

    def test_endpoints(self):
        logits, mask, tl, lab = self.random_inputs()
        total1, ce, _ = multi_task_loss(logits, mask, tl, lab, w=1.0)
        assert total1.item() == pytest.approx(ce.item(), abs=1e-12)
        total0, _, bce = multi_task_loss(logits, mask, tl, lab, w=0.0)
        assert total0.item() == pytest.approx(bce.item(), abs=1e-12)

    def test_affine_in_w(self):
        logits, mask, tl, lab = self.random_inputs(3)
        _, ce, bce = multi_task_loss(logits, mask, tl, lab, w=0.5)
        for w in (0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0):
            total, _, _ = multi_task_loss(logits, mask, tl, lab, w=w)
            expected = w * ce.item() + (1 - w) * bce.item()
            assert total.item() == pytest.approx(expected, abs=1e-12)

    def test_all_ignore_mask_gives_zero_ce(self):
        logits, mask, tl, lab = self.random_inputs(annotated=False)
        total, ce, bce = multi_task_loss(logits, mask, tl, lab, w=0.5)
        assert ce.item() == 0.0
        assert total.item() == pytest.approx(0.5 * bce.item(), abs=1e-12)

    def test_uniform_logits_give_log_c(self):
        for classes in (2, 5, 9):
            logits = torch.zeros(2, classes, 4, 4)
            mask = torch.randint(0, classes, (2, 4, 4))
            _, ce, _ = multi_task_loss(logits, mask, torch.zeros(2), torch.zeros(2))
            assert ce.item() == pytest.approx(math.log(classes), rel=1e-6)

    def test_ce_gradient_flows(self):
        logits, mask, tl, lab = self.random_inputs(5)
        logits.requires_grad_(True)
        total, _, _ = multi_task_loss(logits, mask, tl, lab, w=0.5)
        total.backward()
        assert logits.grad is not None and torch.isfinite(logits.grad).all()

    def test_bad_label_rejected(self):
        logits, mask, tl, _ = self.random_inputs()
        with pytest.raises(ValueError, match="labels"):
            multi_task_loss(logits, mask, tl, torch.tensor([0.0, 1.0, 2.0, 0.0]))

    def test_uncropped_mask_rejected(self):
        logits, mask, tl, lab = self.random_inputs()
        big = torch.zeros(4, 10, 10, dtype=torch.long)
        with pytest.raises(ValueError, match="center-crop"):
            multi_task_loss(logits, big, tl, lab)


class TestLrSchedule:
    def test_closed_form(self):
        cfg = TrainConfig()
        assert lr_at_epoch(cfg, 0) == 0.2
        assert lr_at_epoch(cfg, 1) == pytest.approx(0.194)
        assert lr_at_epoch(cfg, 100) == pytest.approx(0.2 * 0.97 ** 100)
        assert lr_at_epoch(cfg, 100) == pytest.approx(9.52e-3, rel=1e-3)

    def test_exact_for_all_epochs(self):
        cfg = TrainConfig(lr0=0.2, gamma=0.97)
        for e in range(101):
            assert lr_at_epoch(cfg, e) == 0.2 * 0.97 ** e

    def test_negative_epoch_rejected(self):
        with pytest.raises(ValueError):
            lr_at_epoch(TrainConfig(), -1)


class TestBalancedBatches:
    def test_composition_and_coverage(self):
        seg = [f"s{i}" for i in range(130)]
        weak = [f"w{i}" for i in range(500)]
        batches = balanced_batches(seg, weak, 16, seed=0, epoch=0)
        assert len(batches) == math.ceil(130 / 8)
        seen = []
        for b in batches[:-1]:
            assert len(b.seg) == 8 and len(b.weak) == 8 and not b.short
            seen.extend(b.seg)
        last = batches[-1]
        assert last.short and len(last.seg) == 130 % 8 and len(last.weak) == 8
        seen.extend(last.seg)
        assert sorted(seen) == sorted(seg)  # every seg tile exactly once

    def test_paper_scale_batch_count(self):
        # Index-only simulation at the full training-set size.
        seg = np.arange(59611)
        weak = np.arange(100000)
        batches = balanced_batches(list(seg), list(weak), 128, seed=1, epoch=0)
        assert len(batches) == 932
        assert all(len(b.seg) == 64 and len(b.weak) == 64 for b in batches[:-1])

    def test_undersampling_distinct(self):
        seg = list(range(64))
        weak = [f"w{i}" for i in range(1000)]
        batches = balanced_batches(seg, weak, 128, seed=3, epoch=0)
        assert len(batches) == 1
        assert len(set(batches[0].weak)) == 64

    def test_fresh_draw_per_epoch(self):
        seg = list(range(10))
        weak = [f"w{i}" for i in range(100)]
        a = balanced_batches(seg, weak, 4, seed=5, epoch=0)
        b = balanced_batches(seg, weak, 4, seed=5, epoch=1)
        assert [x.weak for x in a] != [x.weak for x in b]
        again = balanced_batches(seg, weak, 4, seed=5, epoch=0)
        assert [x.weak for x in a] == [x.weak for x in again]
        assert [x.seg for x in a] == [x.seg for x in again]

    def test_small_weak_pool_recycled(self):
        batches = balanced_batches(list(range(20)), ["w0", "w1", "w2"], 8, seed=0, epoch=0)
        for b in batches:
            assert len(b.weak) == len(b.seg) or b.short

    def test_empty_sets_rejected(self):
        with pytest.raises(ValueError):
            balanced_batches([], [1], 4, 0, 0)
        with pytest.raises(ValueError):
            balanced_batches([1], [], 4, 0, 0)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    """Prepared synthetic dataset plus a very short training run."""
    root = tmp_path_factory.mktemp("train")
    spec = SyntheticSpec(n_segmentation_slides=3, n_weak_slides=2, n_positive=2,
                         n_test_slides=0, seg_size=900, weak_size=2400, seed=12)
    slides, _ = generate_synthetic_dataset(spec, TAX, root / "data")
    manifest, _ = prepare_dataset(slides, TAX, root / "data", root / "prep", seed=12)
    model_config = ModelConfig(num_classes=TAX.num_classes, base_channels=4,
                               levels=2, input_size=260)
    train_config = TrainConfig(epochs=2, batch_size=4, lr0=0.01, seed=12,
                               validate_every=1, max_steps=None,
                               augment=AugmentConfig(stats_bank=None,
                                                     enable_stat_transfer=False))
    result = run_training(train_config, model_config, manifest, TAX,
                          root / "prep", root / "run")
    return root, manifest, model_config, train_config, result


class TestTraining:
    def test_logs_and_checkpoints_exist(self, tiny_run):
        root, manifest, model_config, train_config, result = tiny_run
        assert len(result.logs) == 2
        assert (root / "run" / "train_log.jsonl").exists()
        lines = (root / "run" / "train_log.jsonl").read_text().splitlines()
        assert len(lines) == 2
        doc = json.loads(lines[0])
        assert {"epoch", "mean_loss", "mean_ce", "mean_bce", "lr"} <= set(doc)

    def test_lr_follows_schedule(self, tiny_run):
        _, _, _, train_config, result = tiny_run
        for log in result.logs:
            assert log.lr == lr_at_epoch(train_config, log.epoch)

    def test_checkpoint_loads_and_metrics_recorded(self, tiny_run):
        root, _, model_config, _, result = tiny_run
        model, payload = load_checkpoint(result.last_path)
        assert model.config == model_config
        assert payload["epoch"] == 1
        assert payload["taxonomy_hash"] == TAX.content_hash()

    def test_resume_continues_lr_schedule(self, tiny_run):
        root, manifest, model_config, train_config, result = tiny_run
        resumed_config = TrainConfig(**{**train_config.__dict__, "epochs": 3})
        resumed = run_training(resumed_config, model_config, manifest, TAX,
                               root / "prep", root / "resume",
                               resume_from=result.last_path)
        assert [log.epoch for log in resumed.logs] == [2]
        assert resumed.logs[0].lr == lr_at_epoch(train_config, 2)

    def test_validate_returns_metrics(self, tiny_run):
        root, manifest, model_config, _, result = tiny_run
        model, _ = load_checkpoint(result.last_path)
        dice, det = validate(model, manifest, TAX, root / "prep", split="val")
        assert dice is not None and 0.0 <= dice <= 1.0
        if det is not None:
            assert 0.0 <= det <= 1.0

    def test_validate_empty_split_rejected(self, tiny_run):
        root, manifest, _, _, result = tiny_run
        model, _ = load_checkpoint(result.last_path)
        with pytest.raises(ValueError, match="empty"):
            validate(model, manifest, TAX, root / "prep", split="nope")

    def test_training_is_deterministic(self, tiny_run):
        root, manifest, model_config, train_config, _ = tiny_run
        torch.set_num_threads(torch.get_num_threads())
        a = run_training(train_config, model_config, manifest, TAX,
                         root / "prep", root / "det_a")
        b = run_training(train_config, model_config, manifest, TAX,
                         root / "prep", root / "det_b")
        assert [l.mean_loss for l in a.logs] == [l.mean_loss for l in b.logs]
        assert [l.mean_ce for l in a.logs] == [l.mean_ce for l in b.logs]

    def test_mismatched_crop_rejected(self, tiny_run):
        root, manifest, model_config, train_config, _ = tiny_run
        bad = TrainConfig(**{**train_config.__dict__,
                             "augment": AugmentConfig(crop_size=200)})
        with pytest.raises(ValueError, match="crop size"):
            run_training(bad, model_config, manifest, TAX, root / "prep", root / "bad")
