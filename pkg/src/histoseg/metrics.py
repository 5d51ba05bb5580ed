"""Segmentation and detection metrics plus run-comparison reports.

Multi-class Dice is the macro average of per-class Dice over classes that are
present (in prediction or ground truth); classes absent from both are skipped.
AUROC is the exact rank statistic (probability that a random positive outranks
a random negative, ties counted 1/2), not a trapezoidal approximation.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .core import ClassTaxonomy


class UndefinedMetricError(ValueError):
    """Raised when a metric has no defined value for the given inputs."""


# --------------------------------------------------------------------------- #
# Dice
# --------------------------------------------------------------------------- #

class DiceAccumulator:
    """Accumulates per-class intersection and support over many (pred, gt)
    pairs so a set of tiles/slides can be scored as one population.

    Ground-truth ignore pixels are excluded from both prediction and ground
    truth before counting.
    """

    def __init__(self, num_classes: int, ignore_index: int):
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.intersection = np.zeros(num_classes, dtype=np.int64)
        self.pred_size = np.zeros(num_classes, dtype=np.int64)
        self.gt_size = np.zeros(num_classes, dtype=np.int64)

    def update(self, pred: np.ndarray, gt: np.ndarray):
        if pred.shape != gt.shape:
            raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
        keep = gt != self.ignore_index
        p = pred[keep].astype(np.int64)
        g = gt[keep].astype(np.int64)
        self.pred_size += np.bincount(p, minlength=self.num_classes)[: self.num_classes]
        self.gt_size += np.bincount(g, minlength=self.num_classes)[: self.num_classes]
        agree = p[p == g]
        self.intersection += np.bincount(agree, minlength=self.num_classes)[: self.num_classes]

    def per_class(self) -> dict[int, float | None]:
        """Dice per class index; None when the class is absent from both sides."""
        out = {}
        for c in range(self.num_classes):
            denom = self.pred_size[c] + self.gt_size[c]
            out[c] = None if denom == 0 else 2.0 * self.intersection[c] / denom
        return out

    def macro(self, include: list[int] | None = None) -> float:
        """Unweighted mean over non-absent classes (optionally restricted)."""
        values = [
            v for c, v in self.per_class().items()
            if v is not None and (include is None or c in include)
        ]
        if not values:
            raise UndefinedMetricError("no class is present in prediction or ground truth")
        return float(np.mean(values))


def dice_per_class(pred: np.ndarray, gt: np.ndarray, class_index: int,
                   ignore_index: int = 255) -> float | None:
    """2|A∩B| / (|A|+|B|) for one class over non-ignore pixels; None if the
    class is absent from both prediction and ground truth."""
    num_classes = class_index + 1
    acc = DiceAccumulator(num_classes, ignore_index)
    acc.update(pred, gt)
    return acc.per_class()[class_index]


def multi_class_dice(pred: np.ndarray, gt: np.ndarray, taxonomy: ClassTaxonomy,
                     include_background: bool = True) -> float:
    acc = DiceAccumulator(taxonomy.num_classes, taxonomy.ignore_index)
    acc.update(pred, gt)
    include = None
    if not include_background:
        include = [c for c in range(taxonomy.num_classes) if c != taxonomy.background_index]
    return acc.macro(include)


# --------------------------------------------------------------------------- #
# AUROC
# --------------------------------------------------------------------------- #

def auroc(scores, labels) -> float:
    """Exact AUROC via the Mann-Whitney rank statistic with average ranks
    for ties. Requires at least one positive and one negative label."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-d and the same length")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs at least one positive and one negative label")
    ranks = rankdata(scores)
    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# --------------------------------------------------------------------------- #
# Reports
# --------------------------------------------------------------------------- #

@dataclass
class RunMetrics:
    configuration: str
    split: str  # e.g. "internal" / "external"
    dice: float | None = None
    auroc: float | None = None


@dataclass
class ReportRow:
    configuration: str
    split: str
    n_runs: int
    dice_mean: float | None
    dice_std: float | None
    auroc_mean: float | None
    auroc_std: float | None


@dataclass
class EvalReport:
    rows: list[ReportRow] = field(default_factory=list)


def _mean_std(values: list[float]) -> tuple[float | None, float | None]:
    if not values:
        return None, None
    mean = float(np.mean(values))
    # Sample (n-1) standard deviation; undefined for a single run.
    std = float(np.std(values, ddof=1)) if len(values) > 1 else None
    return mean, std


def build_report(runs: list[RunMetrics]) -> EvalReport:
    """Aggregate repeated runs per (configuration, split) into mean +- std."""
    if not runs:
        raise ValueError("at least one run is required")
    groups: dict[tuple[str, str], list[RunMetrics]] = {}
    for run in runs:
        groups.setdefault((run.configuration, run.split), []).append(run)
    rows = []
    for (config, split), members in sorted(groups.items()):
        dice_mean, dice_std = _mean_std([m.dice for m in members if m.dice is not None])
        auroc_mean, auroc_std = _mean_std([m.auroc for m in members if m.auroc is not None])
        rows.append(ReportRow(config, split, len(members),
                              dice_mean, dice_std, auroc_mean, auroc_std))
    return EvalReport(rows)


def _fmt(mean: float | None, std: float | None) -> str:
    if mean is None:
        return "-"
    if std is None:
        return f"{mean:.4f}"
    return f"{mean:.4f}+-{std:.4f}"


def render_report_text(report: EvalReport) -> str:
    header = ["configuration", "split", "n_runs", "multi_class_dice", "auroc"]
    rows = [header]
    for r in report.rows:
        rows.append([r.configuration, r.split, str(r.n_runs),
                     _fmt(r.dice_mean, r.dice_std), _fmt(r.auroc_mean, r.auroc_std)])
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_report_csv(report: EvalReport, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["configuration", "split", "n_runs",
                         "dice_mean", "dice_std", "auroc_mean", "auroc_std"])
        for r in report.rows:
            writer.writerow([r.configuration, r.split, r.n_runs,
                             *("" if v is None else f"{v:.6f}"
                               for v in (r.dice_mean, r.dice_std, r.auroc_mean, r.auroc_std))])


def load_run_metrics(path) -> RunMetrics:
    doc = json.loads(Path(path).read_text())
    return RunMetrics(
        configuration=doc.get("configuration", "default"),
        split=doc.get("split", "internal"),
        dice=doc.get("multi_class_dice"),
        auroc=doc.get("auroc"),
    )
