"""Parametric multi-task U-Net with valid (unpadded) convolutions.

The encoder doubles channels per level (32..512 for the defaults), the decoder
mirrors it with transposed convolutions and center-cropped skip connections,
and a fully connected head on the pooled bottleneck emits one tumor logit per
image. Because convolutions are unpadded the prediction map is smaller than
the input; ``output_geometry`` propagates sizes symbolically so callers can
plan padding and ground-truth cropping without running the network.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import torch
import torch.nn as nn


class GeometryError(ValueError):
    """Input size cannot flow through the configured network."""


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    base_channels: int = 32
    levels: int = 5
    convs_per_block: int = 2
    kernel_size: int = 3
    input_size: int = 260
    norm: str = "none"  # "none" | "batch" | "group"; norm stabilizes small desk runs

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError("at least 2 levels (1 pooling) required")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel size must be odd")
        if self.num_classes < 2:
            raise ValueError("at least 2 classes required")
        if self.norm not in ("none", "batch", "group"):
            raise ValueError(f"unknown norm {self.norm!r}")

    @property
    def bottleneck_channels(self) -> int:
        return self.base_channels * 2 ** (self.levels - 1)

    def validate_geometry(self):
        report = output_geometry(self, self.input_size)
        if report.output_size < 4:
            raise GeometryError(
                f"configured input {self.input_size} yields output "
                f"{report.output_size} < 4; increase the input size")
        return report


@dataclass(frozen=True)
class GeometryReport:
    input_size: int
    output_size: int
    margin: int
    stages: tuple[tuple[str, int], ...]


class ModelOutput(NamedTuple):
    seg_logits: torch.Tensor   # (batch, num_classes, out_h, out_w)
    tumor_logit: torch.Tensor  # (batch,)


def output_geometry(config: ModelConfig, input_size: int) -> GeometryReport:
    """Propagate a square input size through the network stage by stage.

    Each valid conv subtracts kernel_size - 1, each 2x2 pool halves with
    floor, each up-step doubles; skip connections are center-cropped to the
    decoder size. Raises GeometryError naming the first stage that underflows.
    """
    k = config.kernel_size
    shrink = k - 1
    size = int(input_size)
    if size < 1:
        raise GeometryError("input size must be positive")
    stages: list[tuple[str, int]] = [("input", size)]
    skips: list[int] = []

    def conv(level: int, j: int, size: int) -> int:
        if size < k:
            raise GeometryError(
                f"input {input_size} too small: level {level} conv {j} "
                f"would see size {size} (needs >= {k})")
        return size - shrink

    for level in range(1, config.levels):
        for j in range(1, config.convs_per_block + 1):
            size = conv(level, j, size)
            stages.append((f"level {level} conv {j}", size))
        skips.append(size)
        if size < 2:
            raise GeometryError(
                f"input {input_size} too small: level {level} pool "
                f"would see size {size} (needs >= 2)")
        size = size // 2
        stages.append((f"level {level} pool", size))

    for j in range(1, config.convs_per_block + 1):
        size = conv(config.levels, j, size)
        stages.append((f"level {config.levels} conv {j}", size))

    for step, skip in enumerate(reversed(skips), start=1):
        size *= 2
        stages.append((f"up {step}", size))
        if skip < size:
            raise GeometryError(
                f"input {input_size} too small: up {step} produces size {size} "
                f"but the skip connection is only {skip}")
        for j in range(1, config.convs_per_block + 1):
            size = conv(config.levels + step, j, size)
            stages.append((f"up {step} conv {j}", size))

    if (input_size - size) % 2 != 0:
        raise GeometryError(
            f"input {input_size} gives output {size}, an odd difference; "
            f"use an even input size so the margin is symmetric")
    return GeometryReport(input_size=int(input_size), output_size=size,
                          margin=(input_size - size) // 2, stages=tuple(stages))


# --------------------------------------------------------------------------- #
# Network
# --------------------------------------------------------------------------- #

class _ConvBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, n_convs: int, kernel: int,
                 norm: str = "none"):
        super().__init__()
        layers = []
        for i in range(n_convs):
            layers.append(nn.Conv2d(in_ch if i == 0 else out_ch, out_ch, kernel))
            if norm == "batch":
                layers.append(nn.BatchNorm2d(out_ch))
            elif norm == "group":
                layers.append(nn.GroupNorm(4 if out_ch % 4 == 0 else 1, out_ch))
            layers.append(nn.ReLU(inplace=True))
        self.block = nn.Sequential(*layers)

    def forward(self, x):
        return self.block(x)


def _center_crop(t: torch.Tensor, h: int, w: int) -> torch.Tensor:
    dh, dw = t.shape[-2] - h, t.shape[-1] - w
    return t[..., dh // 2:dh // 2 + h, dw // 2:dw // 2 + w]


class MultiTaskUNet(nn.Module):
    """Valid-convolution U-Net with a segmentation head and a single-logit
    tumor classifier on the globally pooled bottleneck."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        chs = [config.base_channels * 2 ** i for i in range(config.levels)]
        self.encoders = nn.ModuleList()
        in_ch = 3
        for ch in chs[:-1]:
            self.encoders.append(_ConvBlock(in_ch, ch, config.convs_per_block,
                                            config.kernel_size, config.norm))
            in_ch = ch
        self.pool = nn.MaxPool2d(2, 2)
        self.bottleneck = _ConvBlock(in_ch, chs[-1], config.convs_per_block,
                                     config.kernel_size, config.norm)
        self.upconvs = nn.ModuleList()
        self.decoders = nn.ModuleList()
        in_ch = chs[-1]
        for ch in reversed(chs[:-1]):
            self.upconvs.append(nn.ConvTranspose2d(in_ch, ch, 2, stride=2))
            self.decoders.append(_ConvBlock(2 * ch, ch, config.convs_per_block,
                                            config.kernel_size, config.norm))
            in_ch = ch
        self.seg_head = nn.Conv2d(in_ch, config.num_classes, 1)
        self.classifier = nn.Linear(chs[-1], 1)

    def forward(self, x: torch.Tensor) -> ModelOutput:
        for dim in (x.shape[-2], x.shape[-1]):
            output_geometry(self.config, dim)  # raises with the failing stage
        x = x * 2.0 - 1.0  # unit-range input, centered for the unnormalized stack
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        tumor_logit = self.classifier(x.mean(dim=(2, 3))).squeeze(1)
        for up, dec, skip in zip(self.upconvs, self.decoders, reversed(skips)):
            x = up(x)
            skip = _center_crop(skip, x.shape[-2], x.shape[-1])
            x = dec(torch.cat([skip, x], dim=1))
        return ModelOutput(seg_logits=self.seg_head(x), tumor_logit=tumor_logit)


def build_model(config: ModelConfig, seed: int = 0) -> MultiTaskUNet:
    """Deterministically initialized network; also validates the configured
    input geometry up front."""
    config.validate_geometry()
    torch.manual_seed(seed)
    return MultiTaskUNet(config)


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# --------------------------------------------------------------------------- #
# Checkpoints
# --------------------------------------------------------------------------- #

def save_checkpoint(path, model: MultiTaskUNet, taxonomy_hash: str, epoch: int,
                    metrics: dict | None = None, optimizer: torch.optim.Optimizer | None = None,
                    extra: dict | None = None):
    payload = {
        "model_config": asdict(model.config),
        "taxonomy_hash": taxonomy_hash,
        "epoch": int(epoch),
        "metrics": metrics or {},
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    if optimizer is not None:
        payload["optimizer_state"] = optimizer.state_dict()
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[MultiTaskUNet, dict]:
    """Rebuild the model from a checkpoint; returns (model, payload)."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    config = ModelConfig(**payload["model_config"])
    model = MultiTaskUNet(config)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
