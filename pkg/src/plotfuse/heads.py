"""Task-specific output heads, losses, and anomaly scoring."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .tokenizer import ContractViolation, NormStats, depatchify, revin_invert

PAPER_HORIZONS = (96, 192, 336, 720)


class HeadConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TaskConfig:
    task: str  # classification | anomaly_detection | forecasting
    num_classes: int = 0
    horizon: int = 0
    pooling: str = "mean"  # mean | last

    def __post_init__(self):
        if self.task not in ("classification", "anomaly_detection", "forecasting"):
            raise HeadConfigError(f"unknown task {self.task!r}")
        if self.task == "classification" and self.num_classes < 2:
            raise HeadConfigError("classification needs num_classes >= 2")
        if self.task == "forecasting" and self.horizon < 1:
            raise HeadConfigError("forecasting needs horizon >= 1")
        if self.pooling not in ("mean", "last"):
            raise HeadConfigError(f"unknown pooling {self.pooling!r}")


class ClassificationHead(nn.Module):
    """Pool over tokens -> LayerNorm -> affine to class logits."""

    def __init__(self, width: int, num_classes: int, pooling: str = "mean"):
        super().__init__()
        if num_classes < 2:
            raise HeadConfigError("classification needs num_classes >= 2")
        self.pooling = pooling
        self.norm = nn.LayerNorm(width)
        self.proj = nn.Linear(width, num_classes)

    def forward(self, hidden: torch.Tensor) -> torch.Tensor:
        if hidden.ndim != 3:
            raise ContractViolation(f"expected (B, N, d), got {tuple(hidden.shape)}")
        pooled = hidden.mean(dim=1) if self.pooling == "mean" else hidden[:, -1, :]
        return self.proj(self.norm(pooled))


class ReconstructionHead(nn.Module):
    """Per-token LayerNorm -> affine to patch_len*C -> un-patch -> crop -> denormalize.

    Padding introduced by the tokenizer is cropped before scoring: padded
    steps carry no labels.
    """

    def __init__(self, width: int, patch_len: int, channels: int, length: int):
        super().__init__()
        self.patch_len = patch_len
        self.channels = channels
        self.length = length
        self.norm = nn.LayerNorm(width)
        self.proj = nn.Linear(width, patch_len * channels)

    def forward(self, hidden: torch.Tensor, stats: NormStats) -> torch.Tensor:
        if hidden.ndim != 3:
            raise ContractViolation(f"expected (B, N, d), got {tuple(hidden.shape)}")
        patches = self.proj(self.norm(hidden))  # (B, N, C*P)
        recon = depatchify(patches, self.channels, self.length)
        return revin_invert(recon, stats)


class ForecastHead(nn.Module):
    """Shared-weight per-channel head: LayerNorm -> flatten tokens -> affine to F.

    Input rows are (B*C, N, d) from channel-independent tokenization; one
    weight matrix serves every channel.
    """

    def __init__(self, width: int, num_tokens: int, horizon: int, channels: int):
        super().__init__()
        self.horizon = horizon
        self.channels = channels
        self.norm = nn.LayerNorm(width)
        self.proj = nn.Linear(num_tokens * width, horizon)

    def forward(self, hidden: torch.Tensor, stats: NormStats) -> torch.Tensor:
        if hidden.ndim != 3:
            raise ContractViolation(f"expected (B*C, N, d), got {tuple(hidden.shape)}")
        rows = hidden.shape[0]
        if rows % self.channels != 0:
            raise ContractViolation(f"effective batch {rows} not divisible by channels {self.channels}")
        flat = self.norm(hidden).reshape(rows, -1)
        pred = self.proj(flat)  # (B*C, F)
        pred = pred.reshape(rows // self.channels, self.channels, self.horizon).transpose(1, 2)  # (B, F, C)
        return revin_invert(pred, stats)


def loss_cls(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Batch-mean negative log softmax probability of the true class."""
    if logits.ndim != 2:
        raise ContractViolation(f"expected (B, K) logits, got {tuple(logits.shape)}")
    labels = labels.long()
    k = logits.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise HeadConfigError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    return F.cross_entropy(logits, labels)


def loss_recon(y: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean of squared elementwise differences (serves reconstruction and forecasting)."""
    if y.shape != target.shape:
        raise ContractViolation(f"shape mismatch: {tuple(y.shape)} vs {tuple(target.shape)}")
    return ((y - target) ** 2).mean()


def anomaly_score(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Per-step channel-mean squared error, (B, L, C) -> (B, L)."""
    if x.shape != x_hat.shape:
        raise ContractViolation(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return ((x - x_hat) ** 2).mean(dim=2)


def merge_window_scores(
    scores: np.ndarray, origins: list[tuple[str, int]], series_length: int
) -> np.ndarray:
    """Average overlapping per-window scores back onto original step indices.

    Steps never covered by a window get score 0.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or len(origins) != scores.shape[0]:
        raise ContractViolation("scores must be (B, L) with one origin per window")
    total = np.zeros(series_length, dtype=np.float64)
    count = np.zeros(series_length, dtype=np.int64)
    win_len = scores.shape[1]
    for row, (_, start) in enumerate(origins):
        stop = start + win_len
        if start < 0 or stop > series_length:
            raise ContractViolation(f"window [{start}, {stop}) escapes series of length {series_length}")
        total[start:stop] += scores[row]
        count[start:stop] += 1
    covered = count > 0
    total[covered] /= count[covered]
    return total
