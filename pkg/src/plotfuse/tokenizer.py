"""Instance normalization and non-overlapping patch tokenization of the raw series.

The numerical branch: normalize per instance and channel (statistics kept for
later denormalization of reconstructions/forecasts), right-pad by repeating
the final step, cut the series into ``num_tokens`` non-overlapping patches,
and map each patch to the backbone width with a linear projection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

REVIN_EPS = 1e-5


class ContractViolation(ValueError):
    """Shape/width mismatch between pipeline stages."""


@dataclass
class NormStats:
    """Per-instance, per-channel normalization statistics, shapes (B, 1, C)."""

    mu: torch.Tensor
    sigma: torch.Tensor
    eps: float = REVIN_EPS


@dataclass
class TokenSequence:
    """A batch of embedded tokens of one modality in the backbone width."""

    tokens: torch.Tensor  # (B', N, d)
    modality: str  # ts | visual | fused
    effective_batch: int
    grid: Optional[tuple[int, int]] = None  # (rows, cols) for visual tokens

    def __post_init__(self):
        if self.tokens.ndim != 3:
            raise ContractViolation(f"token tensor must be (B, N, d), got {tuple(self.tokens.shape)}")
        if self.modality not in ("ts", "visual", "fused"):
            raise ContractViolation(f"unknown modality {self.modality!r}")


@dataclass(frozen=True)
class TokenizerConfig:
    num_tokens: int  # tokens per sequence, tied to the plot's visual columns
    patch_mode: str = "mixed"  # mixed | channel_independent
    width: int = 128  # backbone feature dimension

    def __post_init__(self):
        if self.num_tokens < 1:
            raise ContractViolation("num_tokens must be >= 1")
        if self.patch_mode not in ("mixed", "channel_independent"):
            raise ContractViolation(f"unknown patch_mode {self.patch_mode!r}")
        if self.width < 1:
            raise ContractViolation("width must be >= 1")

    def patch_len(self, length: int) -> int:
        """Patch size ceil(L / num_tokens); the padded length is num_tokens * patch_len."""
        if self.num_tokens > length:
            raise ContractViolation(f"num_tokens {self.num_tokens} > series length {length}: patches would be pure padding")
        return math.ceil(length / self.num_tokens)


def revin_fit_transform(x: torch.Tensor, eps: float = REVIN_EPS) -> tuple[torch.Tensor, NormStats]:
    """Normalize (B, L, C) per instance and channel; population variance.

    sigma = sqrt(var + eps), so constant channels normalize to zero instead
    of dividing by zero.
    """
    if x.ndim != 3:
        raise ContractViolation(f"expected (B, L, C), got {tuple(x.shape)}")
    if x.shape[1] < 2:
        raise ContractViolation("need at least 2 time steps")
    mu = x.mean(dim=1, keepdim=True)
    var = x.var(dim=1, keepdim=True, unbiased=False)
    sigma = torch.sqrt(var + eps)
    return (x - mu) / sigma, NormStats(mu=mu, sigma=sigma, eps=eps)


def revin_invert(y: torch.Tensor, stats: NormStats) -> torch.Tensor:
    """Map normalized values back: y * sigma + mu, broadcast over time."""
    if y.ndim != 3:
        raise ContractViolation(f"expected (B, T, C), got {tuple(y.shape)}")
    if y.shape[0] != stats.mu.shape[0] or y.shape[2] != stats.mu.shape[2]:
        raise ContractViolation(
            f"stats were fit for (B={stats.mu.shape[0]}, C={stats.mu.shape[2]}), got (B={y.shape[0]}, C={y.shape[2]})"
        )
    return y * stats.sigma + stats.mu


def pad_to_patches(x_norm: torch.Tensor, num_tokens: int) -> tuple[torch.Tensor, int]:
    """Right-pad (B, L, C) by repeating the final step until num_tokens divides length."""
    length = x_norm.shape[1]
    if num_tokens > length:
        raise ContractViolation(f"num_tokens {num_tokens} > series length {length}: patches would be pure padding")
    patch_len = math.ceil(length / num_tokens)
    padded_len = num_tokens * patch_len
    if padded_len > length:
        tail = x_norm[:, -1:, :].expand(-1, padded_len - length, -1)
        x_norm = torch.cat([x_norm, tail], dim=1)
    return x_norm, patch_len


def patchify(x_norm: torch.Tensor, cfg: TokenizerConfig) -> torch.Tensor:
    """Cut (B, L, C) into non-overlapping patches.

    mixed: (B, num_tokens, patch_len * C), patch t holding steps
    [t*patch_len, (t+1)*patch_len) of every channel (channel-major layout).
    channel_independent: (B*C, num_tokens, patch_len) with channels unrolled
    into the batch dimension (row b*C + c holds channel c of instance b).
    """
    if x_norm.ndim != 3:
        raise ContractViolation(f"expected (B, L, C), got {tuple(x_norm.shape)}")
    padded, patch_len = pad_to_patches(x_norm, cfg.num_tokens)
    b, _, c = padded.shape
    # (B, N, P, C) -> channel-major within a patch
    patches = padded.reshape(b, cfg.num_tokens, patch_len, c)
    if cfg.patch_mode == "mixed":
        return patches.permute(0, 1, 3, 2).reshape(b, cfg.num_tokens, c * patch_len)
    return patches.permute(0, 3, 1, 2).reshape(b * c, cfg.num_tokens, patch_len)


def depatchify(patches: torch.Tensor, channels: int, length: int) -> torch.Tensor:
    """Invert mixed-mode patchify: (B, N, C*P) -> (B, L, C), cropping padding."""
    if patches.ndim != 3:
        raise ContractViolation(f"expected (B, N, C*P), got {tuple(patches.shape)}")
    b, n, flat = patches.shape
    if flat % channels != 0:
        raise ContractViolation(f"last dim {flat} not divisible by channels {channels}")
    patch_len = flat // channels
    x = patches.reshape(b, n, channels, patch_len).permute(0, 1, 3, 2).reshape(b, n * patch_len, channels)
    if length > n * patch_len:
        raise ContractViolation(f"cannot crop to length {length} from {n * patch_len} padded steps")
    return x[:, :length, :]


class TimeSeriesTokenizer(nn.Module):
    """Patchify + linear projection to the backbone width."""

    def __init__(self, cfg: TokenizerConfig, length: int, channels: int):
        super().__init__()
        self.cfg = cfg
        self.length = length
        self.channels = channels
        patch_len = cfg.patch_len(length)
        in_width = patch_len * channels if cfg.patch_mode == "mixed" else patch_len
        self.patch_len = patch_len
        self.proj = nn.Linear(in_width, cfg.width)

    def forward(self, x_norm: torch.Tensor) -> TokenSequence:
        patches = patchify(x_norm, self.cfg)
        return project_tokens(patches, self.proj)


def project_tokens(patches: torch.Tensor, proj: nn.Linear) -> TokenSequence:
    """Affine map per patch -> TokenSequence(modality=ts)."""
    if patches.ndim != 3:
        raise ContractViolation(f"expected (B', N, W), got {tuple(patches.shape)}")
    if patches.shape[-1] != proj.in_features:
        raise ContractViolation(f"patch width {patches.shape[-1]} != projection input width {proj.in_features}")
    return TokenSequence(tokens=proj(patches), modality="ts", effective_batch=patches.shape[0])
