"""Pluggable vision encoders over rendered plots, plus the plot projection.

Both builtin encoders satisfy the same contract: images (B, 3, H, W) in, a
row-major patch grid (B, q*r, d_v) out, so downstream alignment is
encoder-agnostic. The transformer encoder embeds P x P pixel tiles; the
convolutional pyramid reaches the same q x r geometry through stride-2 stages.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from .archive import load_module_archive
from .layers import TransformerBlock
from .tokenizer import ContractViolation, TokenSequence


class VisionConfigError(ValueError):
    pass


@dataclass(frozen=True)
class VisionEncoderSpec:
    kind: str = "vit"  # vit | conv
    pixel_patch: int = 16
    width: int = 128  # d_v
    depth: int = 4
    heads: int = 4
    weights_source: str = "random_init"  # random_init | external_archive
    archive_path: Optional[str] = None
    frozen: bool = True

    def __post_init__(self):
        if self.kind not in ("vit", "conv"):
            raise VisionConfigError(f"unknown encoder kind {self.kind!r}")
        if self.pixel_patch < 1:
            raise VisionConfigError("pixel_patch must be >= 1")
        if self.weights_source not in ("random_init", "external_archive"):
            raise VisionConfigError(f"unknown weights_source {self.weights_source!r}")
        if self.weights_source == "external_archive" and not self.archive_path:
            raise VisionConfigError("external_archive needs archive_path")


@dataclass
class PatchGrid:
    """Row-major patch embeddings: token n sits at (n // cols, n % cols)."""

    tokens: torch.Tensor  # (B, N_vis, d_v)
    rows: int  # q = H / P
    cols: int  # r = W / P

    def __post_init__(self):
        if self.tokens.ndim != 3 or self.tokens.shape[1] != self.rows * self.cols:
            raise ContractViolation(
                f"grid tokens {tuple(self.tokens.shape)} do not match {self.rows}x{self.cols} cells"
            )


def grid_cell(index: int, cols: int) -> tuple[int, int]:
    return index // cols, index % cols


def cell_index(row: int, col: int, cols: int) -> int:
    return row * cols + col


def check_divisibility(spec: VisionEncoderSpec, height: int, width: int) -> tuple[int, int]:
    if height % spec.pixel_patch or width % spec.pixel_patch:
        raise VisionConfigError(
            f"image size {height}x{width} not divisible by pixel_patch {spec.pixel_patch}"
        )
    return height // spec.pixel_patch, width // spec.pixel_patch


class ViTEncoder(nn.Module):
    """Patch linear embedding + learned 2-D positional embeddings + pre-norm blocks.

    No class token is created; the output is exactly the spatial grid.
    """

    def __init__(self, spec: VisionEncoderSpec, height: int, width: int):
        super().__init__()
        rows, cols = check_divisibility(spec, height, width)
        self.spec = spec
        self.rows = rows
        self.cols = cols
        self.patch_embed = nn.Conv2d(3, spec.width, kernel_size=spec.pixel_patch, stride=spec.pixel_patch)
        self.pos_embed = nn.Parameter(torch.randn(1, rows * cols, spec.width) * 0.02)
        self.blocks = nn.ModuleList(TransformerBlock(spec.width, spec.heads) for _ in range(spec.depth))
        self.norm = nn.LayerNorm(spec.width)

    def forward(self, images: torch.Tensor) -> PatchGrid:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ContractViolation(f"expected (B, 3, H, W), got {tuple(images.shape)}")
        x = self.patch_embed(images)  # (B, d_v, q, r)
        x = x.flatten(2).transpose(1, 2)  # row-major (B, q*r, d_v)
        x = x + self.pos_embed
        for block in self.blocks:
            x, _ = block(x)
        return PatchGrid(tokens=self.norm(x), rows=self.rows, cols=self.cols)


class ConvPyramidEncoder(nn.Module):
    """Stride-2 conv stages down to the q x r grid; pixel_patch must be a power of two."""

    def __init__(self, spec: VisionEncoderSpec, height: int, width: int):
        super().__init__()
        rows, cols = check_divisibility(spec, height, width)
        patch = spec.pixel_patch
        if patch & (patch - 1) != 0:
            raise VisionConfigError(f"conv encoder needs a power-of-two pixel_patch, got {patch}")
        self.spec = spec
        self.rows = rows
        self.cols = cols
        stages = []
        channels = 3
        n_stages = patch.bit_length() - 1
        for i in range(n_stages):
            out_ch = min(spec.width, 16 * (2**i))
            stages.append(nn.Conv2d(channels, out_ch, kernel_size=3, stride=2, padding=1))
            stages.append(nn.GroupNorm(num_groups=min(8, out_ch), num_channels=out_ch))
            stages.append(nn.GELU())
            channels = out_ch
        self.stages = nn.Sequential(*stages)
        self.head_conv = nn.Conv2d(channels, spec.width, kernel_size=1)

    def forward(self, images: torch.Tensor) -> PatchGrid:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ContractViolation(f"expected (B, 3, H, W), got {tuple(images.shape)}")
        x = self.head_conv(self.stages(images))  # (B, d_v, q, r)
        if x.shape[-2:] != (self.rows, self.cols):
            raise ContractViolation(f"feature map {tuple(x.shape[-2:])} != grid ({self.rows}, {self.cols})")
        return PatchGrid(tokens=x.flatten(2).transpose(1, 2), rows=self.rows, cols=self.cols)


def build_vision_encoder(spec: VisionEncoderSpec, height: int, width: int) -> nn.Module:
    encoder = ViTEncoder(spec, height, width) if spec.kind == "vit" else ConvPyramidEncoder(spec, height, width)
    if spec.weights_source == "external_archive":
        load_module_archive(spec.archive_path, encoder, lambda m, img: m(img).tokens)
    if spec.frozen:
        encoder.requires_grad_(False)
    return encoder


def encode_image(images: torch.Tensor, encoder: nn.Module) -> PatchGrid:
    """Run a built encoder; thin wrapper so callers need no encoder internals."""
    return encoder(images)


class PlotProjection(nn.Module):
    """Linear adaptation of visual embeddings into the backbone width."""

    def __init__(self, in_width: int, out_width: int):
        super().__init__()
        self.proj = nn.Linear(in_width, out_width)


def plot_projection(grid: PatchGrid, proj: PlotProjection) -> TokenSequence:
    """Affine map per token; grid geometry (q, r) is carried through unchanged."""
    if grid.tokens.shape[-1] != proj.proj.in_features:
        raise ContractViolation(
            f"grid width {grid.tokens.shape[-1]} != projection input width {proj.proj.in_features}"
        )
    return TokenSequence(
        tokens=proj.proj(grid.tokens),
        modality="visual",
        effective_batch=grid.tokens.shape[0],
        grid=(grid.rows, grid.cols),
    )
