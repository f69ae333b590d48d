"""Model assembly: wires rasterizer, tokenizer, vision, alignment, fusion,
backbone, and head into one trainable module with a validated configuration.

Cross-section constraints (image divisibility, token budget vs max positions,
patch-mode vs task) are checked here, before any compute.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from torch import nn

from .align_fuse import AlignConfig, FusionPlan, fuse_early, fuse_late, temporal_align
from .backbone import (
    AssemblyError,
    BackboneSpec,
    SequenceBackbone,
    TuningPolicy,
    apply_tuning_policy,
    check_partition,
)
from .heads import ClassificationHead, ForecastHead, ReconstructionHead, TaskConfig
from .rasterizer import RenderConfig, render_windows
from .tokenizer import (
    ContractViolation,
    NormStats,
    TimeSeriesTokenizer,
    TokenizerConfig,
    revin_fit_transform,
)
from .vision import (
    PlotProjection,
    VisionEncoderSpec,
    build_vision_encoder,
    check_divisibility,
    plot_projection,
)


@dataclass(frozen=True)
class PipelineConfig:
    task: TaskConfig
    length: int
    channels: int
    tokenizer: TokenizerConfig
    backbone: BackboneSpec
    render: RenderConfig = RenderConfig()
    vision: VisionEncoderSpec = VisionEncoderSpec()
    align: AlignConfig = AlignConfig()
    fusion: FusionPlan = FusionPlan()
    vision_enabled: bool = True

    def __post_init__(self):
        if self.length < 2 or self.channels < 1:
            raise AssemblyError("need length >= 2 and channels >= 1")
        if self.tokenizer.width != self.backbone.width:
            raise AssemblyError(
                f"tokenizer width {self.tokenizer.width} != backbone width {self.backbone.width}"
            )
        if self.tokenizer.num_tokens > self.length:
            raise AssemblyError(f"num_tokens {self.tokenizer.num_tokens} > window length {self.length}")
        expected_mode = "channel_independent" if self.task.task == "forecasting" else "mixed"
        if self.tokenizer.patch_mode != expected_mode:
            raise AssemblyError(f"task {self.task.task} requires patch_mode={expected_mode}")
        n_positions = self.tokenizer.num_tokens
        if self.vision_enabled:
            rows, cols = check_divisibility(self.vision, self.render.height, self.render.width)
            if self.fusion.stage == "late":
                n_positions += rows * cols
        if n_positions > self.backbone.max_positions:
            raise AssemblyError(
                f"sequence length {n_positions} exceeds backbone max_positions {self.backbone.max_positions}"
            )


@dataclass
class ModelOutput:
    task: str
    stats: NormStats
    logits: Optional[torch.Tensor] = None
    reconstruction: Optional[torch.Tensor] = None
    forecast: Optional[torch.Tensor] = None
    attention: Optional[torch.Tensor] = None

    @property
    def prediction(self) -> torch.Tensor:
        for value in (self.logits, self.reconstruction, self.forecast):
            if value is not None:
                return value
        raise RuntimeError("no prediction present")


class FusionModel(nn.Module):
    """The assembled two-branch model."""

    def __init__(self, cfg: PipelineConfig):
        super().__init__()
        self.cfg = cfg
        self.ts_tokenizer = TimeSeriesTokenizer(cfg.tokenizer, cfg.length, cfg.channels)
        self.backbone = SequenceBackbone(cfg.backbone)
        if cfg.vision_enabled:
            self.vision_encoder = build_vision_encoder(cfg.vision, cfg.render.height, cfg.render.width)
            self.plot_proj = PlotProjection(cfg.vision.width, cfg.backbone.width)
        else:
            self.vision_encoder = None
            self.plot_proj = None

        task = cfg.task
        width = cfg.backbone.width
        if task.task == "classification":
            self.head = ClassificationHead(width, task.num_classes, pooling=task.pooling)
        elif task.task == "anomaly_detection":
            self.head = ReconstructionHead(width, self.ts_tokenizer.patch_len, cfg.channels, cfg.length)
        else:
            self.head = ForecastHead(width, cfg.tokenizer.num_tokens, task.horizon, cfg.channels)
        check_partition(self, self.parameter_groups())

    # -- data plumbing -------------------------------------------------------

    def render_batch(self, x: np.ndarray) -> np.ndarray:
        """Rasterize numpy windows (B, L, C) to model-ready images (B, 3, H, W)."""
        return render_windows(x, self.cfg.render)

    @property
    def dtype(self) -> torch.dtype:
        return self.ts_tokenizer.proj.weight.dtype

    # -- forward -------------------------------------------------------------

    def forward(
        self,
        x: torch.Tensor,
        images: Optional[torch.Tensor] = None,
        collect_attention: bool = False,
    ) -> ModelOutput:
        if x.ndim != 3:
            raise ContractViolation(f"expected (B, L, C), got {tuple(x.shape)}")
        if x.shape[1] != self.cfg.length or x.shape[2] != self.cfg.channels:
            raise ContractViolation(
                f"model assembled for (L={self.cfg.length}, C={self.cfg.channels}), got {tuple(x.shape[1:])}"
            )
        x = x.to(self.dtype)
        x_norm, stats = revin_fit_transform(x)
        t_tokens = self.ts_tokenizer(x_norm)

        maps = None
        if self.cfg.vision_enabled:
            if images is None:
                raise ContractViolation("vision branch enabled but no images supplied")
            images = images.to(self.dtype)
            grid = self.vision_encoder(images)
            v_proj = plot_projection(grid, self.plot_proj)
            if self.cfg.fusion.stage == "early":
                align = AlignConfig(agg=self.cfg.align.agg, target_len=self.cfg.tokenizer.num_tokens)
                v_aligned = temporal_align(v_proj.tokens, grid.rows, grid.cols, align)
                fused = fuse_early(v_aligned, t_tokens)
                hidden, maps = self.backbone(fused.tokens, collect_attention=collect_attention)
            else:
                fused, maps = fuse_late(t_tokens, v_proj, self.backbone, collect_attention=collect_attention)
                hidden = fused.tokens
        else:
            hidden, maps = self.backbone(t_tokens.tokens, collect_attention=collect_attention)

        attention = maps.mean(dim=1) if maps is not None else None
        out = ModelOutput(task=self.cfg.task.task, stats=stats, attention=attention)
        if self.cfg.task.task == "classification":
            out.logits = self.head(hidden)
        elif self.cfg.task.task == "anomaly_detection":
            out.reconstruction = self.head(hidden, stats)
        else:
            out.forecast = self.head(hidden, stats)
        return out

    # -- parameter management --------------------------------------------------

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        groups = {tag: [] for tag in ("attention", "ffn", "layer_norm", "positional_embedding", "token_embedding", "head", "projection", "vision_encoder")}
        for tag, params in self.backbone.parameter_groups().items():
            groups[tag].extend(params)
        groups["projection"].extend(self.ts_tokenizer.proj.parameters())
        if self.plot_proj is not None:
            groups["projection"].extend(self.plot_proj.parameters())
        if self.vision_encoder is not None:
            groups["vision_encoder"].extend(self.vision_encoder.parameters())
        groups["head"].extend(self.head.parameters())
        return groups

    def apply_policy(self, policy: TuningPolicy) -> None:
        apply_tuning_policy(self.parameter_groups(), policy)


def build_model(cfg: PipelineConfig, policy: Optional[TuningPolicy] = None) -> FusionModel:
    model = FusionModel(cfg)
    model.apply_policy(policy or TuningPolicy())
    return model
