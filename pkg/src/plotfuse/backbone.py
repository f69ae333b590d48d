"""The central sequence model: tagged parameter groups, selective fine-tuning,
the single-attention ablation, and attention-map diagnostics.

Every parameter of an assembled model belongs to exactly one of eight groups:
attention, ffn, layer_norm, positional_embedding, token_embedding, head,
projection, vision_encoder. Tuning policies flip requires_grad per group; the
default policy trains only LayerNorm and positional embeddings inside the
backbone (attention and feed-forward blocks stay frozen).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import torch
from torch import nn

from .archive import load_module_archive
from .layers import TransformerBlock
from .tokenizer import ContractViolation

GROUP_TAGS = (
    "attention",
    "ffn",
    "layer_norm",
    "positional_embedding",
    "token_embedding",
    "head",
    "projection",
    "vision_encoder",
)

# Trainable groups per policy. token_embedding stays frozen everywhere: it only
# exists for external text-token archives and fused numeric tokens bypass it.
POLICY_TABLE: dict[str, frozenset[str]] = {
    "default": frozenset({"layer_norm", "positional_embedding", "head", "projection"}),
    "freeze": frozenset({"head", "projection"}),
    "tune_vis": frozenset({"layer_norm", "positional_embedding", "head", "projection", "vision_encoder"}),
    "tune_all": frozenset(set(GROUP_TAGS) - {"token_embedding"}),
}


class AssemblyError(RuntimeError):
    """A parameter escaped the group partition, or the spec is inconsistent."""


@dataclass(frozen=True)
class BackboneSpec:
    kind: str = "transformer"  # transformer | single_attention
    width: int = 128
    depth: int = 4
    heads: int = 4
    max_positions: int = 1024
    causal: bool = False
    weights_source: str = "random_init"
    archive_path: Optional[str] = None

    def __post_init__(self):
        if self.kind not in ("transformer", "single_attention"):
            raise AssemblyError(f"unknown backbone kind {self.kind!r}")
        if self.kind == "single_attention" and self.depth != 1:
            raise AssemblyError("single_attention requires depth=1")
        if self.width < 1 or self.heads < 1 or self.depth < 0:
            raise AssemblyError("width/heads must be positive, depth non-negative")
        if self.weights_source == "external_archive" and not self.archive_path:
            raise AssemblyError("external_archive needs archive_path")


@dataclass(frozen=True)
class TuningPolicy:
    name: str = "default"

    def __post_init__(self):
        if self.name not in POLICY_TABLE:
            raise AssemblyError(f"unknown tuning policy {self.name!r}; expected one of {sorted(POLICY_TABLE)}")

    @property
    def trainable_groups(self) -> frozenset[str]:
        return POLICY_TABLE[self.name]


class SequenceBackbone(nn.Module):
    """Pre-norm decoder stack, bidirectional by default, causal behind a flag.

    depth=0 degenerates to LayerNorm(input + positional embeddings), which is
    the diagnostic contract tests rely on.
    """

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        with_ffn = spec.kind != "single_attention"
        self.pos_embed = nn.Parameter(torch.randn(1, spec.max_positions, spec.width) * 0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(spec.width, spec.heads, causal=spec.causal, with_ffn=with_ffn)
            for _ in range(spec.depth)
        )
        self.final_norm = nn.LayerNorm(spec.width)
        if spec.weights_source == "external_archive":
            load_module_archive(spec.archive_path, self, lambda m, z: m(z)[0])

    def forward(self, tokens: torch.Tensor, collect_attention: bool = False):
        """(B', N, d) -> last hidden states (B', N, d), plus optional per-layer
        head-averaged attention maps (layers, B', N, N)."""
        if tokens.ndim != 3:
            raise ContractViolation(f"expected (B, N, d), got {tuple(tokens.shape)}")
        n = tokens.shape[1]
        if n > self.spec.max_positions:
            raise ContractViolation(f"sequence length {n} exceeds max_positions {self.spec.max_positions}")
        x = tokens + self.pos_embed[:, :n, :]
        maps = [] if collect_attention else None
        for block in self.blocks:
            x, probs = block(x, return_probs=collect_attention)
            if collect_attention:
                maps.append(probs)
        x = self.final_norm(x)
        stacked = torch.stack(maps) if collect_attention and maps else None
        return x, stacked

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        groups: dict[str, list[nn.Parameter]] = {tag: [] for tag in ("attention", "ffn", "layer_norm", "positional_embedding", "token_embedding")}
        groups["positional_embedding"].append(self.pos_embed)
        for block in self.blocks:
            groups["attention"].extend(block.attn.parameters())
            groups["layer_norm"].extend(block.ln_attn.parameters())
            if block.ffn is not None:
                groups["ffn"].extend(block.ffn.parameters())
                groups["layer_norm"].extend(block.ln_ffn.parameters())
        groups["layer_norm"].extend(self.final_norm.parameters())
        return groups


def check_partition(model: nn.Module, groups: dict[str, list[nn.Parameter]]) -> None:
    """Every parameter must appear in exactly one group; union covers all."""
    seen: dict[int, str] = {}
    for tag, params in groups.items():
        if tag not in GROUP_TAGS:
            raise AssemblyError(f"unknown group tag {tag!r}")
        for p in params:
            key = id(p)
            if key in seen:
                raise AssemblyError(f"parameter tagged twice: {seen[key]} and {tag}")
            seen[key] = tag
    all_params = {id(p): name for name, p in model.named_parameters()}
    untagged = [name for key, name in all_params.items() if key not in seen]
    if untagged:
        raise AssemblyError(f"untagged parameters at construction: {untagged}")
    extra = [tag for key, tag in seen.items() if key not in all_params]
    if extra:
        raise AssemblyError(f"group entries that are not model parameters: {extra}")


def apply_tuning_policy(groups: dict[str, list[nn.Parameter]], policy: TuningPolicy) -> None:
    """Set requires_grad per the policy table. Idempotent."""
    trainable = policy.trainable_groups
    for tag, params in groups.items():
        flag = tag in trainable
        for p in params:
            p.requires_grad_(flag)


def trainable_parameters(groups: dict[str, list[nn.Parameter]]) -> Iterable[tuple[str, nn.Parameter]]:
    for tag, params in groups.items():
        for p in params:
            if p.requires_grad:
                yield tag, p


def attention_maps(backbone: SequenceBackbone, tokens: torch.Tensor) -> torch.Tensor:
    """Per-layer head-averaged attention matrices, batch-averaged: (layers, N, N)."""
    was_training = backbone.training
    backbone.eval()
    with torch.no_grad():
        _, maps = backbone(tokens, collect_attention=True)
    if was_training:
        backbone.train()
    if maps is None:
        n = tokens.shape[1]
        return torch.zeros(0, n, n, dtype=tokens.dtype)
    return maps.mean(dim=1)


class AttentionMapAccumulator:
    """Weighted running mean of attention maps across batches."""

    def __init__(self):
        self._sum: Optional[torch.Tensor] = None
        self._count = 0

    def add(self, maps: torch.Tensor, batch_size: int) -> None:
        weighted = maps * batch_size
        self._sum = weighted if self._sum is None else self._sum + weighted
        self._count += batch_size

    @property
    def mean(self) -> torch.Tensor:
        if self._sum is None or self._count == 0:
            raise RuntimeError("no attention maps accumulated")
        return self._sum / self._count
