"""Shared pre-norm transformer building blocks (used by vision and backbone)."""

from __future__ import annotations

import math
from typing import Optional

import torch
from torch import nn
from torch.nn import functional as F


class MultiheadSelfAttention(nn.Module):
    def __init__(self, width: int, heads: int, causal: bool = False):
        super().__init__()
        if width % heads != 0:
            raise ValueError(f"width {width} must be divisible by heads {heads}")
        self.heads = heads
        self.head_dim = width // heads
        self.causal = causal
        self.q_proj = nn.Linear(width, width)
        self.k_proj = nn.Linear(width, width)
        self.v_proj = nn.Linear(width, width)
        self.out_proj = nn.Linear(width, width)

    def forward(self, x: torch.Tensor, return_probs: bool = False):
        b, n, _ = x.shape
        shape = (b, n, self.heads, self.head_dim)
        q = self.q_proj(x).view(shape).transpose(1, 2)
        k = self.k_proj(x).view(shape).transpose(1, 2)
        v = self.v_proj(x).view(shape).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if self.causal:
            mask = torch.triu(torch.ones(n, n, dtype=torch.bool, device=x.device), diagonal=1)
            scores = scores.masked_fill(mask, float("-inf"))
        probs = scores.softmax(dim=-1)
        out = (probs @ v).transpose(1, 2).reshape(b, n, -1)
        out = self.out_proj(out)
        if return_probs:
            return out, probs.mean(dim=1)  # head-averaged (B, N, N)
        return out, None


class FeedForward(nn.Module):
    def __init__(self, width: int, hidden_mult: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(width, hidden_mult * width)
        self.fc2 = nn.Linear(hidden_mult * width, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class TransformerBlock(nn.Module):
    """Pre-norm block: x + attn(ln(x)), then x + ffn(ln(x)). FFN optional."""

    def __init__(self, width: int, heads: int, causal: bool = False, with_ffn: bool = True):
        super().__init__()
        self.ln_attn = nn.LayerNorm(width)
        self.attn = MultiheadSelfAttention(width, heads, causal=causal)
        self.ln_ffn: Optional[nn.LayerNorm] = nn.LayerNorm(width) if with_ffn else None
        self.ffn: Optional[FeedForward] = FeedForward(width) if with_ffn else None

    def forward(self, x: torch.Tensor, return_probs: bool = False):
        attn_out, probs = self.attn(self.ln_attn(x), return_probs=return_probs)
        x = x + attn_out
        if self.ffn is not None:
            x = x + self.ffn(self.ln_ffn(x))
        return x, probs
