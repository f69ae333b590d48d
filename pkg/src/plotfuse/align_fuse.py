"""Temporal alignment of visual patches and early/late modality fusion.

Because channels are stacked vertically in the composite plot, the horizontal
patch index tracks absolute time. Alignment groups the projected grid tokens
by column, aggregates down each column, and linearly interpolates the column
sequence to the time-series token length, so both modalities index the same
time segments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .tokenizer import ContractViolation, TokenSequence


@dataclass(frozen=True)
class AlignConfig:
    agg: str = "mean"  # mean | max
    target_len: int = 1  # N_ts

    def __post_init__(self):
        if self.agg not in ("mean", "max"):
            raise ContractViolation(f"unknown aggregation {self.agg!r}")
        if self.target_len < 1:
            raise ContractViolation("target_len must be >= 1")


@dataclass(frozen=True)
class FusionPlan:
    stage: str = "early"  # early | late

    def __post_init__(self):
        if self.stage not in ("early", "late"):
            raise ContractViolation(f"unknown fusion stage {self.stage!r}")


def _column_aggregate(grid: torch.Tensor, agg: str) -> torch.Tensor:
    """(B, q, r, d) -> (B, r, d). Mean sorts along q first so the result is
    bit-identical under any permutation of the row blocks."""
    if agg == "max":
        return grid.amax(dim=1)
    ordered, _ = torch.sort(grid, dim=1)
    return ordered.sum(dim=1) / grid.shape[1]


def _interp_positions(src_len: int, dst_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Left indices and fractional weights for endpoint-fixed linear sampling."""
    if dst_len == 1 or src_len == 1:
        pos = np.zeros(dst_len, dtype=np.float64)
    else:
        pos = np.arange(dst_len, dtype=np.float64) * (src_len - 1) / (dst_len - 1)
    idx = np.minimum(np.floor(pos).astype(np.int64), src_len - 1)
    frac = pos - idx
    return idx, frac


def temporal_align(tokens: torch.Tensor, rows: int, cols: int, cfg: AlignConfig) -> TokenSequence:
    """Aggregate projected grid tokens per column and resample to target_len.

    Sample positions are mapped linearly with the endpoints fixed: output[0]
    is exactly the first column and output[-1] exactly the last.
    """
    if tokens.ndim != 3:
        raise ContractViolation(f"expected (B, N, d), got {tuple(tokens.shape)}")
    b, n, d = tokens.shape
    if n != rows * cols:
        raise ContractViolation(f"token count {n} != rows*cols = {rows * cols}")
    columns = _column_aggregate(tokens.reshape(b, rows, cols, d), cfg.agg)  # (B, r, d)

    if cfg.target_len == cols:
        out = columns
    else:
        idx, frac = _interp_positions(cols, cfg.target_len)
        left = columns[:, idx, :]
        right = columns[:, np.minimum(idx + 1, cols - 1), :]
        w = torch.as_tensor(frac, dtype=tokens.dtype, device=tokens.device).view(1, -1, 1)
        out = left * (1.0 - w) + right * w
        exact = frac == 0.0
        if exact.any():
            out[:, exact, :] = columns[:, idx[exact], :]
    return TokenSequence(tokens=out, modality="visual", effective_batch=b, grid=(rows, cols))


def _broadcast_visual(v: torch.Tensor, ts_batch: int) -> torch.Tensor:
    """Repeat visual rows per channel block when the TS batch is B*C."""
    b = v.shape[0]
    if ts_batch == b:
        return v
    if ts_batch % b != 0:
        raise ContractViolation(f"TS batch {ts_batch} is not a channel multiple of visual batch {b}")
    return v.repeat_interleave(ts_batch // b, dim=0)


def fuse_early(v_aligned: TokenSequence, t_tokens: TokenSequence) -> TokenSequence:
    """Elementwise sum of aligned visual tokens and time-series tokens."""
    v = _broadcast_visual(v_aligned.tokens, t_tokens.tokens.shape[0])
    if v.shape != t_tokens.tokens.shape:
        raise ContractViolation(f"fusion shapes differ: visual {tuple(v.shape)} vs ts {tuple(t_tokens.tokens.shape)}")
    return TokenSequence(tokens=t_tokens.tokens + v, modality="fused", effective_batch=t_tokens.effective_batch)


def fuse_late(
    t_tokens: TokenSequence,
    v_tokens: TokenSequence | None,
    backbone,
    collect_attention: bool = False,
):
    """Concatenate [TS || visual] along the token axis, run the backbone once,
    and return TS-position outputs plus the mean of visual-position outputs.

    The returned sequence always has the TS token count, so heads are
    fusion-agnostic. With no visual tokens this is exactly the TS-only
    backbone forward.
    """
    ts = t_tokens.tokens
    n_ts = ts.shape[1]
    if v_tokens is None or v_tokens.tokens.shape[1] == 0:
        hidden, maps = backbone(ts, collect_attention=collect_attention)
        return TokenSequence(tokens=hidden, modality="fused", effective_batch=ts.shape[0]), maps
    v = _broadcast_visual(v_tokens.tokens, ts.shape[0])
    if v.shape[-1] != ts.shape[-1]:
        raise ContractViolation(f"feature widths differ: ts {ts.shape[-1]} vs visual {v.shape[-1]}")
    joint = torch.cat([ts, v], dim=1)
    hidden, maps = backbone(joint, collect_attention=collect_attention)
    fused = hidden[:, :n_ts, :] + hidden[:, n_ts:, :].mean(dim=1, keepdim=True)
    return TokenSequence(tokens=fused, modality="fused", effective_batch=ts.shape[0]), maps
