"""Shared test helpers: finite-difference gradient oracle, tiny model factory."""

from __future__ import annotations

import numpy as np
import pytest
import torch

from plotfuse.align_fuse import FusionPlan
from plotfuse.backbone import BackboneSpec
from plotfuse.heads import TaskConfig
from plotfuse.pipeline import PipelineConfig, build_model
from plotfuse.rasterizer import RenderConfig
from plotfuse.tokenizer import TokenizerConfig
from plotfuse.training import set_seed
from plotfuse.vision import VisionEncoderSpec


def finite_diff_check(loss_fn, params, rng=None, n_coords=16, h=1e-6, rel_tol=1e-4):
    """Compare autograd gradients on ``params`` with central finite differences.

    ``loss_fn`` must rebuild the scalar loss from current parameter values.
    Works in the parameters' own dtype; call with double-precision modules.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        if p.grad is not None:
            p.grad = None
    loss = loss_fn()
    loss.backward()
    worst = 0.0
    for p in params:
        assert p.grad is not None, "parameter received no gradient"
        flat_grad = p.grad.detach().reshape(-1)
        n = flat_grad.numel()
        coords = rng.choice(n, size=min(n_coords, n), replace=False)
        flat_param = p.data.reshape(-1)
        for c in coords:
            c = int(c)
            orig = flat_param[c].item()
            flat_param[c] = orig + h
            with torch.no_grad():
                up = loss_fn().item()
            flat_param[c] = orig - h
            with torch.no_grad():
                down = loss_fn().item()
            flat_param[c] = orig
            fd = (up - down) / (2 * h)
            an = flat_grad[c].item()
            rel = abs(an - fd) / max(abs(an), abs(fd), 1e-8)
            worst = max(worst, rel)
            assert rel <= rel_tol, f"gradient mismatch: analytic {an:.6e} vs FD {fd:.6e} (rel {rel:.2e})"
    return worst


def tiny_pipeline_config(
    task: str = "classification",
    length: int = 32,
    channels: int = 2,
    num_tokens: int = 8,
    width: int = 32,
    depth: int = 1,
    image: int = 32,
    pixel_patch: int = 8,
    vision_enabled: bool = True,
    fusion_stage: str = "early",
    horizon: int = 8,
    backbone_kind: str = "transformer",
    vision_kind: str = "vit",
    num_classes: int = 2,
) -> PipelineConfig:
    task_cfg = {
        "classification": TaskConfig(task="classification", num_classes=num_classes),
        "anomaly_detection": TaskConfig(task="anomaly_detection"),
        "forecasting": TaskConfig(task="forecasting", horizon=horizon),
    }[task]
    patch_mode = "channel_independent" if task == "forecasting" else "mixed"
    return PipelineConfig(
        task=task_cfg,
        length=length,
        channels=channels,
        tokenizer=TokenizerConfig(num_tokens=num_tokens, patch_mode=patch_mode, width=width),
        backbone=BackboneSpec(kind=backbone_kind, width=width, depth=depth, heads=2, max_positions=512),
        render=RenderConfig(height=image, width=image),
        vision=VisionEncoderSpec(kind=vision_kind, pixel_patch=pixel_patch, width=24, depth=1, heads=2),
        fusion=FusionPlan(stage=fusion_stage),
        vision_enabled=vision_enabled,
    )


@pytest.fixture
def tiny_model():
    set_seed(0)
    return build_model(tiny_pipeline_config())
