"""Declarative experiment configuration: YAML in, validated dataclasses out.

The whole experiment (dataset, windowing, render, tokenizer, vision, backbone,
fusion, training, evaluation, sweep axes) lives in one nested key-value file.
Sections validate jointly before any compute. Environment variables with the
``PLOTFUSE_`` prefix override top-level scalars (e.g. ``PLOTFUSE_TASK``,
``PLOTFUSE_OUT``); ``--override a.b=c`` overrides any dotted path.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import yaml

from .align_fuse import AlignConfig, FusionPlan
from .backbone import BackboneSpec, TuningPolicy
from .heads import TaskConfig
from .pipeline import PipelineConfig
from .rasterizer import RenderConfig
from .tokenizer import TokenizerConfig
from .training import TrainConfig
from .vision import VisionEncoderSpec

ENV_PREFIX = "PLOTFUSE_"

SWEEP_AXES = {
    "layout": ("horizontal", "grid"),
    "fusion": ("early", "late"),
    "encoder": ("toy_vit", "toy_conv"),
    "policy": ("default", "freeze", "tune_vis", "tune_all"),
    "patch_multiplier": tuple(range(1, 11)),
    "color_coding": ("on", "off"),
    "backbone": ("transformer", "single_attention"),
    "vision": ("on", "off"),
}


class ConfigError(ValueError):
    """Invalid experiment configuration; message names the offending field."""


def _take(section: dict, field_name: str, default=None, required: bool = False, where: str = ""):
    if field_name in section:
        return section.pop(field_name)
    if required:
        raise ConfigError(f"{where}: missing required field {field_name!r}")
    return default


def _no_extras(section: dict, where: str) -> None:
    if section:
        raise ConfigError(f"{where}: unknown fields {sorted(section)}")


@dataclass
class DatasetConfig:
    kind: str  # synthetic | manifest
    synthetic: Optional[dict] = None  # {kind, seed, parameters}
    eval_synthetic: Optional[dict] = None  # optional held-out/eval dataset spec
    manifest: Optional[str] = None

    @classmethod
    def from_dict(cls, raw: dict) -> "DatasetConfig":
        raw = dict(raw)
        kind = _take(raw, "kind", required=True, where="dataset")
        if kind not in ("synthetic", "manifest"):
            raise ConfigError(f"dataset.kind: expected synthetic|manifest, got {kind!r}")
        synthetic = _take(raw, "synthetic")
        eval_synthetic = _take(raw, "eval_synthetic")
        manifest = _take(raw, "manifest")
        _no_extras(raw, "dataset")
        if kind == "synthetic" and not synthetic:
            raise ConfigError("dataset.synthetic: required when kind=synthetic")
        if kind == "manifest" and not manifest:
            raise ConfigError("dataset.manifest: required when kind=manifest")
        return cls(kind=kind, synthetic=synthetic, eval_synthetic=eval_synthetic, manifest=manifest)


@dataclass
class WindowConfig:
    length: int
    stride: int = 1
    horizon: int = 0
    score_stride: int = 1
    few_shot_fraction: float = 1.0

    @classmethod
    def from_dict(cls, raw: dict) -> "WindowConfig":
        raw = dict(raw)
        out = cls(
            length=int(_take(raw, "length", required=True, where="window")),
            stride=int(_take(raw, "stride", 1)),
            horizon=int(_take(raw, "horizon", 0)),
            score_stride=int(_take(raw, "score_stride", 1)),
            few_shot_fraction=float(_take(raw, "few_shot_fraction", 1.0)),
        )
        _no_extras(raw, "window")
        if out.length < 2 or out.stride < 1 or out.score_stride < 1 or out.horizon < 0:
            raise ConfigError("window: length >= 2, strides >= 1, horizon >= 0 required")
        if not (0.0 < out.few_shot_fraction <= 1.0):
            raise ConfigError("window.few_shot_fraction must be in (0, 1]")
        return out


@dataclass
class ExperimentConfig:
    task: str
    dataset: DatasetConfig
    window: WindowConfig
    render: RenderConfig
    tokenizer_tokens: int
    vision: VisionEncoderSpec
    vision_enabled: bool
    backbone: BackboneSpec
    fusion: FusionPlan
    align_agg: str
    train: TrainConfig
    seeds: tuple[int, ...]
    num_classes: int = 0
    pooling: str = "mean"
    max_buffer: Optional[int] = None
    val_fraction: float = 0.2
    out: str = "runs/experiment"
    sweep_axes: dict[str, list] = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    # -- loading -----------------------------------------------------------

    @classmethod
    def from_dict(cls, raw_in: dict) -> "ExperimentConfig":
        raw = copy.deepcopy(raw_in)
        task = _take(raw, "task", required=True, where="config")
        if task not in ("classification", "anomaly_detection", "forecasting"):
            raise ConfigError(f"task: unknown task {task!r}")

        dataset = DatasetConfig.from_dict(_take(raw, "dataset", required=True, where="config"))
        window = WindowConfig.from_dict(_take(raw, "window", required=True, where="config"))

        render_raw = dict(_take(raw, "render", {}) or {})
        try:
            render = RenderConfig(
                height=int(render_raw.pop("height", 64)),
                width=int(render_raw.pop("width", 64)),
                layout=render_raw.pop("layout", "horizontal"),
                color_coding=bool(render_raw.pop("color_coding", True)),
                line_width=int(render_raw.pop("line_width", 1)),
                antialias=bool(render_raw.pop("antialias", True)),
                max_channels=int(render_raw.pop("max_channels", 50)),
                corr_threshold=float(render_raw.pop("corr_threshold", 0.95)),
            )
        except ValueError as exc:
            raise ConfigError(f"render: {exc}") from exc
        _no_extras(render_raw, "render")

        tok_raw = dict(_take(raw, "tokenizer", {}) or {})
        tokenizer_tokens = int(tok_raw.pop("num_tokens", 16))
        _no_extras(tok_raw, "tokenizer")

        vis_raw = dict(_take(raw, "vision", {}) or {})
        vision_enabled = bool(vis_raw.pop("enabled", True))
        try:
            vision = VisionEncoderSpec(
                kind=vis_raw.pop("kind", "vit"),
                pixel_patch=int(vis_raw.pop("pixel_patch", 8)),
                width=int(vis_raw.pop("width", 48)),
                depth=int(vis_raw.pop("depth", 1)),
                heads=int(vis_raw.pop("heads", 4)),
                weights_source=vis_raw.pop("weights_source", "random_init"),
                archive_path=vis_raw.pop("archive_path", None),
                frozen=bool(vis_raw.pop("frozen", True)),
            )
        except ValueError as exc:
            raise ConfigError(f"vision: {exc}") from exc
        _no_extras(vis_raw, "vision")

        bb_raw = dict(_take(raw, "backbone", {}) or {})
        try:
            backbone = BackboneSpec(
                kind=bb_raw.pop("kind", "transformer"),
                width=int(bb_raw.pop("width", 64)),
                depth=int(bb_raw.pop("depth", 2)),
                heads=int(bb_raw.pop("heads", 4)),
                max_positions=int(bb_raw.pop("max_positions", 512)),
                causal=bool(bb_raw.pop("causal", False)),
                weights_source=bb_raw.pop("weights_source", "random_init"),
                archive_path=bb_raw.pop("archive_path", None),
            )
        except (ValueError, RuntimeError) as exc:
            raise ConfigError(f"backbone: {exc}") from exc
        _no_extras(bb_raw, "backbone")

        fusion_raw = dict(_take(raw, "fusion", {}) or {})
        try:
            fusion = FusionPlan(stage=fusion_raw.pop("stage", "early"))
        except ValueError as exc:
            raise ConfigError(f"fusion: {exc}") from exc
        _no_extras(fusion_raw, "fusion")

        align_raw = dict(_take(raw, "align", {}) or {})
        align_agg = align_raw.pop("agg", "mean")
        if align_agg not in ("mean", "max"):
            raise ConfigError(f"align.agg: expected mean|max, got {align_agg!r}")
        _no_extras(align_raw, "align")

        train_raw = dict(_take(raw, "train", {}) or {})
        policy_name = train_raw.pop("policy", "default")
        try:
            train = TrainConfig(
                task=task,
                max_epochs=train_raw.pop("max_epochs", None),
                patience=train_raw.pop("patience", None),
                batch_size=int(train_raw.pop("batch_size", 64)),
                lr_max=float(train_raw.pop("lr_max", 1e-3)),
                lr_start=float(train_raw.pop("lr_start", 1e-6)),
                warmup_frac=float(train_raw.pop("warmup_frac", 0.05)),
                warmup_steps=train_raw.pop("warmup_steps", None),
                weight_decay=float(train_raw.pop("weight_decay", 0.01)),
                policy=TuningPolicy(policy_name),
                mode=train_raw.pop("mode", "direct"),
            )
        except (ValueError, RuntimeError) as exc:
            raise ConfigError(f"train: {exc}") from exc
        val_fraction = float(train_raw.pop("val_fraction", 0.2))
        _no_extras(train_raw, "train")
        if not (0.0 < val_fraction < 1.0):
            raise ConfigError("train.val_fraction must be in (0, 1)")

        eval_raw = dict(_take(raw, "eval", {}) or {})
        max_buffer = eval_raw.pop("max_buffer", None)
        max_buffer = None if max_buffer is None else int(max_buffer)
        _no_extras(eval_raw, "eval")

        seeds = tuple(int(s) for s in _take(raw, "seeds", [0, 1, 2, 3, 4]))
        if not seeds:
            raise ConfigError("seeds: need at least one seed")
        num_classes = int(_take(raw, "num_classes", 0))
        pooling = _take(raw, "pooling", "mean")
        out = str(_take(raw, "out", "runs/experiment"))

        sweep_raw = dict(_take(raw, "sweep", {}) or {})
        axes = dict(sweep_raw.pop("axes", {}) or {})
        _no_extras(sweep_raw, "sweep")
        for axis, values in axes.items():
            if axis not in SWEEP_AXES:
                raise ConfigError(f"sweep.axes.{axis}: unknown axis; expected one of {sorted(SWEEP_AXES)}")
            for v in values:
                if v not in SWEEP_AXES[axis]:
                    raise ConfigError(f"sweep.axes.{axis}: invalid value {v!r}; expected one of {SWEEP_AXES[axis]}")

        _no_extras(raw, "config")

        cfg = cls(
            task=task,
            dataset=dataset,
            window=window,
            render=render,
            tokenizer_tokens=tokenizer_tokens,
            vision=vision,
            vision_enabled=vision_enabled,
            backbone=backbone,
            fusion=fusion,
            align_agg=align_agg,
            train=train,
            seeds=seeds,
            num_classes=num_classes,
            pooling=pooling,
            max_buffer=max_buffer,
            val_fraction=val_fraction,
            out=out,
            sweep_axes={k: list(v) for k, v in axes.items()},
            raw=copy.deepcopy(raw_in),
        )
        cfg.validate()
        return cfg

    def validate(self) -> None:
        """Joint checks across sections, before any compute."""
        if self.task == "forecasting" and self.window.horizon < 1:
            raise ConfigError("window.horizon: required (>= 1) for forecasting")
        if self.task == "classification" and self.dataset.kind == "synthetic":
            kind = (self.dataset.synthetic or {}).get("kind")
            if kind != "class_motifs":
                raise ConfigError(f"dataset.synthetic.kind: classification needs class_motifs, got {kind!r}")
        if self.tokenizer_tokens > self.window.length:
            raise ConfigError(
                f"tokenizer.num_tokens {self.tokenizer_tokens} > window.length {self.window.length}"
            )
        if self.vision_enabled:
            if self.render.height % self.vision.pixel_patch or self.render.width % self.vision.pixel_patch:
                raise ConfigError(
                    f"render: image {self.render.height}x{self.render.width} not divisible by "
                    f"vision.pixel_patch {self.vision.pixel_patch}"
                )
            n_positions = self.tokenizer_tokens
            if self.fusion.stage == "late":
                n_positions += (self.render.height // self.vision.pixel_patch) * (
                    self.render.width // self.vision.pixel_patch
                )
            if n_positions > self.backbone.max_positions:
                raise ConfigError(
                    f"backbone.max_positions {self.backbone.max_positions} < required sequence length {n_positions}"
                )

    # -- derived objects ------------------------------------------------------

    def pipeline_config(self, channels: int) -> PipelineConfig:
        task_cfg = TaskConfig(
            task=self.task,
            num_classes=self.num_classes if self.task == "classification" else 0,
            horizon=self.window.horizon if self.task == "forecasting" else 0,
            pooling=self.pooling,
        )
        patch_mode = "channel_independent" if self.task == "forecasting" else "mixed"
        return PipelineConfig(
            task=task_cfg,
            length=self.window.length,
            channels=channels,
            tokenizer=TokenizerConfig(
                num_tokens=self.tokenizer_tokens, patch_mode=patch_mode, width=self.backbone.width
            ),
            backbone=self.backbone,
            render=self.render,
            vision=self.vision,
            align=AlignConfig(agg=self.align_agg, target_len=max(1, self.tokenizer_tokens)),
            fusion=self.fusion,
            vision_enabled=self.vision_enabled,
        )

    def with_patch_multiplier(self, multiplier: int) -> "ExperimentConfig":
        """Token count for patch size = multiplier * base patch length."""
        base_patch = math.ceil(self.window.length / self.tokenizer_tokens)
        new_tokens = max(1, math.ceil(self.window.length / (multiplier * base_patch)))
        clone = copy.deepcopy(self)
        clone.tokenizer_tokens = new_tokens
        return clone

    def config_hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _set_dotted(raw: dict, dotted: str, value: str) -> None:
    keys = dotted.split(".")
    node = raw
    for key in keys[:-1]:
        if key not in node or not isinstance(node[key], dict):
            node[key] = {}
        node = node[key]
    node[keys[-1]] = yaml.safe_load(value)


def load_config(
    path: Union[str, Path],
    overrides: Optional[list[str]] = None,
    env: Optional[dict[str, str]] = None,
) -> ExperimentConfig:
    """Load + validate a YAML experiment config with env/CLI overrides applied."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no such config file: {path}")
    with open(path) as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a mapping")

    env = dict(os.environ) if env is None else env
    for key, value in env.items():
        if key.startswith(ENV_PREFIX):
            field_name = key[len(ENV_PREFIX) :].lower()
            if field_name in raw and not isinstance(raw[field_name], (dict, list)):
                raw[field_name] = yaml.safe_load(value)
            elif field_name in ("task", "out", "num_classes", "pooling"):
                raw[field_name] = yaml.safe_load(value)

    for entry in overrides or []:
        if "=" not in entry:
            raise ConfigError(f"--override needs key=value, got {entry!r}")
        dotted, value = entry.split("=", 1)
        _set_dotted(raw, dotted.strip(), value.strip())

    return ExperimentConfig.from_dict(raw)
