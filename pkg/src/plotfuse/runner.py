"""Experiment recipes: dataset assembly, training, and evaluation per task.

The CLI and the acceptance suite both drive experiments through this module,
so a metric reported on the command line and a metric asserted in a test come
from the same code path.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import torch

from .backbone import TuningPolicy
from .config import ConfigError, ExperimentConfig
from .data import (
    SeriesDataset,
    SyntheticSpec,
    chronological_splits,
    few_shot_subset,
    load_dataset_from_manifest,
    make_synthetic,
    sliding_windows,
    stratified_split,
)
from .evaluation import MetricReport, mse_mae, accuracy, point_adjusted_f1, vus_pr
from .heads import anomaly_score, merge_window_scores
from .pipeline import FusionModel, build_model
from .rasterizer import render_windows
from .training import RunLog, TaskBatches, forecast_autoregressive, set_seed, train_task

_RENDER_CACHE: dict[tuple, np.ndarray] = {}
_RENDER_CACHE_LIMIT = 64


def rendered(x: np.ndarray, render_cfg) -> np.ndarray:
    """Per-process render cache; windows are deterministic so re-renders are pure waste."""
    key = (hashlib.sha1(np.ascontiguousarray(x).tobytes()).hexdigest(), render_cfg)
    if key not in _RENDER_CACHE:
        if len(_RENDER_CACHE) >= _RENDER_CACHE_LIMIT:
            _RENDER_CACHE.clear()
        _RENDER_CACHE[key] = render_windows(x, render_cfg)
    return _RENDER_CACHE[key]


def _maybe_images(cfg: ExperimentConfig, x: np.ndarray) -> Optional[np.ndarray]:
    return rendered(x, cfg.render) if cfg.vision_enabled else None


def _to_torch(x: Optional[np.ndarray]) -> Optional[torch.Tensor]:
    return None if x is None else torch.from_numpy(x)


@dataclass
class SeedResult:
    seed: int
    metrics: dict[str, float]
    log: RunLog
    model: FusionModel


# -- dataset assembly ---------------------------------------------------------


def build_datasets(cfg: ExperimentConfig) -> dict[str, SeriesDataset]:
    """Materialize train/eval datasets per the dataset section."""
    if cfg.dataset.kind == "manifest":
        return load_dataset_from_manifest(cfg.dataset.manifest)
    spec_raw = cfg.dataset.synthetic
    spec = SyntheticSpec(
        kind=spec_raw["kind"], seed=int(spec_raw.get("seed", 0)), parameters=dict(spec_raw.get("parameters", {}))
    )
    out = {"train": make_synthetic(spec)}
    if cfg.dataset.eval_synthetic:
        ev = cfg.dataset.eval_synthetic
        out["test"] = make_synthetic(
            SyntheticSpec(kind=ev["kind"], seed=int(ev.get("seed", spec.seed + 1000)), parameters=dict(ev.get("parameters", {})))
        )
    elif cfg.task == "classification":
        out["test"] = make_synthetic(
            SyntheticSpec(kind=spec.kind, seed=spec.seed + 1000, parameters=dict(spec.parameters))
        )
    return out


def _class_arrays(dataset: SeriesDataset, length: int) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for inst in dataset.instances:
        if inst.length < length:
            raise ConfigError(f"instance {inst.source} shorter ({inst.length}) than window.length {length}")
        xs.append(inst.values[:length])
        ys.append(inst.class_label)
    return np.stack(xs), np.array(ys, dtype=np.int64)


# -- per-task single-seed experiments -------------------------------------------


def run_classification(cfg: ExperimentConfig, seed: int, datasets: Optional[dict] = None) -> SeedResult:
    datasets = datasets or build_datasets(cfg)
    train_ds = datasets["train"]
    test_ds = datasets.get("test")
    if test_ds is None:
        raise ConfigError("classification needs a test dataset (dataset.eval_synthetic or manifest files.test)")
    if cfg.window.few_shot_fraction < 1.0:
        train_ds = few_shot_subset(train_ds, cfg.window.few_shot_fraction, seed=seed)
    inner_train, val_ds = stratified_split(train_ds, cfg.val_fraction, seed=seed)

    x_tr, y_tr = _class_arrays(inner_train, cfg.window.length)
    x_va, y_va = _class_arrays(val_ds, cfg.window.length)
    x_te, y_te = _class_arrays(test_ds, cfg.window.length)

    labels = sorted({int(v) for v in y_tr})
    num_classes = cfg.num_classes or (max(labels) + 1)
    run_cfg = copy.deepcopy(cfg)
    run_cfg.num_classes = num_classes

    set_seed(seed)
    model = build_model(run_cfg.pipeline_config(channels=x_tr.shape[2]), policy=cfg.train.policy)
    log = train_task(
        model,
        TaskBatches(x_tr, y_tr, _maybe_images(cfg, x_tr)),
        TaskBatches(x_va, y_va, _maybe_images(cfg, x_va)),
        cfg.train,
        seed=seed,
    )
    logits = _predict(model, cfg, x_te)
    acc = accuracy(logits, y_te)
    return SeedResult(seed=seed, metrics={"accuracy": acc}, log=log, model=model)


def _predict(model: FusionModel, cfg: ExperimentConfig, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Batched eval-mode forward; returns the task prediction as numpy."""
    model.eval()
    outs = []
    images = _maybe_images(cfg, x)
    with torch.no_grad():
        for lo in range(0, x.shape[0], batch_size):
            xb = torch.from_numpy(x[lo : lo + batch_size])
            ib = _to_torch(images[lo : lo + batch_size]) if images is not None else None
            outs.append(model(xb, images=ib).prediction.double().numpy())
    return np.concatenate(outs)


def run_anomaly(cfg: ExperimentConfig, seed: int, datasets: Optional[dict] = None) -> SeedResult:
    datasets = datasets or build_datasets(cfg)
    train_split = datasets["train"]
    if len(train_split.instances) != 1:
        raise ConfigError("anomaly detection expects one long series per dataset")
    inst = train_split.instances[0]
    train_i, val_i, test_i = chronological_splits(inst)
    if cfg.window.few_shot_fraction < 1.0:
        shrunk = few_shot_subset(
            SeriesDataset(name=train_split.name, task="anomaly_detection", instances=[train_i]),
            cfg.window.few_shot_fraction,
        )
        train_i = shrunk.instances[0]

    length = cfg.window.length
    w_tr = sliding_windows(train_i, length, stride=cfg.window.stride or length)
    w_va = sliding_windows(val_i, length, stride=cfg.window.stride or length)
    w_te = sliding_windows(test_i, length, stride=cfg.window.score_stride)
    if min(w_tr.batch, w_va.batch, w_te.batch) == 0:
        raise ConfigError("window.length too large for one of the splits")

    set_seed(seed)
    model = build_model(cfg.pipeline_config(channels=inst.channels), policy=cfg.train.policy)
    log = train_task(
        model,
        TaskBatches(w_tr.x, None, _maybe_images(cfg, w_tr.x)),
        TaskBatches(w_va.x, None, _maybe_images(cfg, w_va.x)),
        cfg.train,
        seed=seed,
    )

    recon = _predict(model, cfg, w_te.x)
    window_scores = ((w_te.x - recon) ** 2).mean(axis=2)
    scores = merge_window_scores(window_scores, w_te.window_origin, test_i.length)
    labels = test_i.step_labels
    if labels is None:
        raise ConfigError("anomaly detection needs step labels on the series")

    metrics: dict[str, float] = {}
    pa = point_adjusted_f1(scores, labels)
    v = vus_pr(scores, labels, max_buffer=cfg.max_buffer)
    shuffled = np.random.default_rng(seed).permutation(scores)
    v_shuf = vus_pr(shuffled, labels, max_buffer=cfg.max_buffer)
    metrics["point_adjusted_f1"] = float("nan") if pa is None else pa.f1
    metrics["vus_pr"] = float("nan") if v is None else v
    metrics["vus_pr_shuffled"] = float("nan") if v_shuf is None else v_shuf
    result = SeedResult(seed=seed, metrics=metrics, log=log, model=model)
    result.scores = scores  # type: ignore[attr-defined]
    result.labels = labels  # type: ignore[attr-defined]
    return result


def run_forecasting(
    cfg: ExperimentConfig,
    seed: int,
    datasets: Optional[dict] = None,
    eval_datasets: Optional[dict] = None,
) -> SeedResult:
    """Train on the train dataset's train split; evaluate on the eval dataset's
    test split (same dataset unless zero-shot supplies another)."""
    datasets = datasets or build_datasets(cfg)
    source = datasets["train"]
    if len(source.instances) != 1:
        raise ConfigError("forecasting expects one long series per dataset")
    train_i, val_i, _ = chronological_splits(source.instances[0])
    if cfg.window.few_shot_fraction < 1.0:
        shrunk = few_shot_subset(
            SeriesDataset(name=source.name, task="forecasting", instances=[train_i]),
            cfg.window.few_shot_fraction,
        )
        train_i = shrunk.instances[0]

    target_ds = (eval_datasets or datasets).get("test") or (eval_datasets or datasets)["train"]
    _, _, test_i = chronological_splits(target_ds.instances[0])

    length, horizon = cfg.window.length, cfg.window.horizon
    w_tr = sliding_windows(train_i, length, stride=cfg.window.stride, horizon=horizon)
    w_va = sliding_windows(val_i, length, stride=cfg.window.stride, horizon=horizon)
    w_te = sliding_windows(test_i, length, stride=cfg.window.score_stride, horizon=horizon)
    if min(w_tr.batch, w_va.batch, w_te.batch) == 0:
        raise ConfigError("window.length + horizon too large for one of the splits")
    if train_i.channels != test_i.channels:
        raise ConfigError("train and eval datasets must share the channel count")

    set_seed(seed)
    model = build_model(cfg.pipeline_config(channels=train_i.channels), policy=cfg.train.policy)
    log = train_task(
        model,
        TaskBatches(w_tr.x, w_tr.labels, _maybe_images(cfg, w_tr.x)),
        TaskBatches(w_va.x, w_va.labels, _maybe_images(cfg, w_va.x)),
        cfg.train,
        seed=seed,
    )

    if cfg.train.mode == "autoregressive":
        pred = forecast_autoregressive(model, w_te.x, horizon)
    else:
        pred = _predict(model, cfg, w_te.x)
    mse, mae = mse_mae(pred, w_te.labels)
    persistence = np.repeat(w_te.x[:, -1:, :], horizon, axis=1)
    p_mse, p_mae = mse_mae(persistence, w_te.labels)
    metrics = {"mse": mse, "mae": mae, "persistence_mse": p_mse, "persistence_mae": p_mae}
    return SeedResult(seed=seed, metrics=metrics, log=log, model=model)


_RUNNERS = {
    "classification": run_classification,
    "anomaly_detection": run_anomaly,
    "forecasting": run_forecasting,
}


def run_seed(cfg: ExperimentConfig, seed: int, datasets: Optional[dict] = None, **kwargs) -> SeedResult:
    return _RUNNERS[cfg.task](cfg, seed, datasets=datasets, **kwargs)


def run_experiment(cfg: ExperimentConfig, axis: Optional[dict[str, str]] = None, **kwargs) -> MetricReport:
    """Run every seed and collect a MetricReport."""
    datasets = build_datasets(cfg)
    per_seed: dict[str, list[float]] = {}
    for seed in cfg.seeds:
        result = run_seed(cfg, seed, datasets=datasets, **kwargs)
        for name, value in result.metrics.items():
            per_seed.setdefault(name, []).append(value)
    return MetricReport(task=cfg.task, metrics=per_seed, seeds=list(cfg.seeds), axis=dict(axis or {}))


# -- sweep support ---------------------------------------------------------------


def apply_axis_value(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    """One sweep cell = the base config with one axis value substituted."""
    clone = copy.deepcopy(cfg)
    if axis == "layout":
        clone.render = replace(cfg.render, layout=value)
    elif axis == "color_coding":
        clone.render = replace(cfg.render, color_coding=value == "on")
    elif axis == "fusion":
        clone.fusion = replace(cfg.fusion, stage=value)
    elif axis == "encoder":
        clone.vision = replace(cfg.vision, kind="vit" if value == "toy_vit" else "conv")
    elif axis == "policy":
        clone.train = replace(cfg.train, policy=TuningPolicy(value))
    elif axis == "backbone":
        depth = 1 if value == "single_attention" else cfg.backbone.depth
        clone.backbone = replace(cfg.backbone, kind=value, depth=depth)
    elif axis == "patch_multiplier":
        clone = cfg.with_patch_multiplier(int(value))
    elif axis == "vision":
        clone.vision_enabled = value == "on"
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}")
    clone.validate()
    return clone


def sweep_cells(cfg: ExperimentConfig) -> list[tuple[dict[str, str], ExperimentConfig]]:
    """Cartesian product over the declared sweep axes."""
    cells: list[tuple[dict[str, str], ExperimentConfig]] = [({}, cfg)]
    for axis, values in sorted(cfg.sweep_axes.items()):
        expanded = []
        for axis_labels, cell_cfg in cells:
            for value in values:
                new_cfg = apply_axis_value(cell_cfg, axis, value)
                expanded.append(({**axis_labels, axis: str(value)}, new_cfg))
        cells = expanded
    return cells
