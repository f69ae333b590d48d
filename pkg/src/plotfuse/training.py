"""Optimization loop: schedule, early stopping, seed discipline, checkpoints,
and the autoregressive forecasting mode.

AdamW with a linear warmup from 1e-6 to lr_max followed by a half-cosine
decay back to the start value. Classification defaults to 50 epochs with
patience 15; anomaly detection and forecasting to 10 epochs with patience 3;
batch size defaults to 64. Weight decay only touches trainable parameters
that are neither LayerNorm weights nor biases.
"""

from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch

from .backbone import TuningPolicy
from .heads import loss_cls, loss_recon
from .pipeline import FusionModel
from .tokenizer import ContractViolation


class TrainingConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, lr: float, grad_norm: float, batch_index: int, epoch: int):
        super().__init__(message)
        self.lr = lr
        self.grad_norm = grad_norm
        self.batch_index = batch_index
        self.epoch = epoch


_TASK_DEFAULTS = {
    "classification": (50, 15),
    "anomaly_detection": (10, 3),
    "forecasting": (10, 3),
}


@dataclass(frozen=True)
class TrainConfig:
    task: str
    max_epochs: Optional[int] = None
    patience: Optional[int] = None
    batch_size: int = 64
    lr_max: float = 1e-3
    lr_start: float = 1e-6
    warmup_frac: float = 0.05
    warmup_steps: Optional[int] = None
    weight_decay: float = 0.01
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    policy: TuningPolicy = TuningPolicy()
    mode: str = "direct"  # direct | autoregressive (forecasting only)

    def __post_init__(self):
        if self.task not in _TASK_DEFAULTS:
            raise TrainingConfigError(f"unknown task {self.task!r}")
        if self.mode not in ("direct", "autoregressive"):
            raise TrainingConfigError(f"unknown mode {self.mode!r}")
        if self.mode == "autoregressive" and self.task != "forecasting":
            raise TrainingConfigError("autoregressive mode applies to forecasting only")
        if self.batch_size < 1:
            raise TrainingConfigError("batch_size must be >= 1")
        if self.lr_max <= 0 or self.lr_start <= 0:
            raise TrainingConfigError("learning rates must be positive")

    def resolved(self) -> "TrainConfig":
        epochs, patience = _TASK_DEFAULTS[self.task]
        return replace(
            self,
            max_epochs=self.max_epochs if self.max_epochs is not None else epochs,
            patience=self.patience if self.patience is not None else patience,
        )


def lr_at(step: int, cfg: TrainConfig, total_steps: int) -> float:
    """Linear ramp lr_start->lr_max over the warmup, then half-cosine decay
    back to lr_start at total_steps. Continuous at the junction."""
    if step < 0 or total_steps < 1:
        raise TrainingConfigError("step must be >= 0 and total_steps >= 1")
    warmup = cfg.warmup_steps if cfg.warmup_steps is not None else int(round(cfg.warmup_frac * total_steps))
    if warmup >= total_steps:
        raise TrainingConfigError(f"warmup_steps {warmup} must be < total_steps {total_steps}")
    if step <= warmup:
        if warmup == 0:
            return cfg.lr_max
        return cfg.lr_start + (cfg.lr_max - cfg.lr_start) * step / warmup
    progress = (step - warmup) / (total_steps - warmup)
    progress = min(progress, 1.0)
    return cfg.lr_start + (cfg.lr_max - cfg.lr_start) * 0.5 * (1.0 + math.cos(math.pi * progress))


def set_seed(seed: int) -> None:
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    seconds: float


@dataclass
class RunLog:
    seed: int
    epochs: list[EpochLog] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = math.inf
    stopped_early: bool = False
    total_seconds: float = 0.0

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "best_epoch": self.best_epoch,
            "best_val": self.best_val,
            "stopped_early": self.stopped_early,
            "total_seconds": self.total_seconds,
            "epochs": [vars(e) for e in self.epochs],
        }


@dataclass
class TaskBatches:
    """Numpy-side training arrays; images are pre-rendered once per dataset."""

    x: np.ndarray  # (B, L, C)
    y: Optional[np.ndarray]  # class ids / None (AD reconstructs x) / targets (B, F, C)
    images: Optional[np.ndarray] = None  # (B, 3, H, W)

    def __post_init__(self):
        if self.x.ndim != 3:
            raise ContractViolation(f"x must be (B, L, C), got {self.x.shape}")
        if self.images is not None and self.images.shape[0] != self.x.shape[0]:
            raise ContractViolation("one image per window required")

    @property
    def size(self) -> int:
        return self.x.shape[0]


def _task_loss(model: FusionModel, cfg: TrainConfig, xb: torch.Tensor, yb, images) -> torch.Tensor:
    out = model(xb, images=images)
    if cfg.task == "classification":
        return loss_cls(out.logits, yb)
    if cfg.task == "anomaly_detection":
        return loss_recon(out.reconstruction, xb.to(out.reconstruction.dtype))
    return loss_recon(out.forecast, yb)


def _evaluate_loss(model: FusionModel, cfg: TrainConfig, data: TaskBatches, batch_size: int) -> float:
    model.eval()
    total = 0.0
    count = 0
    with torch.no_grad():
        for xb, yb, images in iter_batches(data, batch_size, shuffle_rng=None):
            loss = _task_loss(model, cfg, xb, yb, images)
            total += float(loss) * xb.shape[0]
            count += xb.shape[0]
    model.train()
    return total / max(count, 1)


def iter_batches(data: TaskBatches, batch_size: int, shuffle_rng: Optional[np.random.Generator]):
    order = np.arange(data.size)
    if shuffle_rng is not None:
        order = shuffle_rng.permutation(order)
    for lo in range(0, data.size, batch_size):
        idx = order[lo : lo + batch_size]
        xb = torch.from_numpy(data.x[idx])
        yb = None
        if data.y is not None:
            yb = torch.from_numpy(np.asarray(data.y)[idx])
            if yb.dtype == torch.float64 or yb.dtype == torch.float32:
                yb = yb.float()
        images = torch.from_numpy(data.images[idx]) if data.images is not None else None
        yield xb, yb, images


def build_optimizer(model: FusionModel, cfg: TrainConfig) -> torch.optim.AdamW:
    groups = model.parameter_groups()
    decay, no_decay = [], []
    for tag, params in groups.items():
        for p in params:
            if not p.requires_grad:
                continue
            if tag == "layer_norm" or p.ndim <= 1:
                no_decay.append(p)
            else:
                decay.append(p)
    if not decay and not no_decay:
        raise TrainingConfigError("no trainable parameters under the active policy")
    return torch.optim.AdamW(
        [
            {"params": decay, "weight_decay": cfg.weight_decay},
            {"params": no_decay, "weight_decay": 0.0},
        ],
        lr=cfg.lr_start,
    )


def train_task(
    model: FusionModel,
    train_data: TaskBatches,
    val_data: TaskBatches,
    cfg: TrainConfig,
    seed: int = 0,
) -> RunLog:
    """Optimize with per-epoch validation and patience-based early stopping.

    The best-validation weights are restored before returning, so the
    restored model's validation loss equals the minimum recorded value.
    """
    cfg = cfg.resolved()
    set_seed(seed)
    model.apply_policy(cfg.policy)
    optimizer = build_optimizer(model, cfg)
    shuffle_rng = np.random.default_rng(seed)

    steps_per_epoch = max(1, math.ceil(train_data.size / cfg.batch_size))
    total_steps = steps_per_epoch * cfg.max_epochs
    log = RunLog(seed=seed)
    best_state = None
    bad_epochs = 0
    step = 0
    start = time.perf_counter()

    model.train()
    for epoch in range(cfg.max_epochs):
        epoch_start = time.perf_counter()
        running = 0.0
        seen = 0
        lr = cfg.lr_start
        for batch_index, (xb, yb, images) in enumerate(iter_batches(train_data, cfg.batch_size, shuffle_rng)):
            lr = lr_at(step, cfg, total_steps)
            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.zero_grad(set_to_none=True)
            loss = _task_loss(model, cfg, xb, yb, images)
            loss.backward()
            if not torch.isfinite(loss):
                grad_norm = math.sqrt(
                    sum(float((p.grad**2).sum()) for p in model.parameters() if p.grad is not None)
                )
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {batch_index} (lr={lr:.3g}, grad_norm={grad_norm:.3g})",
                    lr=lr,
                    grad_norm=grad_norm,
                    batch_index=batch_index,
                    epoch=epoch,
                )
            optimizer.step()
            running += float(loss.detach()) * xb.shape[0]
            seen += xb.shape[0]
            step += 1

        val_loss = _evaluate_loss(model, cfg, val_data, cfg.batch_size)
        log.epochs.append(
            EpochLog(
                epoch=epoch,
                train_loss=running / max(seen, 1),
                val_loss=val_loss,
                lr=lr,
                seconds=time.perf_counter() - epoch_start,
            )
        )
        if val_loss < log.best_val:
            log.best_val = val_loss
            log.best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                log.stopped_early = True
                break

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    log.total_seconds = time.perf_counter() - start
    return log


def forecast_autoregressive(model: FusionModel, context: np.ndarray, total_horizon: int) -> np.ndarray:
    """Roll a direct-horizon model forward until total_horizon steps are covered.

    Each round predicts the native horizon, appends it to the context, slides
    the window, and re-renders the plot for the extended window; overshoot is
    truncated.
    """
    if context.ndim != 3:
        raise ContractViolation(f"context must be (B, L, C), got {context.shape}")
    if total_horizon < 1:
        raise ContractViolation("total_horizon must be >= 1")
    step_horizon = model.cfg.task.horizon
    window_len = model.cfg.length
    model.eval()
    history = np.array(context, dtype=np.float64)
    outputs: list[np.ndarray] = []
    produced = 0
    with torch.no_grad():
        while produced < total_horizon:
            window = history[:, -window_len:, :]
            images = None
            if model.cfg.vision_enabled:
                images = torch.from_numpy(model.render_batch(window))
            pred = model(torch.from_numpy(window), images=images).forecast
            pred_np = pred.detach().cpu().double().numpy()
            outputs.append(pred_np)
            history = np.concatenate([history, pred_np], axis=1)
            produced += step_horizon
    return np.concatenate(outputs, axis=1)[:, :total_horizon, :]


# -- checkpointing ------------------------------------------------------------


def save_checkpoint(
    path: Union[str, Path], model: FusionModel, cfg: TrainConfig, log: RunLog, extra: Optional[dict] = None
) -> None:
    """One container: weight archive + train config + run log."""
    payload = {f"param:{name}": tensor.detach().cpu().numpy() for name, tensor in model.state_dict().items()}
    meta = {
        "train_config": {
            **{k: v for k, v in vars(cfg).items() if k not in ("policy", "seeds")},
            "policy": cfg.policy.name,
            "seeds": list(cfg.seeds),
        },
        "run_log": log.to_dict(),
        "extra": extra or {},
    }
    payload["meta"] = np.array(json.dumps(meta, sort_keys=True))
    np.savez(path, **payload)


def load_checkpoint(path: Union[str, Path], model: FusionModel) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such checkpoint: {path}")
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        state = {}
        for key in data.files:
            if key.startswith("param:"):
                state[key[len("param:") :]] = torch.from_numpy(data[key].copy())
    model.load_state_dict(state, strict=True)
    model.eval()
    return meta
