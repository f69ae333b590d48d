"""Window extraction, chronological splits, and few-shot subsetting."""

from __future__ import annotations

import math
import warnings
from typing import Optional

import numpy as np

from .types import DataError, SeriesDataset, SeriesInstance, WindowBatch


class WindowWarning(UserWarning):
    """Emitted when a windowing request yields no windows."""


def window_count(raw_length: int, length: int, stride: int) -> int:
    """Number of full windows: floor((L_raw - L) / stride) + 1 for L <= L_raw."""
    if length > raw_length:
        return 0
    return (raw_length - length) // stride + 1


def sliding_windows(
    instance: SeriesInstance,
    length: int,
    stride: int,
    horizon: int = 0,
) -> WindowBatch:
    """Cut fixed-length windows starting at 0, stride, 2*stride, ...

    The trailing partial window is dropped. With ``horizon > 0`` each window
    is paired with the ``horizon`` steps that immediately follow it (forecast
    targets); otherwise step labels or the class label are sliced in lockstep.
    """
    if length < 1 or stride < 1 or horizon < 0:
        raise DataError("length and stride must be positive, horizon non-negative")
    needed = length + horizon
    n = window_count(instance.length, needed, stride)
    c = instance.channels
    if n == 0:
        warnings.warn(
            f"window length {length}+{horizon} exceeds series length {instance.length}; no windows",
            WindowWarning,
        )
        return WindowBatch(x=np.empty((0, length, c)), window_origin=[])

    starts = [i * stride for i in range(n)]
    x = np.stack([instance.values[s : s + length] for s in starts])
    origin = [(instance.source, s) for s in starts]

    if horizon > 0:
        targets = np.stack([instance.values[s + length : s + length + horizon] for s in starts])
        return WindowBatch(x=x, labels=targets, label_kind="target", window_origin=origin)
    if instance.step_labels is not None:
        step = np.stack([instance.step_labels[s : s + length] for s in starts])
        return WindowBatch(x=x, labels=step, label_kind="step", window_origin=origin)
    if instance.class_label is not None:
        cls = np.full(n, instance.class_label, dtype=np.int64)
        return WindowBatch(x=x, labels=cls, label_kind="class", window_origin=origin)
    return WindowBatch(x=x, window_origin=origin)


def chronological_splits(
    instance: SeriesInstance,
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2),
    borders: Optional[tuple[int, int]] = None,
) -> tuple[SeriesInstance, SeriesInstance, SeriesInstance]:
    """Train/val/test slices of one long series.

    Ratio-based borders by default; a dataset manifest may supply explicit
    ``borders`` (two indices) instead.
    """
    n = instance.length
    if borders is None:
        if not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
            raise DataError(f"split ratios must sum to 1, got {ratios}")
        b1 = int(round(n * ratios[0]))
        b2 = int(round(n * (ratios[0] + ratios[1])))
    else:
        b1, b2 = borders
    if not (0 < b1 <= b2 <= n):
        raise DataError(f"invalid split borders ({b1}, {b2}) for length {n}")
    return instance.slice_steps(0, b1), instance.slice_steps(b1, b2), instance.slice_steps(b2, n)


def stratified_split(
    dataset: SeriesDataset, fraction: float, seed: int = 0
) -> tuple[SeriesDataset, SeriesDataset]:
    """Split a classification dataset into (rest, held-out fraction) per class."""
    if dataset.task != "classification":
        raise DataError("stratified_split applies to classification datasets")
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[int]] = {}
    for i, inst in enumerate(dataset.instances):
        if inst.class_label is None:
            raise DataError("classification instances must carry class labels")
        by_class.setdefault(inst.class_label, []).append(i)
    held: list[int] = []
    for label in sorted(by_class):
        idx = np.array(by_class[label])
        k = max(1, int(math.floor(fraction * len(idx)))) if fraction > 0 else 0
        held.extend(rng.permutation(idx)[:k].tolist())
    held_set = set(held)
    rest = [inst for i, inst in enumerate(dataset.instances) if i not in held_set]
    out = [dataset.instances[i] for i in sorted(held_set)]
    return dataset.with_instances(rest), dataset.with_instances(out)


def few_shot_subset(dataset: SeriesDataset, fraction: float, task: Optional[str] = None, seed: int = 0) -> SeriesDataset:
    """Keep ``fraction`` of the training data.

    Classification: seeded stratified subset per class (at least one instance
    per class, recorded in the dataset notes when flooring hits zero).
    Forecasting / anomaly detection: the chronologically first fraction of
    each series, preserving temporal order.
    """
    if not (0.0 < fraction <= 1.0):
        raise DataError(f"fraction must be in (0, 1], got {fraction}")
    if len(dataset.instances) == 0:
        raise DataError("few_shot_subset requires a non-empty dataset")
    task = task or dataset.task
    if fraction == 1.0:
        return dataset.with_instances([inst for inst in dataset.instances])

    if task == "classification":
        rng = np.random.default_rng(seed)
        by_class: dict[int, list[int]] = {}
        for i, inst in enumerate(dataset.instances):
            if inst.class_label is None:
                raise DataError("classification instances must carry class labels")
            by_class.setdefault(inst.class_label, []).append(i)
        keep: list[int] = []
        adjusted = []
        for label in sorted(by_class):
            idx = np.array(by_class[label])
            k = int(math.floor(fraction * len(idx)))
            if k < 1:
                k = 1
                adjusted.append(label)
            keep.extend(rng.permutation(idx)[:k].tolist())
        note = None
        if adjusted:
            note = f"few_shot: kept one instance for classes {adjusted} (floor gave 0)"
        return dataset.with_instances([dataset.instances[i] for i in sorted(keep)], note=note)

    truncated = []
    for inst in dataset.instances:
        keep_steps = int(math.floor(fraction * inst.length))
        truncated.append(inst.slice_steps(0, keep_steps))
    return dataset.with_instances(truncated, note=f"few_shot: first {fraction:.0%} of each series")
