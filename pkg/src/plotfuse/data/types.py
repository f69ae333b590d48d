"""Core dataset containers: series instances, window batches, datasets."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

TASKS = ("classification", "anomaly_detection", "forecasting")


class DataError(ValueError):
    """Raised for schema/invariant violations in dataset containers."""


@dataclass
class SeriesInstance:
    """One multivariate series of shape (length, channels).

    ``step_labels`` (binary, 1 = anomalous) and ``class_label`` are optional
    and task-dependent. Values must be finite: non-finite handling happens at
    ingestion, never here.
    """

    values: np.ndarray
    channel_names: Optional[list[str]] = None
    step_labels: Optional[np.ndarray] = None
    class_label: Optional[int] = None
    source: str = ""

    def __post_init__(self):
        self.values = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        if self.values.ndim != 2:
            raise DataError(f"values must be 2-D (length, channels), got shape {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise DataError("values contain non-finite entries; ingest with an explicit NaN policy")
        if self.step_labels is not None:
            self.step_labels = np.ascontiguousarray(np.asarray(self.step_labels, dtype=np.int64))
            if self.step_labels.shape != (self.values.shape[0],):
                raise DataError(
                    f"step_labels length {self.step_labels.shape} must match series length {self.values.shape[0]}"
                )
            if not np.isin(self.step_labels, (0, 1)).all():
                raise DataError("step_labels must be binary")
        if self.channel_names is not None and len(self.channel_names) != self.values.shape[1]:
            raise DataError("channel_names length must match channel count")
        if self.class_label is not None:
            self.class_label = int(self.class_label)

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    def slice_steps(self, start: int, stop: int) -> "SeriesInstance":
        """Chronological slice [start, stop) with labels sliced in lockstep."""
        labels = None if self.step_labels is None else self.step_labels[start:stop].copy()
        return SeriesInstance(
            values=self.values[start:stop].copy(),
            channel_names=self.channel_names,
            step_labels=labels,
            class_label=self.class_label,
            source=self.source,
        )


@dataclass
class WindowBatch:
    """A batch of fixed-length windows (B, L, C) with task-dependent labels.

    ``labels`` is one of: class ids (B,), step labels (B, L), or forecast
    targets (B, F, C); ``label_kind`` says which. ``window_origin`` records
    (instance source, start index) per window.
    """

    x: np.ndarray
    labels: Optional[np.ndarray] = None
    label_kind: Optional[str] = None  # class | step | target
    window_origin: list[tuple[str, int]] = field(default_factory=list)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 3:
            raise DataError(f"window batch must be 3-D (B, L, C), got {self.x.shape}")
        b = self.x.shape[0]
        if self.window_origin and len(self.window_origin) != b:
            raise DataError("window_origin must have one entry per window")
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.label_kind == "class" and self.labels.shape != (b,):
                raise DataError("class labels must have shape (B,)")
            if self.label_kind == "step" and self.labels.shape != self.x.shape[:2]:
                raise DataError("step labels must have shape (B, L)")
            if self.label_kind == "target" and (
                self.labels.ndim != 3 or self.labels.shape[0] != b or self.labels.shape[2] != self.x.shape[2]
            ):
                raise DataError("forecast targets must have shape (B, F, C)")

    @property
    def batch(self) -> int:
        return self.x.shape[0]

    @property
    def length(self) -> int:
        return self.x.shape[1]

    @property
    def channels(self) -> int:
        return self.x.shape[2]


@dataclass
class SeriesDataset:
    """A named collection of instances for one task, plus free-form notes."""

    name: str
    task: str
    instances: list[SeriesInstance]
    notes: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.task not in TASKS:
            raise DataError(f"unknown task {self.task!r}; expected one of {TASKS}")

    def __len__(self) -> int:
        return len(self.instances)

    def with_instances(self, instances: Sequence[SeriesInstance], note: Optional[str] = None) -> "SeriesDataset":
        notes = list(self.notes) + ([note] if note else [])
        return replace(self, instances=list(instances), notes=notes)

    def channel_count(self) -> int:
        counts = {inst.channels for inst in self.instances}
        if len(counts) > 1:
            raise DataError(f"inconsistent channel counts across instances: {sorted(counts)}")
        return counts.pop() if counts else 0
