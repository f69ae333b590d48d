"""Metrics and multi-seed aggregation.

Anomaly-detection measures operate on per-step scores against binary step
labels. Thresholds sweep every unique score value plus +/-inf sentinels, so
the precision-recall curves are exact at desk scale. All standard deviations
are population (ddof=0).

The volume measure averages buffer-tolerant AUC-PR over buffer widths
0..max_buffer: each true segment is extended by a linear weight ramp of width
l on both sides (weight (l+1-k)/(l+1) at distance k, max-combined where ramps
overlap). Weighted true-positive mass feeds both precision and recall, with
recall clamped at 1 relative to the original positive count; at l=0 this
reduces exactly to plain AUC-PR.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

SCHEMA_VERSION = "plotfuse-metrics-v1"


class MetricError(ValueError):
    pass


# -- basics -------------------------------------------------------------------


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction correct; accepts (B, K) logits or already-argmaxed (B,) ids."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    preds = logits.argmax(axis=1) if logits.ndim == 2 else logits
    if preds.shape != labels.shape:
        raise MetricError(f"prediction shape {preds.shape} != label shape {labels.shape}")
    if preds.size == 0:
        raise MetricError("empty batch")
    return float((preds == labels).mean())


def mse_mae(y: np.ndarray, target: np.ndarray) -> tuple[float, float]:
    y = np.asarray(y, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if y.shape != target.shape:
        raise MetricError(f"shape mismatch: {y.shape} vs {target.shape}")
    diff = y - target
    return float((diff**2).mean()), float(np.abs(diff).mean())


# -- anomaly segments and point adjustment -------------------------------------


def label_segments(labels: np.ndarray) -> list[tuple[int, int]]:
    """Contiguous [start, end) runs of 1s."""
    labels = np.asarray(labels).astype(bool)
    if labels.ndim != 1:
        raise MetricError("labels must be 1-D")
    padded = np.concatenate([[False], labels, [False]])
    flips = np.flatnonzero(padded[1:] != padded[:-1])
    return [(int(flips[i]), int(flips[i + 1])) for i in range(0, len(flips), 2)]


def _threshold_sweep(scores: np.ndarray) -> np.ndarray:
    uniq = np.unique(scores)
    return np.concatenate([[-np.inf], uniq, [np.inf]])


@dataclass
class PointAdjustedResult:
    f1: float
    precision: float
    recall: float
    threshold: float


def point_adjusted_f1(
    scores: np.ndarray,
    labels: np.ndarray,
    thresholds: Optional[Sequence[float]] = None,
) -> Optional[PointAdjustedResult]:
    """Best point-adjusted F over a threshold sweep.

    For each threshold, any flagged point inside a true segment marks the
    whole segment detected (all its points count as true positives); flagged
    points outside true segments are false positives. Returns None when there
    are no positive labels (recall undefined).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise MetricError("scores and labels must be equal-length 1-D arrays")
    segments = label_segments(labels)
    if not segments:
        return None
    n_pos = int(labels.sum())
    sweep = np.asarray(thresholds, dtype=np.float64) if thresholds is not None else _threshold_sweep(scores)

    best: Optional[PointAdjustedResult] = None
    for thr in sweep:
        flags = scores >= thr
        tp = 0
        for start, end in segments:
            if flags[start:end].any():
                tp += end - start
        fp = int((flags & (labels == 0)).sum())
        fn = n_pos - tp
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        if best is None or f1 > best.f1:
            best = PointAdjustedResult(f1=f1, precision=precision, recall=recall, threshold=float(thr))
    return best


def unadjusted_f1(scores: np.ndarray, labels: np.ndarray) -> float:
    """Best plain point-wise F over the same threshold sweep (for comparisons)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    best = 0.0
    for thr in _threshold_sweep(scores):
        flags = scores >= thr
        tp = int((flags & labels).sum())
        fp = int((flags & ~labels).sum())
        fn = int((~flags & labels).sum())
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * p * r / (p + r) if p + r else 0.0
        best = max(best, f1)
    return best


# -- volume measure -------------------------------------------------------------


def buffer_weights(labels: np.ndarray, buffer: int) -> np.ndarray:
    """Label weights with a linear tolerance ramp of width ``buffer`` per side.

    Weight 1 inside true segments, (buffer+1-k)/(buffer+1) at distance k from
    the nearest segment edge (k = 1..buffer), 0 elsewhere; overlapping ramps
    take the max.
    """
    labels = np.asarray(labels).astype(np.int64)
    w = labels.astype(np.float64).copy()
    if buffer <= 0:
        return w
    n = len(labels)
    for start, end in label_segments(labels):
        for k in range(1, buffer + 1):
            ramp = (buffer + 1 - k) / (buffer + 1)
            left = start - k
            right = end - 1 + k
            if left >= 0:
                w[left] = max(w[left], ramp)
            if right < n:
                w[right] = max(w[right], ramp)
    return w


def weighted_auc_pr(scores: np.ndarray, weights: np.ndarray, n_pos: int) -> float:
    """Step-rule area under the weighted precision-recall curve.

    TPw(thr) = sum of weights over flagged points; precision = TPw/#flagged;
    recall = min(1, TPw/n_pos). Thresholds descend, so recall ascends from 0.
    """
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_weights = weights[order]
    cum_tp = np.cumsum(sorted_weights)
    counts = np.arange(1, len(scores) + 1, dtype=np.float64)
    # collapse ties: evaluate the curve only where the threshold changes
    boundary = np.flatnonzero(np.diff(sorted_scores) != 0.0)
    idx = np.concatenate([boundary, [len(scores) - 1]])
    precision = cum_tp[idx] / counts[idx]
    recall = np.minimum(1.0, cum_tp[idx] / n_pos)
    area = 0.0
    prev_recall = 0.0
    for p, r in zip(precision, recall):
        area += (r - prev_recall) * p
        prev_recall = r
    return float(area)


def auc_pr(scores: np.ndarray, labels: np.ndarray) -> Optional[float]:
    """Plain area under the PR curve (step rule, exact threshold sweep)."""
    labels = np.asarray(labels).astype(np.int64)
    n_pos = int(labels.sum())
    if n_pos == 0:
        return None
    return weighted_auc_pr(np.asarray(scores, dtype=np.float64), labels.astype(np.float64), n_pos)


def default_max_buffer(labels: np.ndarray) -> int:
    """Half the average true-segment length, rounded, capped at 100."""
    segments = label_segments(np.asarray(labels))
    if not segments:
        return 0
    avg = float(np.mean([end - start for start, end in segments]))
    return min(100, int(round(0.5 * avg)))


def vus_pr(scores: np.ndarray, labels: np.ndarray, max_buffer: Optional[int] = None) -> Optional[float]:
    """Mean of buffer-weighted AUC-PR over buffer widths 0..max_buffer."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise MetricError("scores and labels must be equal-length 1-D arrays")
    n_pos = int(labels.sum())
    if n_pos == 0:
        return None
    if max_buffer is None:
        max_buffer = default_max_buffer(labels)
    if max_buffer < 0:
        raise MetricError("max_buffer must be >= 0")
    areas = [
        weighted_auc_pr(scores, buffer_weights(labels, buf), n_pos) for buf in range(max_buffer + 1)
    ]
    return float(np.mean(areas))


# -- multi-seed reports -----------------------------------------------------------


def _population_std(values) -> float:
    if len(set(float(v) for v in values)) == 1:
        return 0.0
    return float(np.std(values))


@dataclass
class MetricReport:
    """Per-seed metric values for one configuration cell, plus axis labels."""

    task: str
    metrics: dict[str, list[float]]  # metric name -> one value per seed
    seeds: list[int]
    axis: dict[str, str] = field(default_factory=dict)  # e.g. {"layout": "grid"}

    def mean(self, name: str) -> float:
        return float(np.mean(self.metrics[name]))

    def std(self, name: str) -> Optional[float]:
        values = self.metrics[name]
        if len(values) < 2:
            return None
        return _population_std(values)

    def to_dict(self) -> dict:
        payload = {
            "schema_version": SCHEMA_VERSION,
            "task": self.task,
            "seeds": self.seeds,
            "axis": self.axis,
            "metrics": {},
        }
        for name, values in self.metrics.items():
            payload["metrics"][name] = {
                "per_seed": [float(v) for v in values],
                "mean": self.mean(name),
                "std": self.std(name),
            }
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> "MetricReport":
        if payload.get("schema_version") != SCHEMA_VERSION:
            raise MetricError(f"unsupported schema {payload.get('schema_version')!r}")
        metrics = {name: list(entry["per_seed"]) for name, entry in payload["metrics"].items()}
        return cls(task=payload["task"], metrics=metrics, seeds=list(payload["seeds"]), axis=dict(payload["axis"]))


def save_report(report: MetricReport, path: Union[str, Path]) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_report(path: Union[str, Path]) -> MetricReport:
    with open(path) as fh:
        return MetricReport.from_dict(json.load(fh))


def reports_to_csv(reports: Sequence[MetricReport], path: Union[str, Path]) -> None:
    """Flat CSV: one row per (report, metric) with mean/std and axis labels."""
    axis_keys = sorted({k for r in reports for k in r.axis})
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task", *axis_keys, "metric", "mean", "std", "n_seeds"])
        for r in reports:
            for name in sorted(r.metrics):
                std = r.std(name)
                writer.writerow(
                    [r.task, *[r.axis.get(k, "") for k in axis_keys], name, f"{r.mean(name):.10g}",
                     "" if std is None else f"{std:.10g}", len(r.seeds)]
                )


def aggregate(reports: Sequence[MetricReport], axis: Optional[str] = None) -> MetricReport:
    """Pool per-seed values; with ``axis``, the std of per-axis-value means.

    Without an axis, reports are pooled seed-wise (they must share metrics).
    With an axis (e.g. the patch-size sweep), each metric additionally gets
    ``<name>_axis_std``: the std over the per-axis-value seed means.
    """
    if not reports:
        raise MetricError("nothing to aggregate")
    task = reports[0].task
    names = sorted(set.intersection(*(set(r.metrics) for r in reports)))
    if not names:
        raise MetricError("reports share no metrics")
    pooled: dict[str, list[float]] = {name: [] for name in names}
    seeds: list[int] = []
    for r in reports:
        seeds.extend(r.seeds)
        for name in names:
            pooled[name].extend(r.metrics[name])
    out = MetricReport(task=task, metrics=pooled, seeds=seeds, axis={"aggregated": str(len(reports))})
    if axis is not None:
        values = sorted({r.axis.get(axis, "") for r in reports})
        for name in names:
            means = []
            for value in values:
                sub = [r.mean(name) for r in reports if r.axis.get(axis, "") == value]
                if sub:
                    means.append(float(np.mean(sub)))
            out.metrics[f"{name}_axis_std"] = [_population_std(means)] if len(means) > 1 else [0.0]
        out.axis["axis"] = axis
    return out
