"""Seeded synthetic benchmark datasets for the three tasks.

Three generators:

* ``class_motifs`` - K classes of sinusoid mixtures with distinct base
  frequencies plus Gaussian noise at a given SNR (classification).
* ``anomaly_injected`` - smooth base signal with injected level-shift
  segments and point spikes, step labels marking injected regions (AD).
* ``seasonal_trend`` - sum of sinusoids plus a linear trend (forecasting).

A given (spec, seed) pair always produces bit-identical arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .types import DataError, SeriesDataset, SeriesInstance

_KINDS = ("class_motifs", "seasonal_trend", "anomaly_injected")

_DEFAULTS: dict[str, dict[str, Any]] = {
    "class_motifs": dict(
        n_instances=200,
        length=128,
        channels=2,
        n_classes=2,
        class_freqs=None,  # cycles per window; default 2 + 3k keeps harmonics from colliding
        snr_db=10.0,
        harmonic=True,
    ),
    "anomaly_injected": dict(
        length=2000,
        channels=3,
        n_segments=3,
        segment_length=20,
        segment_shift=3.0,
        n_spikes=0,
        spike_scale=6.0,
        noise_sigma=0.1,
        clean_fraction=0.8,
        base_period=100.0,
    ),
    "seasonal_trend": dict(
        length=1200,
        channels=3,
        periods=(48.0, 120.0),
        amplitudes=(1.0, 0.4),
        trend_slope=0.001,
        noise_sigma=0.05,
    ),
}


@dataclass(frozen=True)
class SyntheticSpec:
    """Declarative description of a synthetic dataset."""

    kind: str
    seed: int
    parameters: dict[str, Any] = field(default_factory=dict)

    def resolved(self) -> dict[str, Any]:
        if self.kind not in _KINDS:
            raise DataError(f"unknown synthetic kind {self.kind!r}; expected one of {_KINDS}")
        params = dict(_DEFAULTS[self.kind])
        unknown = set(self.parameters) - set(params)
        if unknown:
            raise DataError(f"unknown parameters for {self.kind}: {sorted(unknown)}")
        params.update(self.parameters)
        return params


def make_synthetic(spec: SyntheticSpec) -> SeriesDataset:
    """Generate the dataset described by ``spec`` (deterministic per seed)."""
    params = spec.resolved()
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "class_motifs":
        return _class_motifs(rng, spec, params)
    if spec.kind == "anomaly_injected":
        return _anomaly_injected(rng, spec, params)
    return _seasonal_trend(rng, spec, params)


def _snr_noise_sigma(signal: np.ndarray, snr_db: float) -> float:
    power = float(np.mean(signal**2))
    return float(np.sqrt(power * 10.0 ** (-snr_db / 10.0)))


def _class_motifs(rng, spec, p) -> SeriesDataset:
    k = int(p["n_classes"])
    if k < 2:
        raise DataError("class_motifs needs n_classes >= 2")
    freqs = p["class_freqs"]
    if freqs is None:
        freqs = [2.0 + 3.0 * i for i in range(k)]
    if len(freqs) != k:
        raise DataError("class_freqs must list one base frequency per class")
    length, channels = int(p["length"]), int(p["channels"])
    t = np.arange(length) / length
    notes = []
    if p["snr_db"] <= 0:
        notes.append(f"snr_db={p['snr_db']} <= 0 dB: classes may not be separable")

    instances = []
    for i in range(int(p["n_instances"])):
        label = i % k
        base = float(freqs[label])
        x = np.empty((length, channels))
        for c in range(channels):
            phase = rng.uniform(0, 2 * np.pi)
            sig = np.sin(2 * np.pi * base * t + phase)
            if p["harmonic"]:
                sig = sig + 0.5 * np.sin(2 * np.pi * 2 * base * t + rng.uniform(0, 2 * np.pi))
            sigma = _snr_noise_sigma(sig, float(p["snr_db"]))
            x[:, c] = sig + sigma * rng.standard_normal(length)
        instances.append(SeriesInstance(values=x, class_label=label, source=f"motif_{i}"))
    return SeriesDataset(name=f"class_motifs_seed{spec.seed}", task="classification", instances=instances, notes=notes)


def _place_segments(rng, lo: int, hi: int, count: int, seg_len: int) -> list[int]:
    """Draw ``count`` non-overlapping segment starts in [lo, hi - seg_len]."""
    if hi - lo < count * seg_len:
        raise DataError("anomalous region too short for the requested segments")
    starts: list[int] = []
    for _ in range(10000):
        if len(starts) == count:
            break
        cand = int(rng.integers(lo, hi - seg_len + 1))
        if all(cand + seg_len <= s or s + seg_len <= cand for s in starts):
            starts.append(cand)
    if len(starts) != count:
        raise DataError("could not place non-overlapping anomaly segments; lower count or length")
    return sorted(starts)


def _anomaly_injected(rng, spec, p) -> SeriesDataset:
    length, channels = int(p["length"]), int(p["channels"])
    t = np.arange(length, dtype=np.float64)
    x = np.empty((length, channels))
    period = float(p["base_period"])
    for c in range(channels):
        phase = rng.uniform(0, 2 * np.pi)
        scale = rng.uniform(0.8, 1.2)
        x[:, c] = scale * np.sin(2 * np.pi * t / period + phase) + float(p["noise_sigma"]) * rng.standard_normal(length)

    labels = np.zeros(length, dtype=np.int64)
    lo = int(np.ceil(float(p["clean_fraction"]) * length))
    seg_len = int(p["segment_length"])
    n_seg = int(p["n_segments"])
    if n_seg > 0:
        for start in _place_segments(rng, lo, length, n_seg, seg_len):
            chan = int(rng.integers(0, channels))
            sign = 1.0 if rng.uniform() < 0.5 else -1.0
            x[start : start + seg_len, chan] += sign * float(p["segment_shift"])
            labels[start : start + seg_len] = 1

    n_spikes = int(p["n_spikes"])
    for _ in range(n_spikes):
        pos = int(rng.integers(lo, length))
        chan = int(rng.integers(0, channels))
        sign = 1.0 if rng.uniform() < 0.5 else -1.0
        x[pos, chan] += sign * float(p["spike_scale"])
        labels[pos] = 1

    inst = SeriesInstance(values=x, step_labels=labels, source="anomaly_series")
    return SeriesDataset(name=f"anomaly_injected_seed{spec.seed}", task="anomaly_detection", instances=[inst])


def _seasonal_trend(rng, spec, p) -> SeriesDataset:
    length, channels = int(p["length"]), int(p["channels"])
    periods = [float(v) for v in p["periods"]]
    amps = [float(v) for v in p["amplitudes"]]
    if len(periods) != len(amps):
        raise DataError("periods and amplitudes must have equal length")
    t = np.arange(length, dtype=np.float64)
    x = np.empty((length, channels))
    for c in range(channels):
        sig = float(p["trend_slope"]) * t
        for period, amp in zip(periods, amps):
            sig = sig + amp * np.sin(2 * np.pi * t / period + rng.uniform(0, 2 * np.pi))
        x[:, c] = sig + float(p["noise_sigma"]) * rng.standard_normal(length)
    inst = SeriesInstance(values=x, source="seasonal_trend_series")
    return SeriesDataset(name=f"seasonal_trend_seed{spec.seed}", task="forecasting", instances=[inst])
