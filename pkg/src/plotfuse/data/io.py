"""Dataset ingestion and persistence.

Supported formats:

* ``csv_wide`` - one row per time step, one column per channel; optional
  header; an optional trailing column named ``label`` carries binary step
  labels. One file = one instance.
* ``ts_uea_like`` - one instance per line; channels separated by ``:``,
  values comma-separated, the final ``:``-field is the integer class label.
  Lines starting with ``@`` or ``#`` are ignored.
* ``npz_like`` - numpy archive written by :func:`save_series`.

Non-finite values are handled per ``nan_policy``: ``reject`` (error naming
the offending row), ``drop`` (remove the row), or ``impute`` (per-channel
linear interpolation). The ingestion report lists every dropped/imputed row.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
import yaml

from .types import DataError, SeriesDataset, SeriesInstance

FORMATS = ("csv_wide", "ts_uea_like", "npz_like")
NAN_POLICIES = ("reject", "drop", "impute")


class IngestionError(DataError):
    """Raised when a file does not parse under the declared format/policy."""


@dataclass
class IngestionReport:
    path: str
    format: str
    dropped_rows: list[int] = field(default_factory=list)
    imputed_rows: list[int] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)


@dataclass
class IngestionResult:
    """Instances plus the ingestion report (dropped/imputed rows)."""

    instances: list[SeriesInstance]
    report: IngestionReport

    def __iter__(self):
        return iter(self.instances)

    def __len__(self):
        return len(self.instances)


def load_series(path: Union[str, Path], format: str, nan_policy: str = "reject") -> IngestionResult:
    """Parse ``path`` under the declared ``format`` into series instances."""
    path = Path(path)
    if format not in FORMATS:
        raise IngestionError(f"unknown format {format!r}; expected one of {FORMATS}")
    if nan_policy not in NAN_POLICIES:
        raise IngestionError(f"unknown nan_policy {nan_policy!r}; expected one of {NAN_POLICIES}")
    if not path.exists():
        raise IngestionError(f"no such file: {path}")
    report = IngestionReport(path=str(path), format=format)
    if format == "csv_wide":
        instances = [_load_csv_wide(path, nan_policy, report)]
    elif format == "ts_uea_like":
        instances = _load_ts_uea_like(path, report)
    else:
        instances = _load_npz(path, report)
    channel_counts = {inst.channels for inst in instances}
    if len(channel_counts) > 1:
        raise IngestionError(f"{path}: inconsistent channel counts across instances: {sorted(channel_counts)}")
    return IngestionResult(instances=instances, report=report)


def _apply_nan_policy(values: np.ndarray, line_numbers: list[int], policy: str, path: Path, report: IngestionReport):
    """Returns (values, keep_mask); keep_mask marks surviving rows."""
    keep = np.ones(values.shape[0], dtype=bool)
    bad = ~np.isfinite(values).all(axis=1)
    if not bad.any():
        return values, keep
    first = int(np.argmax(bad))
    if policy == "reject":
        raise IngestionError(f"{path}: non-finite value at line {line_numbers[first]} (policy=reject)")
    if policy == "drop":
        report.dropped_rows.extend(line_numbers[i] for i in np.flatnonzero(bad))
        keep = ~bad
        if not keep.any():
            raise IngestionError(f"{path}: all rows dropped by nan_policy=drop")
        return values[keep], keep
    # impute: per-channel linear interpolation over the finite support
    report.imputed_rows.extend(line_numbers[i] for i in np.flatnonzero(bad))
    out = values.copy()
    idx = np.arange(values.shape[0], dtype=np.float64)
    for c in range(values.shape[1]):
        col = out[:, c]
        finite = np.isfinite(col)
        if not finite.any():
            raise IngestionError(f"{path}: column {c} has no finite values to impute from")
        out[:, c] = np.interp(idx, idx[finite], col[finite])
    return out, keep


def _load_csv_wide(path: Path, nan_policy: str, report: IngestionReport) -> SeriesInstance:
    rows: list[list[str]] = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if row and any(cell.strip() for cell in row):
                rows.append([cell.strip() for cell in row])
    if not rows:
        raise IngestionError(f"{path}: empty file")

    header: Optional[list[str]] = None
    start = 0
    if not _all_numeric(rows[0]):
        header = rows[0]
        start = 1
        if len(rows) == 1:
            raise IngestionError(f"{path}: header-only file")

    width = len(rows[start])
    label_col = None
    channel_names = None
    if header is not None:
        if len(header) != width:
            raise IngestionError(f"{path}: header width {len(header)} != data width {width} at line {start + 1}")
        lowered = [h.lower() for h in header]
        if lowered and lowered[-1] == "label":
            label_col = width - 1
        channel_names = [h for i, h in enumerate(header) if i != label_col]

    values = np.empty((len(rows) - start, width))
    line_numbers = []
    for i, row in enumerate(rows[start:]):
        lineno = start + i + 1  # 1-based file line
        if len(row) != width:
            raise IngestionError(f"{path}: line {lineno}: expected {width} columns, got {len(row)}")
        for j, cell in enumerate(row):
            try:
                values[i, j] = float(cell) if cell not in ("", "NA", "na") else np.nan
            except ValueError:
                raise IngestionError(f"{path}: line {lineno}: cannot parse {cell!r} as a number") from None
        line_numbers.append(lineno)

    step_labels = None
    if label_col is not None:
        raw_labels = values[:, label_col]
        values = np.delete(values, label_col, axis=1)
        if not np.isin(raw_labels[np.isfinite(raw_labels)], (0.0, 1.0)).all():
            raise IngestionError(f"{path}: label column must be binary")
        step_labels = raw_labels

    values, keep = _apply_nan_policy(values, line_numbers, nan_policy, path, report)
    if step_labels is not None:
        step_labels = np.nan_to_num(step_labels[keep], nan=0.0).astype(np.int64)
    return SeriesInstance(values=values, channel_names=channel_names, step_labels=step_labels, source=path.stem)


def _all_numeric(cells: list[str]) -> bool:
    for cell in cells:
        if cell in ("", "NA", "na", "nan", "NaN"):
            continue
        try:
            float(cell)
        except ValueError:
            return False
    return True


def _load_ts_uea_like(path: Path, report: IngestionReport) -> list[SeriesInstance]:
    instances = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith(("@", "#")):
                continue
            parts = line.split(":")
            if len(parts) < 2:
                raise IngestionError(f"{path}: line {lineno}: expected 'series:...:label'")
            try:
                label = int(parts[-1])
            except ValueError:
                raise IngestionError(f"{path}: line {lineno}: trailing field {parts[-1]!r} is not a class label") from None
            channels = []
            for chan in parts[:-1]:
                try:
                    channels.append(np.array([float(v) for v in chan.split(",")]))
                except ValueError:
                    raise IngestionError(f"{path}: line {lineno}: cannot parse channel values") from None
            lengths = {len(c) for c in channels}
            if len(lengths) != 1:
                raise IngestionError(f"{path}: line {lineno}: channels have unequal lengths {sorted(lengths)}")
            values = np.stack(channels, axis=1)
            if not np.isfinite(values).all():
                raise IngestionError(f"{path}: line {lineno}: non-finite value (policy=reject)")
            instances.append(SeriesInstance(values=values, class_label=label, source=f"{path.stem}#{len(instances)}"))
    if not instances:
        raise IngestionError(f"{path}: no instances found")
    return instances


_NPZ_MAGIC = "plotfuse-series-v1"


def save_series(path: Union[str, Path], instances: list[SeriesInstance]) -> None:
    """Persist instances to an ``npz_like`` archive (round-trips bit-exact)."""
    payload: dict[str, np.ndarray] = {"schema": np.array(_NPZ_MAGIC), "n_instances": np.array(len(instances))}
    for i, inst in enumerate(instances):
        payload[f"values_{i}"] = inst.values
        if inst.step_labels is not None:
            payload[f"step_labels_{i}"] = inst.step_labels
        if inst.class_label is not None:
            payload[f"class_label_{i}"] = np.array(inst.class_label)
        if inst.channel_names is not None:
            payload[f"channel_names_{i}"] = np.array(inst.channel_names)
    np.savez(path, **payload)


def _load_npz(path: Path, report: IngestionReport) -> list[SeriesInstance]:
    try:
        with np.load(path, allow_pickle=False) as data:
            if "schema" not in data or str(data["schema"]) != _NPZ_MAGIC:
                raise IngestionError(f"{path}: not a {_NPZ_MAGIC} archive")
            n = int(data["n_instances"])
            instances = []
            for i in range(n):
                key = f"values_{i}"
                if key not in data:
                    raise IngestionError(f"{path}: missing array {key}")
                step = data[f"step_labels_{i}"] if f"step_labels_{i}" in data else None
                cls = int(data[f"class_label_{i}"]) if f"class_label_{i}" in data else None
                names = [str(s) for s in data[f"channel_names_{i}"]] if f"channel_names_{i}" in data else None
                instances.append(
                    SeriesInstance(
                        values=data[key],
                        step_labels=step,
                        class_label=cls,
                        channel_names=names,
                        source=f"{path.stem}#{i}",
                    )
                )
    except (OSError, ValueError) as exc:
        raise IngestionError(f"{path}: cannot read npz archive: {exc}") from exc
    return instances


def load_manifest(path: Union[str, Path]) -> dict:
    """Read a dataset manifest (YAML): files, format, task, split borders."""
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"no such manifest: {path}")
    with open(path) as fh:
        manifest = yaml.safe_load(fh)
    if not isinstance(manifest, dict):
        raise IngestionError(f"{path}: manifest must be a mapping")
    for key in ("task", "format"):
        if key not in manifest:
            raise IngestionError(f"{path}: manifest missing required key {key!r}")
    return manifest


def load_dataset_from_manifest(path: Union[str, Path]) -> dict[str, SeriesDataset]:
    """Materialize datasets for each split declared by the manifest."""
    path = Path(path)
    manifest = load_manifest(path)
    task = manifest["task"]
    fmt = manifest["format"]
    policy = manifest.get("nan_policy", "reject")
    name = manifest.get("name", path.stem)
    files = manifest.get("files")
    if not isinstance(files, dict) or not files:
        raise IngestionError(f"{path}: manifest needs a files: {{split: path}} mapping")
    out = {}
    for split, rel in files.items():
        file_path = (path.parent / rel) if not Path(rel).is_absolute() else Path(rel)
        result = load_series(file_path, fmt, nan_policy=policy)
        notes = [f"ingested {len(result.instances)} instances from {file_path}"]
        out[split] = SeriesDataset(name=f"{name}/{split}", task=task, instances=result.instances, notes=notes)
    return out


def manifest_splits(manifest: dict) -> Optional[tuple[int, int]]:
    borders = manifest.get("split_borders")
    if borders is None:
        return None
    if not (isinstance(borders, (list, tuple)) and len(borders) == 2):
        raise IngestionError("split_borders must be two indices")
    return int(borders[0]), int(borders[1])


def write_metric_json(path: Union[str, Path], payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
