from .io import (
    IngestionError,
    IngestionReport,
    IngestionResult,
    load_dataset_from_manifest,
    load_manifest,
    load_series,
    save_series,
)
from .synthetic import SyntheticSpec, make_synthetic
from .types import DataError, SeriesDataset, SeriesInstance, WindowBatch
from .windows import (
    WindowWarning,
    chronological_splits,
    few_shot_subset,
    sliding_windows,
    stratified_split,
    window_count,
)

__all__ = [
    "DataError",
    "IngestionError",
    "IngestionReport",
    "IngestionResult",
    "SeriesDataset",
    "SeriesInstance",
    "SyntheticSpec",
    "WindowBatch",
    "WindowWarning",
    "chronological_splits",
    "few_shot_subset",
    "load_dataset_from_manifest",
    "load_manifest",
    "load_series",
    "make_synthetic",
    "save_series",
    "sliding_windows",
    "stratified_split",
    "window_count",
]
