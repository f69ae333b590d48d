import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plotfuse.data import (
    DataError,
    IngestionError,
    SeriesDataset,
    SeriesInstance,
    SyntheticSpec,
    WindowWarning,
    chronological_splits,
    few_shot_subset,
    load_series,
    make_synthetic,
    save_series,
    sliding_windows,
    window_count,
)


def test_csv_wide_shape_mapping(tmp_path):
    rng = np.random.default_rng(0)
    data = rng.normal(size=(100, 3))
    path = tmp_path / "plain.csv"
    np.savetxt(path, data, delimiter=",")
    result = load_series(path, "csv_wide")
    assert len(result.instances) == 1
    inst = result.instances[0]
    assert inst.values.shape == (100, 3)
    np.testing.assert_allclose(inst.values, data, rtol=1e-12)


def test_csv_nan_reject_names_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("1.0,2.0\n3.0,nan\n5.0,6.0\n")
    with pytest.raises(IngestionError, match="line 2"):
        load_series(path, "csv_wide", nan_policy="reject")


def test_csv_nan_impute_and_drop(tmp_path):
    path = tmp_path / "gaps.csv"
    path.write_text("0.0,10.0\n,20.0\n2.0,30.0\n")
    imputed = load_series(path, "csv_wide", nan_policy="impute")
    np.testing.assert_allclose(imputed.instances[0].values[:, 0], [0.0, 1.0, 2.0])
    assert imputed.report.imputed_rows == [2]
    dropped = load_series(path, "csv_wide", nan_policy="drop")
    assert dropped.instances[0].values.shape == (2, 2)
    assert dropped.report.dropped_rows == [2]


def test_csv_header_with_label_column(tmp_path):
    path = tmp_path / "labeled.csv"
    path.write_text("a,b,label\n1.0,2.0,0\n3.0,4.0,1\n")
    inst = load_series(path, "csv_wide").instances[0]
    assert inst.channel_names == ["a", "b"]
    assert inst.values.shape == (2, 2)
    np.testing.assert_array_equal(inst.step_labels, [0, 1])


def test_csv_format_mismatch_names_line(tmp_path):
    path = tmp_path / "ragged.csv"
    path.write_text("1.0,2.0\n3.0\n")
    with pytest.raises(IngestionError, match="line 2"):
        load_series(path, "csv_wide")


def test_ts_uea_like(tmp_path):
    path = tmp_path / "toy.ts"
    path.write_text("@problemName toy\n# comment\n1,2,3:4,5,6:0\n7,8,9:1,2,3:1\n")
    result = load_series(path, "ts_uea_like")
    assert [inst.class_label for inst in result.instances] == [0, 1]
    assert result.instances[0].values.shape == (3, 2)
    np.testing.assert_array_equal(result.instances[0].values[:, 0], [1, 2, 3])


def test_npz_round_trip_bit_exact(tmp_path):
    ds = make_synthetic(SyntheticSpec(kind="class_motifs", seed=5, parameters={"n_instances": 2, "length": 20}))
    path = tmp_path / "pair.npz"
    save_series(path, ds.instances)
    back = load_series(path, "npz_like").instances
    assert len(back) == 2
    for orig, loaded in zip(ds.instances, back):
        assert orig.values.tobytes() == loaded.values.tobytes()
        assert orig.class_label == loaded.class_label


def test_inconsistent_channel_counts_rejected(tmp_path):
    path = tmp_path / "mixed.ts"
    path.write_text("1,2:3,4:0\n1,2:3,4:5,6:1\n")
    with pytest.raises(IngestionError, match="channel counts"):
        load_series(path, "ts_uea_like")


def test_nonfinite_series_instance_rejected():
    with pytest.raises(DataError, match="non-finite"):
        SeriesInstance(values=np.array([[1.0], [np.nan]]))


# -- windows -------------------------------------------------------------------


def brute_force_window_starts(raw_length, length, stride):
    return [s for s in range(0, raw_length + 1, stride) if s + length <= raw_length]


@settings(max_examples=200, deadline=None)
@given(
    raw_length=st.integers(min_value=1, max_value=50),
    length=st.integers(min_value=1, max_value=50),
    stride=st.integers(min_value=1, max_value=10),
)
def test_window_count_formula_matches_enumeration(raw_length, length, stride):
    assert window_count(raw_length, length, stride) == len(brute_force_window_starts(raw_length, length, stride))


def test_sliding_windows_stride_arithmetic():
    inst = SeriesInstance(values=np.arange(10, dtype=float).reshape(10, 1))
    batch = sliding_windows(inst, length=4, stride=3)
    assert [start for _, start in batch.window_origin] == [0, 3, 6]
    assert batch.batch == 3


def test_sliding_windows_identity_case():
    values = np.random.default_rng(1).normal(size=(4, 2))
    inst = SeriesInstance(values=values)
    batch = sliding_windows(inst, length=4, stride=1)
    assert batch.batch == 1
    np.testing.assert_array_equal(batch.x[0], values)


def test_forecast_window_single_pair_at_full_context():
    inst = SeriesInstance(values=np.random.default_rng(2).normal(size=(672 + 96, 3)))
    batch = sliding_windows(inst, length=672, stride=1, horizon=96)
    assert batch.batch == 1
    assert batch.labels.shape == (1, 96, 3)
    np.testing.assert_array_equal(batch.labels[0], inst.values[672:])


def test_forecast_target_adjacency():
    inst = SeriesInstance(values=np.arange(40, dtype=float).reshape(40, 1))
    batch = sliding_windows(inst, length=8, stride=5, horizon=4)
    for row, (_, start) in enumerate(batch.window_origin):
        np.testing.assert_array_equal(batch.x[row], inst.values[start : start + 8])
        np.testing.assert_array_equal(batch.labels[row], inst.values[start + 8 : start + 12])


def test_step_label_alignment():
    labels = (np.arange(30) % 7 == 0).astype(int)
    inst = SeriesInstance(values=np.random.default_rng(3).normal(size=(30, 2)), step_labels=labels)
    batch = sliding_windows(inst, length=6, stride=4)
    for row, (_, start) in enumerate(batch.window_origin):
        np.testing.assert_array_equal(batch.labels[row], labels[start : start + 6])


def test_oversized_window_warns_and_returns_empty():
    inst = SeriesInstance(values=np.zeros((5, 1)))
    with pytest.warns(WindowWarning):
        batch = sliding_windows(inst, length=9, stride=1)
    assert batch.batch == 0


# -- synthetic ------------------------------------------------------------------


def test_class_motifs_balanced_labels():
    ds = make_synthetic(
        SyntheticSpec(kind="class_motifs", seed=0, parameters={"n_instances": 200, "n_classes": 2, "snr_db": 10.0})
    )
    labels = [inst.class_label for inst in ds.instances]
    assert labels.count(0) == 100 and labels.count(1) == 100


def test_anomaly_injection_label_count():
    ds = make_synthetic(
        SyntheticSpec(
            kind="anomaly_injected",
            seed=0,
            parameters={"length": 2000, "n_segments": 3, "segment_length": 20, "n_spikes": 0},
        )
    )
    assert int(ds.instances[0].step_labels.sum()) == 60


def test_synthetic_determinism_bit_identical():
    spec = SyntheticSpec(kind="seasonal_trend", seed=42, parameters={"length": 300})
    a = make_synthetic(spec)
    b = make_synthetic(spec)
    assert a.instances[0].values.tobytes() == b.instances[0].values.tobytes()


def test_low_snr_records_note():
    ds = make_synthetic(SyntheticSpec(kind="class_motifs", seed=0, parameters={"n_instances": 4, "snr_db": -1.0}))
    assert any("separable" in note for note in ds.notes)


# -- few shot -------------------------------------------------------------------


def _motifs(n=100):
    return make_synthetic(SyntheticSpec(kind="class_motifs", seed=9, parameters={"n_instances": n, "length": 16}))


def test_few_shot_stratified_ten_percent():
    subset = few_shot_subset(_motifs(100), 0.1, seed=0)
    labels = [inst.class_label for inst in subset.instances]
    assert labels.count(0) == 5 and labels.count(1) == 5


def test_few_shot_identity():
    ds = _motifs(20)
    same = few_shot_subset(ds, 1.0)
    assert len(same) == len(ds)
    for a, b in zip(ds.instances, same.instances):
        assert a.values.tobytes() == b.values.tobytes()


def test_few_shot_chronological_first_fraction():
    ds = make_synthetic(SyntheticSpec(kind="seasonal_trend", seed=1, parameters={"length": 1000}))
    subset = few_shot_subset(ds, 0.1)
    inst = subset.instances[0]
    assert inst.length == 100
    np.testing.assert_array_equal(inst.values, ds.instances[0].values[:100])


def test_few_shot_keeps_one_per_class_and_records():
    ds = _motifs(8)  # 4 per class; fraction 0.1 floors to 0
    subset = few_shot_subset(ds, 0.1, seed=0)
    labels = [inst.class_label for inst in subset.instances]
    assert labels.count(0) == 1 and labels.count(1) == 1
    assert any("few_shot" in n for n in subset.notes)


def test_chronological_split_borders():
    inst = SeriesInstance(values=np.arange(100, dtype=float).reshape(100, 1))
    train, val, test = chronological_splits(inst)
    assert (train.length, val.length, test.length) == (70, 10, 20)
    explicit = chronological_splits(inst, borders=(50, 60))
    assert (explicit[0].length, explicit[1].length, explicit[2].length) == (50, 10, 40)
