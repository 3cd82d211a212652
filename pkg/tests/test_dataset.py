import io
import math

import numpy as np
import pytest

from cohesion.dataset import (
    LEVELS,
    CohesionLabel,
    LabeledDataset,
    SynthConfig,
    balance_downsample,
    denormalize_prediction,
    normalize_label,
    parse_labels,
    parse_predictions,
    parse_splits,
    synth_generate,
    write_labels,
    write_predictions,
    write_splits,
)
from cohesion.errors import (
    DuplicateIdError,
    EmptyFileError,
    HeaderMismatchError,
    InvariantViolationError,
    LevelOutOfRangeError,
    MalformedRecordError,
    NonFiniteInputError,
)
from cohesion.feature_store import parse_feature_file, write_feature_file


# ---------------------------------------------------------------- labels file

def test_parse_labels_basic():
    text = "#cohesion-labels v1\nimgA\t2\n"
    assert parse_labels(io.StringIO(text)) == {"imgA": 2}


def test_parse_labels_level_out_of_range():
    with pytest.raises(LevelOutOfRangeError):
        parse_labels(io.StringIO("#cohesion-labels v1\nimgA\t4\n"))
    with pytest.raises(LevelOutOfRangeError):
        parse_labels(io.StringIO("#cohesion-labels v1\nimgA\t-1\n"))


def test_parse_labels_duplicate_id():
    text = "#cohesion-labels v1\nimgA\t2\nimgA\t1\n"
    with pytest.raises(DuplicateIdError):
        parse_labels(io.StringIO(text))


def test_parse_labels_malformed():
    with pytest.raises(MalformedRecordError):
        parse_labels(io.StringIO("#cohesion-labels v1\nimgA\ttwo\n"))
    with pytest.raises(HeaderMismatchError):
        parse_labels(io.StringIO("#wrong v1\n"))
    with pytest.raises(EmptyFileError):
        parse_labels(io.StringIO(""))


def test_labels_roundtrip():
    levels = {"b": 3, "a": 0, "c": 2}
    buf = io.StringIO()
    write_labels(buf, levels)
    assert parse_labels(io.StringIO(buf.getvalue())) == levels


# ---------------------------------------------------------------- splits file

def test_splits_roundtrip_and_validation():
    split = {"a": "train", "b": "val", "c": "test"}
    buf = io.StringIO()
    write_splits(buf, split)
    assert parse_splits(io.StringIO(buf.getvalue())) == split
    with pytest.raises(MalformedRecordError):
        parse_splits(io.StringIO("#cohesion-splits v1\na\tdev\n"))
    with pytest.raises(DuplicateIdError):
        parse_splits(io.StringIO("#cohesion-splits v1\na\ttrain\na\tval\n"))


# ---------------------------------------------------------------- predictions file

def test_predictions_roundtrip_both_scales():
    preds = {"a": 0.1, "b": 1 / 3, "c": -0.25}
    for scale in ("normalized", "raw"):
        buf = io.StringIO()
        write_predictions(buf, preds, scale)
        got_scale, got = parse_predictions(io.StringIO(buf.getvalue()))
        assert got_scale == scale
        assert got == preds  # repr printing: exact


def test_predictions_errors():
    with pytest.raises(HeaderMismatchError):
        parse_predictions(io.StringIO("#cohesion-predictions v1 scale=other\n"))
    with pytest.raises(MalformedRecordError):
        parse_predictions(io.StringIO("#cohesion-predictions v1 scale=raw\na\tinf\n"))
    with pytest.raises(InvariantViolationError):
        write_predictions(io.StringIO(), {"a": 0.5}, "percent")
    with pytest.raises(NonFiniteInputError):
        write_predictions(io.StringIO(), {"a": math.nan}, "raw")


# ---------------------------------------------------------------- scale maps

def test_normalize_endpoints():
    assert normalize_label(0) == 0.0
    assert normalize_label(3) == 1.0


def test_normalize_interior():
    assert normalize_label(1) == 1 / 3
    assert normalize_label(2) == 2 / 3


def test_normalize_strictly_increasing():
    values = [normalize_label(l) for l in LEVELS]
    assert all(a < b for a, b in zip(values, values[1:]))


def test_normalize_rejects_bad_levels():
    with pytest.raises(LevelOutOfRangeError):
        normalize_label(4)
    with pytest.raises(LevelOutOfRangeError):
        normalize_label(-1)


def test_denormalize_exact_inverse_on_levels():
    for level in LEVELS:
        assert denormalize_prediction(normalize_label(level)) == float(level)


def test_denormalize_clamps():
    assert denormalize_prediction(-0.2) == 0.0
    assert denormalize_prediction(1.0) == 3.0
    assert denormalize_prediction(1.7) == 3.0
    assert denormalize_prediction(0.5) == 1.5


def test_denormalize_rejects_non_finite():
    with pytest.raises(NonFiniteInputError):
        denormalize_prediction(math.inf)


# ---------------------------------------------------------------- dataset type

def test_labeled_dataset_invariants():
    with pytest.raises(InvariantViolationError):
        LabeledDataset({"a": CohesionLabel(1)}, {})  # labeled but no split
    with pytest.raises(InvariantViolationError):
        LabeledDataset({}, {"a": "train"})  # train member unlabeled
    with pytest.raises(InvariantViolationError):
        LabeledDataset({}, {"a": "val"})  # val member unlabeled
    ds = LabeledDataset({}, {"a": "test"})  # test labels may be hidden
    assert ds.ids("test") == ["a"]
    with pytest.raises(InvariantViolationError):
        LabeledDataset({"a": CohesionLabel(0)}, {"a": "dev"})


def test_labeled_dataset_accessors():
    ds = LabeledDataset.from_levels(
        {"a": 0, "b": 2, "c": 2}, {"a": "train", "b": "train", "c": "val"}
    )
    assert ds.ids("train") == ["a", "b"]
    assert ds.levels("val") == {"c": 2}
    assert ds.count_by_level("train") == {0: 1, 1: 0, 2: 1, 3: 0}


# ---------------------------------------------------------------- balancing

def make_ds(n_level2_train=20, n_other_train=10, n_val=5):
    levels, split = {}, {}
    for i in range(n_level2_train):
        levels[f"t2_{i:05d}"] = 2
        split[f"t2_{i:05d}"] = "train"
    for i in range(n_other_train):
        levels[f"t1_{i:05d}"] = 1
        split[f"t1_{i:05d}"] = "train"
    for i in range(n_val):
        levels[f"v2_{i:05d}"] = 2
        split[f"v2_{i:05d}"] = "val"
    return LabeledDataset.from_levels(levels, split)


def test_balance_large_level_exact_count():
    ds = make_ds(n_level2_train=4601, n_other_train=3, n_val=2)
    out = balance_downsample(ds, 2, 0.3, seed=0)
    assert out.count_by_level("train")[2] == 3221  # 4601 - floor(0.3 * 4601)


def test_balance_ratio_zero_is_identity():
    ds = make_ds()
    out = balance_downsample(ds, 2, 0.0, seed=0)
    assert out.split == ds.split and out.levels() == ds.levels()


def test_balance_ratio_one_removes_all():
    ds = make_ds(n_level2_train=10)
    out = balance_downsample(ds, 2, 1.0, seed=0)
    assert out.count_by_level("train")[2] == 0


def test_balance_floor_decimal_ratios():
    # floor(0.3 * 10) must be 3 even though 0.3*10 < 3 in binary floats
    ds = make_ds(n_level2_train=10)
    out = balance_downsample(ds, 2, 0.3, seed=1)
    assert out.count_by_level("train")[2] == 7
    for n, ratio in ((7, 0.5), (13, 0.1), (4601, 0.3), (9, 1 / 3)):
        ds = make_ds(n_level2_train=n)
        out = balance_downsample(ds, 2, ratio, seed=3)
        removed = n - out.count_by_level("train")[2]
        assert removed == math.floor(ratio * n + 1e-9)


def test_balance_leaves_other_levels_and_splits_alone():
    ds = make_ds()
    out = balance_downsample(ds, 2, 0.5, seed=2)
    assert out.count_by_level("train")[1] == ds.count_by_level("train")[1]
    assert out.ids("val") == ds.ids("val")  # val level-2 untouched
    assert set(out.ids()) <= set(ds.ids())


def test_balance_deterministic_per_seed():
    ds = make_ds()
    a = balance_downsample(ds, 2, 0.5, seed=9)
    b = balance_downsample(ds, 2, 0.5, seed=9)
    c = balance_downsample(ds, 2, 0.5, seed=10)
    assert a.ids() == b.ids()
    assert a.ids() != c.ids()  # overwhelmingly likely for these sizes


def test_balance_validates_args():
    ds = make_ds()
    with pytest.raises(LevelOutOfRangeError):
        balance_downsample(ds, 5, 0.3, seed=0)
    with pytest.raises(InvariantViolationError):
        balance_downsample(ds, 2, 1.5, seed=0)


# ---------------------------------------------------------------- synthesis

def synth_files(cfg):
    ds, feats = synth_generate(cfg)
    out = {}
    for name, spec in cfg.specs().items():
        buf = io.StringIO()
        write_feature_file(buf, feats[name], spec)
        out[name] = buf.getvalue()
    labels = io.StringIO()
    write_labels(labels, ds.levels())
    out["labels"] = labels.getvalue()
    splits = io.StringIO()
    write_splits(splits, ds.split)
    out["splits"] = splits.getvalue()
    return ds, out


def test_synth_deterministic_bytes():
    cfg = SynthConfig(seed=5, n_train=30, n_val=10, n_test=10)
    _, files_a = synth_files(cfg)
    _, files_b = synth_files(cfg)
    assert files_a == files_b
    _, files_c = synth_files(SynthConfig(seed=6, n_train=30, n_val=10, n_test=10))
    assert files_a["labels"] != files_c["labels"] or files_a["scene"] != files_c["scene"]


def test_synth_output_parses_through_feature_store():
    cfg = SynthConfig(seed=5, n_train=30, n_val=10, n_test=10)
    _, files = synth_files(cfg)
    for name, spec in cfg.specs().items():
        records = parse_feature_file(io.StringIO(files[name]), spec)
        assert all(len(r.values) == spec.dim for r in records)


def test_synth_split_sizes_and_counts():
    cfg = SynthConfig(seed=5, n_train=30, n_val=10, n_test=12)
    ds, feats = synth_generate(cfg)
    assert len(ds.ids("train")) == 30
    assert len(ds.ids("val")) == 10
    assert len(ds.ids("test")) == 12
    n = 52
    assert len(feats["scene"]) == n
    assert len(feats["skeleton"]) == n
    assert all(lab.level in LEVELS for lab in ds.entries.values())
    face_counts = {}
    for rec in feats["face"]:
        face_counts[rec.image_id] = face_counts.get(rec.image_id, 0) + 1
    assert all(1 <= k <= cfg.max_faces for k in face_counts.values())


def test_synth_all_faces_suppressed():
    cfg = SynthConfig(seed=5, n_train=10, n_val=2, n_test=2, p_zero_faces=1.0)
    _, feats = synth_generate(cfg)
    assert feats["face"] == []


def test_synth_config_validation():
    with pytest.raises(InvariantViolationError):
        SynthConfig(n_train=0)
    with pytest.raises(InvariantViolationError):
        SynthConfig(face_dim=0)
    with pytest.raises(InvariantViolationError):
        SynthConfig(sigma_scene=0.0)
    with pytest.raises(InvariantViolationError):
        SynthConfig(p_zero_faces=1.5)
    with pytest.raises(InvariantViolationError):
        SynthConfig(max_faces=-1)
