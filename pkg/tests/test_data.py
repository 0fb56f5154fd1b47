import numpy as np
import pytest

from sparsesr.data import (
    TEST,
    TRAIN,
    VAL,
    VAL_INNER,
    VAL_OUTER,
    AllTermsRejected,
    DataError,
    Dataset,
    concat_splits,
    evaluate_terms,
    load_table,
    nest_validation,
    split_dataset,
    write_table,
)
from sparsesr.exprlang import Term
from sparsesr.simgen import simulate_pkpd


def small(n=40, groups=True):
    x = np.linspace(0.1, 4.0, n)
    g = np.repeat(np.arange(n // 4).astype(str), 4) if groups else None
    return Dataset({"x": x, "z": x - 2.0}, {"y": 2 * x}, groups=g)


def test_csv_round_trip_is_bitwise(tmp_path):
    d = split_dataset(simulate_pkpd("chemo_radio", 5, seed=1), (0.6, 0.2, 0.2), 3)
    write_table(d, tmp_path / "pk.csv")
    back = load_table(tmp_path / "pk.csv", ["dv_dt", "dc_dt"])
    for k, v in d.features.items():
        assert np.array_equal(back.features[k], v)
    for k, v in d.targets.items():
        assert np.array_equal(back.targets[k], v)
    assert np.array_equal(back.split, d.split)
    assert list(back.groups) == list(d.groups)


def test_load_errors(tmp_path):
    with pytest.raises(DataError, match="not found"):
        load_table(tmp_path / "missing.csv", ["y"])
    p = tmp_path / "t.csv"
    p.write_text("x,y\n1,2\n3,abc\n")
    with pytest.raises(DataError, match="row 3"):
        load_table(p, ["y"])
    with pytest.raises(DataError, match="missing target"):
        load_table(p, ["w"])
    p.write_text("x,y\n1,2\n3\n")
    with pytest.raises(DataError):
        load_table(p, ["y"])


def test_split_keeps_groups_whole_and_is_seeded():
    d = small()
    a = split_dataset(d, (0.5, 0.25, 0.25), 7)
    b = split_dataset(d, (0.5, 0.25, 0.25), 7)
    assert np.array_equal(a.split, b.split)
    for g in np.unique(d.groups):
        assert len(set(a.split[d.groups == g])) == 1
    sizes = a.split_sizes()
    # 10 trajectories of 4 rows: 5 / round(2.5) = 2 / remainder 3
    assert sizes == {TRAIN: 20, VAL: 8, TEST: 12}


def test_split_fraction_validation():
    with pytest.raises(DataError):
        split_dataset(small(), (0.5, 0.5, 0.5), 0)


def test_nested_validation_partitions_val():
    d = nest_validation(split_dataset(small(80), (0.5, 0.25, 0.25), 1), 0.5, 2)
    inner, outer, val = d.mask(VAL_INNER), d.mask(VAL_OUTER), d.mask(VAL)
    assert not np.any(inner & outer)
    assert np.array_equal(inner | outer, val)
    assert inner.sum() > 0 and outer.sum() > 0


def test_concat_splits_labels_rows():
    parts = {s: Dataset({"x": np.arange(3.0)}, {"y": np.arange(3.0)}) for s in (TRAIN, VAL, TEST)}
    d = concat_splits(parts)
    assert d.split_sizes() == {TRAIN: 3, VAL: 3, TEST: 3}


def test_evaluate_terms_shared_rejection():
    d = split_dataset(small(), (0.5, 0.25, 0.25), 0)
    terms = [Term.parse(s) for s in ["x", "log(z)", "w", "x**2"]]
    mats = evaluate_terms(terms, d, [TRAIN, VAL])
    assert mats[TRAIN].sources == ["x", "x**2"] == mats[VAL].sources
    assert set(mats[TRAIN].rejected) == {"log(z)", "w"}
    assert mats[TRAIN].shape == (int(d.mask(TRAIN).sum()), 2)


def test_all_rejected():
    d = split_dataset(small(), (0.5, 0.25, 0.25), 0)
    with pytest.raises(AllTermsRejected):
        evaluate_terms([Term.parse("log(z)")], d, [TRAIN])


def test_pkpd_design_matrix_has_one_column_per_term():
    d = split_dataset(simulate_pkpd("chemo_radio", 10, seed=0), (0.7, 0.15, 0.15), 0)
    sources = [
        "cancer_volume", "chemo_concentration", "chemo_dosage", "radiotherapy_dosage", "np.log(cancer_volume + 1)",
        "np.sqrt(cancer_volume)", "chemo_dosage * radiotherapy_dosage", "cancer_volume * chemo_concentration",
        "radiotherapy_dosage / (cancer_volume + 1)", "chemo_dosage / (chemo_concentration + 1)",
    ]
    mats = evaluate_terms([Term.parse(s) for s in sources], d, [TRAIN])
    assert mats[TRAIN].shape[1] == 10
    frame = d.frame(TRAIN)
    np.testing.assert_array_equal(mats[TRAIN].matrix[:, 5], np.sqrt(frame["cancer_volume"]))
