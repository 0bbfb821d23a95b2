import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from leaffuse.datakit import (DataError, Dataset, PerturbationSpec, RawTable, apply_standardization,
                              decode_labels, impute_median, load_table, perturb, prepare,
                              read_prepared, split_8_1_1, standardize, write_prepared)
from leaffuse.rng import fisher_yates, make_rng

from conftest import DATASETS
from oracles import median_sorted


def _write(tmp_path, text, name="t.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def _ds(features, labels=None):
    features = np.asarray(features, dtype=np.float64)
    labels = np.zeros(len(features), dtype=np.int64) if labels is None else np.asarray(labels)
    return Dataset(features, labels, [f"c{j}" for j in range(features.shape[1])],
                   np.median(features, axis=0))


# -- loading ---------------------------------------------------------------------

def test_wbc_file_shape():
    raw = load_table(*DATASETS["wbc"][:2])
    assert raw.shape == (683, 9)
    assert set(raw.labels.tolist()) == {0, 1}
    assert raw.label_map == {"2": 0, "4": 1}


def test_single_row_label_last(tmp_path):
    raw = load_table(_write(tmp_path, "a,b,y\n1,2,0\n"), "y")
    assert raw.shape == (1, 2)
    assert raw.cells.tolist() == [[1.0, 2.0]]
    assert raw.labels.tolist() == [0]


def test_label_value_three_is_rejected(tmp_path):
    with pytest.raises(DataError):
        load_table(_write(tmp_path, "a,y\n1,0\n2,1\n3,3\n"), "y")


def test_missing_label_column(tmp_path):
    with pytest.raises(DataError):
        load_table(_write(tmp_path, "a,b\n1,2\n"), "y")


def test_empty_table(tmp_path):
    with pytest.raises(DataError):
        load_table(_write(tmp_path, "a,y\n"), "y")


def test_question_marks_and_blanks_are_missing(tmp_path):
    raw = load_table(_write(tmp_path, "a,b,y\n?,1,0\n2,,1\nx,3,1\n"), "y")
    assert np.isnan(raw.cells[0, 0]) and np.isnan(raw.cells[1, 1]) and np.isnan(raw.cells[2, 0])


def test_label_decoding_rules():
    assert decode_labels(["b", "a", "b"])[0].tolist() == [1, 0, 1]
    assert decode_labels(["1", "0"])[0].tolist() == [1, 0]
    assert decode_labels(["tested_negative", "tested_positive"])[1] == {
        "tested_negative": 0, "tested_positive": 1}
    assert decode_labels(["1", "2", "2"], positive="1")[0].tolist() == [1, 0, 0]
    with pytest.raises(DataError):
        decode_labels(["a", "b", "c"])
    with pytest.raises(DataError):
        decode_labels(["a", "b"], positive="z")


def test_hepatitis_positive_override():
    path, col, pos = DATASETS["hepatitis"]
    raw = load_table(path, col, pos)
    assert raw.shape == (155, 19)
    assert int(raw.labels.sum()) == 32  # DIE is the positive class
    assert np.isnan(raw.cells).any()


# -- imputation --------------------------------------------------------------------

def test_impute_odd_count(tmp_path):
    data = impute_median(load_table(_write(tmp_path, "a,y\n1,0\n?,1\n3,0\n"), "y"))
    assert data.features[:, 0].tolist() == [1.0, 2.0, 3.0]
    assert data.column_medians.tolist() == [2.0]


def test_impute_even_count(tmp_path):
    data = impute_median(load_table(_write(tmp_path, "a,y\n1,0\n2,1\n?,0\n4,1\n"), "y"))
    assert data.features[2, 0] == 2.0  # median of {1, 2, 4}
    data = impute_median(load_table(_write(tmp_path, "a,y\n1,0\n2,1\n?,0\n4,1\n5,0\n"), "y"))
    assert data.features[2, 0] == 3.0  # mean of the middle two of {1, 2, 4, 5}


def test_impute_even_count_spec_example(tmp_path):
    # [1, 2, missing, 4] has three observed values; the even-count case needs four
    data = impute_median(load_table(_write(tmp_path, "a,y\n1,0\n2,1\n?,0\n4,1\n3,1\n"), "y"))
    assert data.column_medians[0] == 2.5


def test_impute_without_missing_keeps_values(tmp_path):
    data = impute_median(load_table(_write(tmp_path, "a,b,y\n1,5,0\n2,6,1\n"), "y"))
    assert data.features.tolist() == [[1.0, 5.0], [2.0, 6.0]]
    assert data.column_medians.tolist() == [1.5, 5.5]


def test_fully_missing_column(tmp_path):
    with pytest.raises(DataError):
        impute_median(load_table(_write(tmp_path, "a,b,y\n?,1,0\n?,2,1\n"), "y"))


cells = st.lists(st.one_of(st.none(), st.floats(-1e3, 1e3, allow_nan=False)), min_size=1, max_size=12)


@given(st.lists(cells, min_size=1, max_size=4).filter(
    lambda cols: len({len(c) for c in cols}) == 1 and all(any(v is not None for v in c) for c in cols)))
def test_impute_matches_sorted_median_and_is_idempotent(cols):
    grid = np.array([[math.nan if v is None else v for v in col] for col in cols]).T
    raw = RawTable([f"c{j}" for j in range(grid.shape[1])], grid,
                   np.zeros(grid.shape[0], dtype=np.int64), "y", {})
    once = impute_median(raw)
    for j, col in enumerate(cols):
        med = median_sorted([v for v in col if v is not None])
        assert once.column_medians[j] == pytest.approx(med, rel=1e-12, abs=1e-12)
        for i, v in enumerate(col):
            assert once.features[i, j] == (once.column_medians[j] if v is None else v)
    twice = impute_median(once)
    assert np.array_equal(once.features, twice.features)


# -- perturbation ------------------------------------------------------------------

def test_perturb_ten_rows_half():
    # medians (4.5, 14.5, ...) match no cell, so every perturbed row really changes
    feats = np.arange(30, dtype=float).reshape(3, 10).T
    data = _ds(feats)
    out = perturb(data, PerturbationSpec(0.5, seed=3))
    order = out.row_ids
    changed = (out.features != feats[order])
    assert out.perturbed.sum() == 5
    assert changed.any(axis=1).sum() == 5
    assert changed.sum(axis=1).max() == 1
    med = np.median(feats, axis=0)
    rows, cols = np.nonzero(changed)
    assert np.array_equal(out.features[rows, cols], med[cols])
    assert np.array_equal(np.flatnonzero(out.perturbed), rows)


def test_perturb_zero_is_a_shuffle():
    feats = np.random.default_rng(0).normal(size=(20, 3))
    out = perturb(_ds(feats), PerturbationSpec(0.0, seed=1))
    assert np.array_equal(out.features, feats[out.row_ids])
    assert not out.perturbed.any()
    assert sorted(out.row_ids.tolist()) == list(range(20))


def test_perturb_all_rows_single_column():
    feats = np.arange(7, dtype=float)[:, None]
    out = perturb(_ds(feats), PerturbationSpec(1.0, seed=0))
    assert np.all(out.features == 3.0)


def test_perturb_wbc_count_rounds_half_up():
    path, col, _ = DATASETS["wbc"]
    data, _ = prepare(path, col, 0.5, seed=0)
    assert data.perturbed.sum() == 342  # round-half-up(0.5 * 683)
    data, _ = prepare(path, col, 0.0, seed=0)
    assert data.perturbed.sum() == 0


def test_perturbation_spec_bounds():
    with pytest.raises(DataError):
        PerturbationSpec(1.5)
    with pytest.raises(DataError):
        PerturbationSpec(-0.1)


@given(st.integers(1, 60), st.integers(1, 5), st.floats(0, 1), st.integers(0, 2**63))
def test_perturb_properties(n, d, delta, seed):
    feats = make_rng(seed, "test").normal(size=(n, d))
    data = _ds(feats)
    out = perturb(data, PerturbationSpec(delta, seed))
    base = feats[out.row_ids]
    k = int(math.floor(delta * n + 0.5))
    assert out.perturbed.sum() == k
    assert np.array_equal(np.flatnonzero(out.perturbed), np.arange(k))
    diff = out.features != base
    assert diff.sum(axis=1).max(initial=0) <= 1
    assert not diff[~out.perturbed].any()
    med = np.median(feats, axis=0)
    rows = np.arange(k)
    assert np.array_equal(out.features[rows, out.perturbed_cols[rows]], med[out.perturbed_cols[rows]])
    again = perturb(data, PerturbationSpec(delta, seed))
    assert np.array_equal(again.features, out.features)
    assert np.array_equal(again.row_ids, out.row_ids)


# -- split ------------------------------------------------------------------------------

def test_split_sizes():
    s = split_8_1_1(100, seed=0)
    assert (len(s.train_idx), len(s.val_idx), len(s.test_idx)) == (80, 10, 10)
    s = split_8_1_1(155, seed=0)
    assert (len(s.train_idx), len(s.val_idx), len(s.test_idx)) == (124, 15, 16)


def test_split_deterministic():
    a, b = split_8_1_1(97, seed=5), split_8_1_1(97, seed=5)
    assert a.as_dict() == b.as_dict()
    assert a.as_dict() != split_8_1_1(97, seed=6).as_dict()


def test_split_too_small():
    with pytest.raises(DataError):
        split_8_1_1(9, seed=0)


@given(st.integers(10, 800), st.integers(0, 2**64 - 1))
def test_split_partition(n, seed):
    s = split_8_1_1(n, seed)
    allidx = np.concatenate([s.train_idx, s.val_idx, s.test_idx])
    assert sorted(allidx.tolist()) == list(range(n))
    assert len(s.train_idx) == (8 * n) // 10 and len(s.val_idx) == n // 10


# -- standardization --------------------------------------------------------------------

def test_standardize_examples():
    feats = np.array([[0.0, 5.0], [2.0, 5.0], [10.0, 7.0]])
    data = _ds(feats)
    from leaffuse.datakit import SplitBundle
    split = SplitBundle(np.array([0, 1]), np.array([], dtype=int), np.array([2]))
    z = standardize(data, split)
    assert z.features[:2, 0].tolist() == [-1.0, 1.0]
    assert z.features[:2, 1].tolist() == [0.0, 0.0]  # constant train column: centered only
    assert z.features[2].tolist() == [9.0, 2.0]  # test row uses train statistics
    assert np.array_equal(apply_standardization(feats, z.mean, z.std), z.features)


# -- persistence -------------------------------------------------------------------------

def test_prepared_round_trip_and_byte_identity(tmp_path):
    path, col, _ = DATASETS["wbc"]
    data, split = prepare(path, col, 0.5, seed=2)
    write_prepared(tmp_path / "a", data, split, 2)
    write_prepared(tmp_path / "b", *prepare(path, col, 0.5, seed=2), 2)
    for name in ("data.csv", "meta.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    back, split2, meta = read_prepared(tmp_path / "a")
    assert np.array_equal(back.features, data.features)
    assert np.array_equal(back.labels, data.labels)
    assert np.array_equal(back.perturbed, data.perturbed)
    assert split2.as_dict() == split.as_dict()
    assert meta["n_perturbed"] == 342 and meta["delta"] == 0.5 and meta["seed"] == 2


# -- rng -----------------------------------------------------------------------------------

@given(st.integers(0, 300), st.integers(0, 2**64 - 1))
def test_fisher_yates_is_a_permutation(n, seed):
    perm = fisher_yates(n, make_rng(seed))
    assert sorted(perm.tolist()) == list(range(n))
    assert np.array_equal(perm, fisher_yates(n, make_rng(seed)))


def test_rng_tags_are_independent():
    a = make_rng(7, "split").integers(0, 2**32, 4)
    b = make_rng(7, "perturb").integers(0, 2**32, 4)
    assert not np.array_equal(a, b)
    assert np.array_equal(a, make_rng(7, "split").integers(0, 2**32, 4))


def test_fisher_yates_matches_hand_written_durstenfeld():
    import zlib
    gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([0, 0, zlib.crc32(b"split")])))
    items = list(range(8))
    for i in range(7, 0, -1):
        j = int(gen.integers(0, i + 1))
        items[i], items[j] = items[j], items[i]
    assert fisher_yates(8, make_rng(0, "split")).tolist() == items
