import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from leaffuse.datakit import prepare, standardize
from leaffuse.forest import (GbdtConfig, GbdtModel, LeafEncoding, RfConfig, RfModel, Tree,
                             concat_augmented, export_encoding, fit_gbdt, fit_rf, gbdt_predict_proba,
                             grow_tree, leaf_indices, leaf_one_hot, rf_correlation_features,
                             rf_predict_proba, split_augmented)

from conftest import DATASETS
from oracles import best_split_bruteforce


def _train(name, delta=0.0, seed=0):
    path, col, pos = DATASETS[name]
    data, split = prepare(path, col, delta, seed, pos)
    z = standardize(data, split)
    return z.features[split.train_idx], z.labels[split.train_idx]


def _check_encoding(model, X):
    enc = leaf_one_hot(model, X)
    offs = model.encoding.block_offsets
    assert enc.shape == (len(X), model.encoding.total_dim)
    assert np.all(enc.sum(axis=1) == len(model.trees))
    for t in range(len(model.trees)):
        assert np.all(enc[:, offs[t]:offs[t + 1]].sum(axis=1) == 1)


def _check_tree_constraints(tree: Tree, max_depth, msl):
    leaves = tree.feature < 0
    assert sorted(tree.leaf_id[leaves].tolist()) == list(range(tree.n_leaves))
    assert tree.n_samples[leaves].min() >= msl
    assert tree.depth.max() <= max_depth
    inner = ~leaves
    assert np.all(tree.left[inner] >= 0) and np.all(tree.right[inner] >= 0)


# -- GBDT on the real tables ------------------------------------------------------------

@pytest.mark.parametrize("name", sorted(DATASETS))
def test_gbdt_defaults_on_dataset(name):
    X, y = _train(name, delta=0.5)
    model = fit_gbdt(X, y)
    assert len(model.trees) == X.shape[1] // 2
    _check_encoding(model, X)
    assert np.all(np.diff(model.train_loss) <= 1e-15)
    for tree in model.trees:
        _check_tree_constraints(tree, 8, 2)


def test_wbc_has_four_trees():
    X, y = _train("wbc")
    assert X.shape[1] == 9 and len(fit_gbdt(X, y).trees) == 4


# -- GBDT semantics ------------------------------------------------------------------------

def test_zero_trees_predicts_prior():
    X = np.arange(8.0)[:, None]
    y = np.array([0, 0, 0, 1, 1, 1, 1, 1])
    m = fit_gbdt(X, y, GbdtConfig(n_trees=0))
    assert m.base_score == pytest.approx(math.log(5 / 3), abs=1e-15)
    assert np.allclose(gbdt_predict_proba(m, X), 5 / 8, atol=1e-15)


def test_balanced_empty_ensemble_is_half():
    m = fit_gbdt(np.arange(4.0)[:, None], [0, 1, 0, 1], GbdtConfig(n_trees=0))
    assert gbdt_predict_proba(m, np.array([3.0])) == 0.5


def test_step_function_one_stump():
    x = np.array([-3.0, -2.0, -1.0, -0.5, 0.5, 1.0, 2.0, 4.0])
    y = (x > 0).astype(int)
    m = fit_gbdt(x[:, None], y, GbdtConfig(n_trees=1, max_depth=1))
    assert np.array_equal((gbdt_predict_proba(m, x[:, None]) >= 0.5).astype(int), y)
    gain, f, thr = best_split_bruteforce(x[:, None], y - y.mean(), 2)
    assert (f, thr) == (0, 0.0)
    assert m.trees[0].threshold[0] == thr


def test_hand_traced_two_tree_toy():
    # x = 0..3, y = 0,1,1,1, depth-1 stumps, min leaf 1. Traced by hand:
    # base ln 3; tree 1 leaves (-0.75/0.1875, 0.75/0.5625) = (-4, 4/3);
    # tree 2 leaves (-1/(1-p_a), 1/p_b) with p_a = s(ln3-0.4), p_b = s(ln3+0.1333)
    X = np.arange(4.0)[:, None]
    m = fit_gbdt(X, [0, 1, 1, 1], GbdtConfig(n_trees=2, max_depth=1, min_samples_leaf=1))
    assert [t.threshold[0] for t in m.trees] == [0.5, 0.5]
    assert m.trees[0].leaf_values() == pytest.approx([-4.0, 4.0 / 3.0], abs=1e-14)
    z = m.decision_function(np.array([[0.0], [0.4], [3.0]]))
    assert z == pytest.approx([0.3975162748574179, 0.3975162748574179, 1.3611180659695412], abs=1e-13)
    p = gbdt_predict_proba(m, np.array([[0.0], [2.0]]))
    assert p == pytest.approx([0.5980907724593859, 0.7959413526422703], abs=1e-13)


def test_adding_positive_tree_raises_probability():
    X = np.arange(6.0)[:, None]
    m = fit_gbdt(X, [0, 1, 0, 1, 1, 0], GbdtConfig(n_trees=2, max_depth=2))
    before = gbdt_predict_proba(m, X)
    extra = grow_tree(X, np.arange(6.0), lambda idx: 0.5 + idx.size, max_depth=1, min_samples_leaf=1)
    m2 = GbdtModel(m.trees + [extra], m.shrinkage, m.base_score, m.config)
    assert np.all(gbdt_predict_proba(m2, X) > before)


def test_identical_rows_give_single_leaf():
    X = np.ones((6, 2))
    m = fit_gbdt(X, [0, 1, 0, 1, 1, 0], GbdtConfig(n_trees=2))
    assert m.leaf_counts == [1, 1]
    _check_encoding(m, X)


def test_labels_must_be_binary():
    with pytest.raises(ValueError):
        fit_gbdt(np.zeros((4, 1)), [0, 1, 2, 1])


@pytest.mark.xfail(strict=True, reason="Newton leaf value overshoots at shrinkage 0.3 on a "
                   "1-in-60 positive leaf; see decisions ledger")
def test_boosting_descent_counterexample_at_shrinkage_03():
    r = np.random.default_rng(175)
    n, d = r.integers(4, 80), r.integers(1, 6)
    X = r.normal(size=(n, d))
    y = (r.random(n) < r.random()).astype(float)
    m = fit_gbdt(X, y, GbdtConfig(n_trees=int(r.integers(1, 12)), shrinkage=float(r.choice([0.1, 0.3]))))
    assert np.all(np.diff(m.train_loss) <= 0)


tables = st.integers(0, 2**32 - 1).flatmap(lambda seed: st.tuples(
    st.just(seed), st.integers(4, 60), st.integers(1, 5), st.booleans()))


@given(tables, st.integers(1, 8), st.integers(1, 3), st.integers(1, 4))
def test_gbdt_properties_on_random_tables(tab, n_trees, depth, msl):
    seed, n, d, rounded = tab
    r = np.random.default_rng(seed)
    X = r.normal(size=(n, d))
    if rounded:
        X = np.round(X)
    y = (r.random(n) < r.uniform(0.2, 0.8)).astype(float)
    if n < 2 * msl:
        return
    m = fit_gbdt(X, y, GbdtConfig(n_trees=n_trees, max_depth=depth, min_samples_leaf=msl))
    _check_encoding(m, X)
    _check_encoding(m, r.normal(size=(5, d)) * 3)
    assert np.all(np.diff(m.train_loss) <= 1e-15)
    for tree in m.trees:
        _check_tree_constraints(tree, depth, msl)
    # rows that share every leaf get identical encodings
    idx = leaf_indices(m, X)
    enc = leaf_one_hot(m, X)
    for i in range(n):
        same = np.all(idx == idx[i], axis=1)
        assert np.all(enc[same] == enc[i])


@given(hnp.arrays(np.float64, st.tuples(st.integers(4, 30), st.integers(1, 4)),
                  elements=st.integers(-5, 5).map(float)),
       st.integers(0, 2**32 - 1), st.integers(1, 3))
def test_root_split_matches_exhaustive_search(X, seed, msl):
    t = np.random.default_rng(seed).normal(size=X.shape[0])
    tree = grow_tree(X, t, lambda idx: 0.0, max_depth=1, min_samples_leaf=msl)
    gain, f, thr = best_split_bruteforce(X, t, msl)
    if f < 0:
        assert tree.n_leaves == 1
        return
    assert tree.n_leaves == 2
    fi, ti = int(tree.feature[0]), float(tree.threshold[0])
    left = X[:, fi] <= ti
    sse = lambda v: float(((v - v.mean()) ** 2).sum())
    got = sse(t) - sse(t[left]) - sse(t[~left])
    assert got == pytest.approx(gain, rel=1e-9, abs=1e-9)


def test_split_tie_prefers_lowest_feature_then_threshold():
    # both columns separate the targets equally well; column 0 must win
    X = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
    tree = grow_tree(X, np.array([0.0, 0.0, 1.0, 1.0]), lambda idx: 0.0, max_depth=1, min_samples_leaf=1)
    assert (tree.feature[0], tree.threshold[0]) == (0, 1.5)
    # symmetric targets: cuts at 0.5 and 2.5 tie; the lower threshold wins
    tree = grow_tree(X[:, :1], np.array([0.0, 1.0, 1.0, 0.0]), lambda idx: 0.0, max_depth=1,
                     min_samples_leaf=1)
    assert tree.threshold[0] == 0.5


def test_midpoint_rounding_keeps_values_apart():
    a = 1.0
    b = np.nextafter(a, 2.0)
    X = np.array([[a], [a], [b], [b]])
    tree = grow_tree(X, np.array([0.0, 0.0, 1.0, 1.0]), lambda idx: float(idx[0]), 1, 1)
    assert np.array_equal(tree.apply(X), [0, 0, 1, 1])


# -- encoding ------------------------------------------------------------------------------

def _stump(leaf_right_for_positive=True):
    # one split on feature 0 at 0: x <= 0 -> leaf 0, else leaf 1
    return Tree(feature=np.array([0, -1, -1]), threshold=np.array([0.0, 0.0, 0.0]),
                left=np.array([1, -1, -1]), right=np.array([2, -1, -1]),
                leaf_id=np.array([-1, 0, 1]), value=np.array([0.0, -1.0, 1.0]),
                n_samples=np.array([4, 2, 2]), depth=np.array([0, 1, 1]))


def test_leaf_one_hot_definition_example():
    t1 = _stump()
    t2 = Tree(**{**t1.__dict__, "feature": np.array([1, -1, -1])})
    m = GbdtModel([t1, t2], 0.1, 0.0, GbdtConfig(n_trees=2))
    # feature 0 > 0 reaches leaf 1 of tree 1; feature 1 <= 0 reaches leaf 0 of tree 2
    assert leaf_one_hot(m, np.array([1.0, -1.0])).tolist() == [0, 1, 1, 0]
    assert m.encoding == LeafEncoding((2, 2), (0, 2, 4))


def test_concat_and_split_round_trip():
    x = np.array([0.0, 0.0])
    x_aug = np.array([1.0, 0.0, 0.0, 1.0])
    xt = concat_augmented(x, x_aug)
    assert xt.shape == (6,) and xt[:4].tolist() == x_aug.tolist()
    back_x, back_aug = split_augmented(xt, 4)
    assert back_x.tolist() == x.tolist() and back_aug.tolist() == x_aug.tolist()
    with pytest.raises(ValueError):
        concat_augmented(np.zeros((2, 2)), np.zeros((3, 4)))


def test_serialization_round_trip(tmp_path):
    X, y = _train("pima", delta=0.5)
    m = fit_gbdt(X, y)
    back = GbdtModel.from_dict(json.loads(json.dumps(m.to_dict())))
    assert np.array_equal(back.decision_function(X), m.decision_function(X))
    assert np.array_equal(leaf_one_hot(back, X), leaf_one_hot(m, X))
    export_encoding(tmp_path / "enc.csv", m, X[:5])
    rows = (tmp_path / "enc.csv").read_text().splitlines()
    assert len(rows) == 6 and rows[0].startswith("t0_leaf0")


# -- random forest -----------------------------------------------------------------------------

def test_rf_pure_leaves_give_binary_probabilities():
    r = np.random.default_rng(0)
    X = r.normal(size=(40, 3))
    y = (X[:, 0] + 0.3 * X[:, 1] > 0).astype(int)
    m = fit_rf(X, y, RfConfig(n_trees=1, max_depth=64, min_samples_leaf=1, seed=3))
    p = rf_correlation_features(m, X)
    assert p.shape == (40, 1)
    assert set(np.unique(p).tolist()) <= {0.0, 1.0}
    assert np.array_equal(p[:, 0], rf_predict_proba(m, X))


def test_rf_deterministic_and_seed_sensitive():
    X, y = _train("heart")
    a = fit_rf(X, y, RfConfig(n_trees=5, seed=1))
    b = fit_rf(X, y, RfConfig(n_trees=5, seed=1))
    c = fit_rf(X, y, RfConfig(n_trees=5, seed=2))
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())
    assert json.dumps(a.to_dict()) != json.dumps(c.to_dict())


def _trace(tree: Tree, x):
    node = 0
    while tree.feature[node] >= 0:
        node = tree.left[node] if x[tree.feature[node]] <= tree.threshold[node] else tree.right[node]
    return tree.value[node]


def test_rf_probability_is_mean_of_traced_leaf_frequencies():
    X = np.array([[0.0, 1.0], [1.0, 0.0], [2.0, 1.0], [3.0, 0.0], [4.0, 1.0]])
    y = np.array([0, 0, 1, 1, 1])
    m = fit_rf(X, y, RfConfig(n_trees=3, min_samples_leaf=1, seed=0))
    for x in X:
        traced = [_trace(t, x) for t in m.trees]
        assert rf_predict_proba(m, x[None])[0] == pytest.approx(sum(traced) / 3, abs=1e-15)
        assert all(v in (0.0, 1 / 3, 0.5, 2 / 3, 1.0) or 0 <= v <= 1 for v in traced)
    back = RfModel.from_dict(json.loads(json.dumps(m.to_dict())))
    assert np.array_equal(rf_correlation_features(back, X), rf_correlation_features(m, X))


@given(st.integers(0, 2**32 - 1), st.integers(6, 40), st.integers(1, 6))
def test_rf_features_bounded(seed, n, d):
    r = np.random.default_rng(seed)
    X = r.normal(size=(n, d))
    y = (r.random(n) < 0.5).astype(int)
    m = fit_rf(X, y, RfConfig(n_trees=4, seed=seed))
    f = rf_correlation_features(m, r.normal(size=(7, d)) * 2)
    assert f.shape == (7, 4) and f.min() >= 0 and f.max() <= 1
    for tree in m.trees:
        _check_tree_constraints(tree, 8, 2)
