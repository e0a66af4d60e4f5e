from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from visitemb.corpus import N_LABELS
from visitemb.errors import ConfigError, ShapeError, ValidationError
from visitemb.metrics_baseline import (
    ForestConfig,
    binarize,
    build_tree,
    format_table,
    forest_fit,
    forest_predict,
    score,
)


def recount(pred, true):
    """Confusion counts one cell at a time."""
    n, k = len(pred), len(pred[0])
    out = []
    for j in range(k):
        tp = fp = fn = 0
        for i in range(n):
            p, t = pred[i][j], true[i][j]
            tp += p and t
            fp += p and not t
            fn += (not p) and t
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        out.append((tp, fp, fn, prec, rec, f1))
    return out


# -- binarize / score ------------------------------------------------------------


def test_binarize_inclusive():
    assert binarize(np.full(19, 0.5)).tolist() == [1] * 19


def test_binarize_exact_labels():
    y = np.random.default_rng(0).integers(0, 2, 19)
    assert binarize(np.clip(y, 1e-12, 1 - 1e-12)).tolist() == y.tolist()


def test_binarize_rejects_bad_threshold():
    with pytest.raises(ConfigError):
        binarize(np.zeros(3), 1.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=19, max_size=19))
def test_binarize_monotone(p):
    assert np.all(binarize(p, 0.9) <= binarize(p, 0.1))


def test_perfect_predictions():
    y = np.zeros((5, N_LABELS), dtype=int)
    y[:3, 0] = 1
    y[1:, 4] = 1
    r = score(y, y)
    assert r.f1[0] == r.precision[0] == r.recall[0] == 1.0
    assert r.f1[4] == 1.0
    assert r.f1[1] == 0.0  # absent label
    assert r.presence[0] == pytest.approx(0.6)


def test_hand_counts():
    pred = np.zeros((4, N_LABELS), dtype=int)
    true = np.zeros((4, N_LABELS), dtype=int)
    pred[:, 0] = [1, 1, 1, 0]
    true[:, 0] = [1, 1, 0, 1]
    r = score(pred, true)
    assert (r.tp[0], r.fp[0], r.fn[0]) == (2, 1, 1)
    assert r.precision[0] == pytest.approx(2 / 3) and r.recall[0] == pytest.approx(2 / 3)
    assert r.f1[0] == pytest.approx(2 / 3)


def test_f1_formula_on_reference_values():
    # P and R are published to 3 decimals, so the recomputed F1 carries ~1e-3 rounding error
    p, r = 0.994, 0.999
    assert 2 * p * r / (p + r) == pytest.approx(0.9964937, abs=1e-7)
    assert abs(2 * p * r / (p + r) - 0.997) <= 1e-3


def test_score_empty_is_error():
    with pytest.raises(ValidationError):
        score(np.zeros((0, N_LABELS)), np.zeros((0, N_LABELS)))


def test_score_shape_mismatch():
    with pytest.raises(ShapeError):
        score(np.zeros((2, N_LABELS)), np.zeros((3, N_LABELS)))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 100), st.integers(0, 2**32 - 1))
def test_score_matches_recount(n, seed):
    r = np.random.default_rng(seed)
    pred = r.random((n, N_LABELS)) < r.random(N_LABELS)
    true = r.random((n, N_LABELS)) < r.random(N_LABELS)
    rep = score(pred, true)
    for j, (tp, fp, fn, prec, rec, f1) in enumerate(recount(pred.tolist(), true.tolist())):
        assert (rep.tp[j], rep.fp[j], rep.fn[j]) == (tp, fp, fn)
        assert rep.precision[j] == prec and rep.recall[j] == rec and rep.f1[j] == f1
    assert rep.macro_f1 == pytest.approx(np.mean([c[5] for c in recount(pred.tolist(), true.tolist())]), abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 60), st.integers(0, 2**32 - 1))
def test_score_permutation_invariant(n, seed):
    r = np.random.default_rng(seed)
    pred = r.random((n, N_LABELS)) < 0.4
    true = r.random((n, N_LABELS)) < 0.4
    perm = r.permutation(n)
    np.testing.assert_array_equal(score(pred, true).f1, score(pred[perm], true[perm]).f1)


def test_csv_and_table():
    y = np.eye(N_LABELS, dtype=int)
    rep = score(y, y)
    lines = rep.to_csv().splitlines()
    assert lines[0] == "label,precision,recall,f1,presence"
    assert len(lines) == N_LABELS + 2 and lines[-1].startswith("macro,1.000000")
    table = format_table({"rf": rep, "deep": rep, "emb+rf": rep})
    assert "Total average" in table and "emb+rf" in table


# -- forest -------------------------------------------------------------------------


def _labels(col):
    Y = np.zeros((len(col), N_LABELS))
    Y[:, 0] = col
    return Y


def test_constant_labels():
    X = np.random.default_rng(0).normal(size=(20, 3))
    Y = np.tile((np.arange(N_LABELS) % 2).astype(float), (20, 1))
    f = forest_fit(X, Y, ForestConfig(n_trees=5, seed=1))
    np.testing.assert_array_equal(forest_predict(f, np.random.default_rng(1).normal(size=(7, 3))), Y[:7])


def test_one_dimensional_threshold_recovery():
    x = np.array([0.0, 0.1, 0.2, 0.3, 0.7, 0.8, 0.9, 1.0])
    y = (x >= 0.5).astype(float)
    tree = forest_fit(x[:, None], _labels(y), ForestConfig(n_trees=1, bootstrap=False)).trees[0]
    assert tree.feature[0] == 0 and tree.threshold[0] == pytest.approx(0.5)
    assert tree.n_nodes == 3
    np.testing.assert_array_equal(tree.predict(x[:, None])[:, 0], y)


def test_constant_features_give_single_leaf():
    X = np.ones((10, 4))
    Y = _labels(np.arange(10) % 2)
    f = forest_fit(X, Y, ForestConfig(n_trees=3, seed=2))
    assert all(t.n_nodes == 1 for t in f.trees)


def test_empty_fit_is_error():
    with pytest.raises(ValidationError):
        forest_fit(np.zeros((0, 3)), np.zeros((0, N_LABELS)))


def test_predict_dimension_check():
    f = forest_fit(np.eye(4), np.eye(4, N_LABELS), ForestConfig(n_trees=1))
    with pytest.raises(ShapeError):
        forest_predict(f, np.zeros((2, 3)))


def test_pure_leaf_probabilities_binary():
    r = np.random.default_rng(3)
    X = r.normal(size=(30, 4))
    Y = (r.random((30, N_LABELS)) < 0.3).astype(float)
    tree = forest_fit(X, Y, ForestConfig(n_trees=1, bootstrap=False, features_per_split=4))
    p = forest_predict(tree, r.normal(size=(50, 4)))
    assert set(np.unique(p)) <= {0.0, 1.0}


def test_duplicated_trees_same_probabilities():
    r = np.random.default_rng(4)
    X = r.normal(size=(40, 5))
    Y = (r.random((40, N_LABELS)) < 0.3).astype(float)
    f = forest_fit(X, Y, ForestConfig(n_trees=4, seed=3))
    probe = r.normal(size=(20, 5))
    base = forest_predict(f, probe)
    f.trees = f.trees * 2
    np.testing.assert_allclose(forest_predict(f, probe), base, rtol=0, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 60), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_single_tree_memorizes(n, d, seed):
    r = np.random.default_rng(seed)
    X = r.normal(size=(n, d))
    Y = (r.random((n, N_LABELS)) < 0.4).astype(float)
    f = forest_fit(X, Y, ForestConfig(n_trees=1, bootstrap=False, features_per_split=d))
    np.testing.assert_array_equal(forest_predict(f, X), Y)


def test_forest_deterministic():
    r = np.random.default_rng(5)
    X = r.normal(size=(80, 6))
    Y = (r.random((80, N_LABELS)) < 0.3).astype(float)
    probe = r.normal(size=(25, 6))
    cfg = ForestConfig(n_trees=10, seed=11)
    np.testing.assert_array_equal(forest_predict(forest_fit(X, Y, cfg), probe),
                                  forest_predict(forest_fit(X, Y, cfg), probe))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 30), st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_duplicated_features_do_not_change_predictions(n, d, seed):
    r = np.random.default_rng(seed)
    X = r.integers(0, 5, size=(n, d)).astype(float)
    Y = (r.random((n, N_LABELS)) < 0.4).astype(float)
    probe = r.integers(-1, 6, size=(15, d)).astype(float)
    a = forest_fit(X, Y, ForestConfig(n_trees=1, bootstrap=False, features_per_split=d))
    X2 = np.hstack([X, X])
    b = forest_fit(X2, Y, ForestConfig(n_trees=1, bootstrap=False, features_per_split=2 * d))
    np.testing.assert_array_equal(forest_predict(a, probe), forest_predict(b, np.hstack([probe, probe])))


# -- exhaustive oracle -------------------------------------------------------------------


def oracle_tree(rows, X, Y):
    """Greedy Gini tree by exhaustive enumeration in exact arithmetic.

    Returns nested tuples ``(feature, threshold, left, right)`` or a leaf label tuple.
    """
    n = len(rows)
    k = len(Y[0])

    def cost(part):
        m = len(part)
        total = Fraction(0)
        for j in range(k):
            pos = sum(Y[i][j] for i in part)
            total += Fraction(2 * pos * (m - pos), m)
        return total / k

    leaf = tuple(Fraction(sum(Y[i][j] for i in rows), n) for j in range(k))
    if all(v in (0, 1) for v in leaf):
        return leaf
    best = None
    for f in range(len(X[0])):
        values = sorted({X[i][f] for i in rows})
        for a, b in zip(values, values[1:]):
            thr = Fraction(a + b, 2)
            left = [i for i in rows if X[i][f] <= thr]
            right = [i for i in rows if X[i][f] > thr]
            key = (cost(left) + cost(right), f, thr)
            if best is None or key < best[0]:
                best = (key, left, right)
    if best is None:
        return leaf
    (_, f, thr), left, right = best
    return (f, thr, oracle_tree(left, X, Y), oracle_tree(right, X, Y))


def flatten(tree, node=0):
    if tree.feature[node] < 0:
        return tuple(Fraction(v).limit_denominator(64) for v in tree.value[node])
    return (int(tree.feature[node]), Fraction(tree.threshold[node]),
            flatten(tree, tree.left[node]), flatten(tree, tree.right[node]))


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 8), st.integers(1, 2), st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_single_tree_matches_exhaustive_search(n, d, n_active, seed):
    r = np.random.default_rng(seed)
    X = r.integers(0, 4, size=(n, d))
    Y = np.zeros((n, N_LABELS), dtype=int)
    Y[:, :n_active] = r.random((n, n_active)) < 0.5
    expected = oracle_tree(list(range(n)), X.tolist(), Y.tolist())
    f = forest_fit(X.astype(float), Y.astype(float), ForestConfig(n_trees=1, bootstrap=False, seed=seed))
    assert flatten(f.trees[0]) == expected
