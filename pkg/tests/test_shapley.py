import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import spearmanr

from lobshap.gbdt import Tree, TreeEnsemble
from lobshap.shapley import (
    ShapMatrix, dependence_export, explain, global_importance, rank_correlation,
    tick_size_association, high_quantile_abs,
)

from conftest import random_ensemble
from oracles import brute_force_shap




@pytest.mark.parametrize("seed", range(6))
def test_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    model = random_ensemble(rng, n_features=6, n_trees=3, depth=3)
    X = rng.normal(size=(4, 6))
    bg = rng.normal(size=(40, 6))
    shap = explain(model, X, bg)
    for i in range(len(X)):
        phi, base = brute_force_shap(model, X[i], bg)
        np.testing.assert_allclose(shap.values[i], phi, atol=1e-9, rtol=0)
        assert shap.base_value == pytest.approx(base, abs=1e-9)


def test_matches_brute_force_twelve_features():
    rng = np.random.default_rng(99)
    model = random_ensemble(rng, n_features=12, n_trees=2, depth=3)
    X = rng.normal(size=(2, 12))
    bg = rng.normal(size=(30, 12))
    shap = explain(model, X, bg)
    for i in range(len(X)):
        phi, _ = brute_force_shap(model, X[i], bg)
        np.testing.assert_allclose(shap.values[i], phi, atol=1e-9, rtol=0)


def test_zero_cover_branch_uses_even_split():
    # background all on the left of the root: the right subtree has zero cover
    rng = np.random.default_rng(3)
    model = random_ensemble(rng, n_features=4, n_trees=2, depth=3)
    bg = np.full((10, 4), -50.0)
    X = rng.normal(size=(3, 4)) + 5
    shap = explain(model, X, bg)
    for i in range(len(X)):
        phi, _ = brute_force_shap(model, X[i], bg)
        np.testing.assert_allclose(shap.values[i], phi, atol=1e-9, rtol=0)


def test_empty_ensemble():
    model = TreeEnsemble(0.25, 0.1, [], [np.array([0.0])] * 3, ("a", "b", "c"))
    shap = explain(model, np.ones((5, 3)), np.zeros((4, 3)))
    assert np.all(shap.values == 0)
    assert shap.base_value == 0.25


def test_single_split_closed_form():
    # stump on feature 1 over background with share p going left:
    # phi_1 = lr * (v(x) - (p*vl + (1-p)*vr)), every other phi = 0
    edges = [np.array([0.0]), np.array([0.0]), np.array([0.0])]
    vl, vr, lr = -2.0, 3.0, 0.5
    model = TreeEnsemble(1.0, lr, [Tree.stump(1, 0, vl, vr)], edges, ("a", "b", "c"))
    bg = np.array([[0, -1, 0], [0, -1, 0], [0, -1, 0], [0, 1, 0]], dtype=float)
    p = 0.75
    X = np.array([[5.0, -1.0, 5.0], [5.0, 1.0, -5.0]])
    shap = explain(model, X, bg)
    expected_base = 1.0 + lr * (p * vl + (1 - p) * vr)
    assert shap.base_value == pytest.approx(expected_base, abs=1e-15)
    assert shap.values[0, 1] == pytest.approx(lr * (vl - (p * vl + (1 - p) * vr)), abs=1e-15)
    assert shap.values[1, 1] == pytest.approx(lr * (vr - (p * vl + (1 - p) * vr)), abs=1e-15)
    assert np.all(shap.values[:, [0, 2]] == 0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n_trees=st.integers(1, 6), depth=st.integers(1, 6))
def test_local_accuracy(seed, n_trees, depth):
    rng = np.random.default_rng(seed)
    model = random_ensemble(rng, n_features=7, n_trees=n_trees, depth=depth, n_bins=16)
    X = rng.normal(size=(25, 7))
    shap = explain(model, X, rng.normal(size=(60, 7)))
    recon = shap.base_value + shap.values.sum(axis=1)
    np.testing.assert_allclose(recon, model.predict(X), atol=1e-8, rtol=0)


def test_additivity_across_trees(rng):
    model = random_ensemble(rng, n_features=5, n_trees=4, depth=4)
    X = rng.normal(size=(20, 5))
    bg = rng.normal(size=(50, 5))
    full = explain(model, X, bg)
    acc = np.zeros_like(full.values)
    for t in model.trees:
        single = TreeEnsemble(model.base_score, model.learning_rate, [t],
                              model.bin_edges, model.feature_names)
        acc += explain(single, X, bg).values
    assert np.array_equal(full.values, acc)


def test_dummy_feature_is_zero(rng):
    model = random_ensemble(rng, n_features=5, n_trees=5, depth=3)
    used = {int(f) for t in model.trees for f in t.feature if f >= 0}
    unused = [j for j in range(5) if j not in used]
    X = rng.normal(size=(30, 5))
    shap = explain(model, X, rng.normal(size=(30, 5)))
    for j in unused:
        assert np.all(shap.values[:, j] == 0)
    # a stump-only ensemble always leaves some features unused
    stumps = TreeEnsemble(0.0, 1.0, [Tree.stump(0, 2, 1.0, -1.0)], model.bin_edges,
                          model.feature_names)
    s = explain(stumps, X, X)
    assert np.all(s.values[:, 1:] == 0)


def test_background_duplication_invariant(rng):
    model = random_ensemble(rng, n_features=5, n_trees=3, depth=4)
    X = rng.normal(size=(15, 5))
    bg = rng.normal(size=(33, 5))
    a = explain(model, X, bg)
    b = explain(model, X, np.vstack([bg, bg]))
    np.testing.assert_allclose(a.values, b.values, atol=1e-15, rtol=0)
    assert a.base_value == pytest.approx(b.base_value, abs=1e-15)


def test_row_independence(rng):
    model = random_ensemble(rng, n_features=5, n_trees=3, depth=4)
    X = rng.normal(size=(40, 5))
    bg = rng.normal(size=(30, 5))
    whole = explain(model, X, bg)
    parts = np.vstack([explain(model, X[i:i + 7], bg).values for i in range(0, 40, 7)])
    assert np.array_equal(whole.values, parts)


def test_feature_mismatch(rng):
    model = random_ensemble(rng, n_features=5)
    with pytest.raises(ValueError):
        explain(model, np.zeros((3, 4)), np.zeros((3, 5)))
    with pytest.raises(KeyError):
        explain(model, pd.DataFrame({"x0": [1.0]}), np.zeros((3, 5)))


def test_empty_inputs_rejected(rng):
    model = random_ensemble(rng, n_features=5)
    with pytest.raises(ValueError):
        explain(model, np.zeros((0, 5)), np.zeros((3, 5)))
    with pytest.raises(ValueError):
        explain(model, np.zeros((2, 5)), np.zeros((0, 5)))


# -- global diagnostics ------------------------------------------------------


def _mat(values, names=("a", "b")):
    return ShapMatrix(np.asarray(values, dtype=float), 0.0, tuple(names))


def test_global_importance_hand_matrix():
    ranked = global_importance(_mat([[1, -3], [-1, 1]]))
    assert ranked == [("b", 2.0), ("a", 1.0)]


def test_global_importance_zero_matrix_is_name_ordered():
    ranked = global_importance(_mat(np.zeros((3, 3)), names=("c", "a", "b")))
    assert ranked == [("a", 0.0), ("b", 0.0), ("c", 0.0)]


def test_global_importance_single_column():
    vals = np.zeros((4, 3))
    vals[:, 2] = [1, -1, 2, 0]
    assert global_importance(_mat(vals, ("a", "b", "z")))[0][0] == "z"


def test_global_importance_empty():
    with pytest.raises(ValueError):
        global_importance(_mat(np.zeros((0, 2))))


def _ranking(scores):
    return [(f"f{i}", float(s)) for i, s in enumerate(scores)]


def test_rank_correlation_identical_and_reversed():
    up = _ranking(range(10))
    down = _ranking(range(10)[::-1])
    m = rank_correlation({"x": up, "y": up, "z": down})
    assert m.loc["x", "y"] == pytest.approx(1.0)
    assert m.loc["x", "z"] == pytest.approx(-1.0)
    assert np.all(np.diag(m.to_numpy()) == 1.0)
    assert np.allclose(m.to_numpy(), m.to_numpy().T)


def test_rank_correlation_errors():
    with pytest.raises(ValueError):
        rank_correlation({"x": _ranking(range(3))})
    with pytest.raises(ValueError):
        rank_correlation({"x": _ranking(range(3)), "y": [("q", 1.0), ("f1", 2.0), ("f2", 3.0)]})


def test_rank_correlation_matches_scipy(rng):
    a, b = rng.normal(size=10), rng.normal(size=10)
    m = rank_correlation({"a": _ranking(a), "b": _ranking(b)})
    assert m.loc["a", "b"] == pytest.approx(spearmanr(a, b).statistic, abs=1e-12)
    # no ties, so the textbook 1 - 6 sum d^2 / (n (n^2 - 1)) applies
    d = np.argsort(np.argsort(a)) - np.argsort(np.argsort(b))
    n = len(a)
    assert m.loc["a", "b"] == pytest.approx(1 - 6 * np.sum(d ** 2) / (n * (n * n - 1)), abs=1e-12)


def test_rank_correlation_null_distribution(rng):
    # exact null for n=10: rho depends only on the permutation; enumerate sum d^2 moments.
    # E[rho] = 0 and Var[rho] = 1/(n-1) under independence.
    n, reps = 10, 3000
    rhos = np.empty(reps)
    base = _ranking(range(n))
    for r in range(reps):
        m = rank_correlation({"a": base, "b": _ranking(rng.permutation(n))})
        rhos[r] = m.loc["a", "b"]
    assert abs(rhos.mean()) < 4 * math.sqrt(1 / 9 / reps)
    assert rhos.var() == pytest.approx(1 / 9, rel=0.1)
    assert np.mean(np.abs(rhos)) < 0.35


def test_dependence_export_single_split():
    edges = [np.array([-1.0, 0.0, 1.0]), np.array([0.0])]
    model = TreeEnsemble(0.0, 1.0, [Tree.stump(0, 1, -1.0, 1.0)], edges, ("a", "b"))
    x = np.linspace(-3, 3, 61)
    X = np.column_stack([x, np.zeros_like(x)])
    shap = explain(model, X, X)
    dep = dependence_export(shap, X, "a")
    assert list(dep.columns) == ["a", "shap_a"]
    assert len(dep) == len(X)
    left = dep[dep["a"] <= 0.0]["shap_a"].to_numpy()
    right = dep[dep["a"] > 0.0]["shap_a"].to_numpy()
    assert np.ptp(left) == 0 and np.ptp(right) == 0
    assert right[0] - left[0] == pytest.approx(2.0)
    np.testing.assert_array_equal(dep["a"].to_numpy(), x)


def test_dependence_export_constant_model():
    model = TreeEnsemble(0.3, 1.0, [], [np.array([0.0])] * 2, ("a", "b"))
    X = np.arange(10, dtype=float).reshape(5, 2)
    dep = dependence_export(explain(model, X, X), X, "b")
    assert len(dep) == 5 and np.all(dep["shap_b"] == 0)
    with pytest.raises(KeyError):
        dependence_export(explain(model, X, X), X, "nope")


def test_tick_size_association():
    assert tick_size_association([(1, 1), (2, 4), (3, 9)]) == pytest.approx(1.0)
    assert tick_size_association([(1, 3), (2, 2), (3, 1), (4, 0)]) == pytest.approx(-1.0)
    assert math.isnan(tick_size_association([(1, 1), (2, 2)]))


def test_high_quantile_abs():
    s = ShapMatrix(np.column_stack([np.arange(101.0) - 50, np.zeros(101)]), 0.0,
                   ("l1_imbalance", "b"))
    assert high_quantile_abs(s) == pytest.approx(np.quantile(np.abs(np.arange(101.0) - 50), 0.95))


def test_csv_layout(tmp_path, rng):
    model = random_ensemble(rng, n_features=3)
    X = rng.normal(size=(4, 3))
    shap = explain(model, X, X)
    df = pd.read_csv(shap.to_csv(tmp_path / "s.csv"), float_precision="round_trip")
    assert list(df.columns) == ["x0", "x1", "x2", "base_value"]
    np.testing.assert_allclose(df[["x0", "x1", "x2"]].to_numpy(), shap.values, rtol=0, atol=0)
