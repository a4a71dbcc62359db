import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lobshap.errors import DataError
from lobshap.gbdt import (
    GmadlParams, Hyperparams, Tree, TreeEnsemble, bin_column, fit, gmadl, gmadl_terms, hit_rate,
    predict, quantile_edges, r2,
)

from conftest import random_ensemble


def _hp(**kw):
    base = dict(depth=3, iterations=30, learning_rate=0.1, l2_leaf=1.0, subsample=1.0, bins=32)
    base.update(kw)
    return Hyperparams(**base)


def _data(seed, n=800, f=3):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, f))
    y = np.sin(X[:, 0]) + 0.5 * (X[:, 1] > 0) + 0.1 * rng.normal(size=n)
    return X, y


# binning and trees

def test_edges_strictly_increasing_and_binning_rule():
    rng = np.random.default_rng(0)
    x = np.round(rng.normal(size=1000), 1)
    e = quantile_edges(x, 32)
    assert np.all(np.diff(e) > 0)
    b = bin_column(x, e)
    for t in range(len(e)):
        assert np.array_equal(b <= t, x <= e[t])


def test_hand_built_stump():
    edges = [np.arange(10, dtype=float)]
    m = TreeEnsemble(0.5, 0.1, [Tree.stump(0, 3, -1.0, 1.0)], edges, ("f0",))
    assert predict(m, [3.0]) == pytest.approx(0.5 - 0.1)
    assert predict(m, [3.5]) == pytest.approx(0.5 + 0.1)
    assert predict(m, {"f0": -100.0}) == pytest.approx(0.4)


def test_empty_ensemble_returns_base():
    m = TreeEnsemble(2.5, 0.1, [], [np.zeros(0)], ("a",))
    assert predict(m, [7.0]) == 2.5


def test_missing_feature_named():
    m = TreeEnsemble(0.0, 0.1, [], [np.zeros(0), np.zeros(0)], ("a", "b"))
    with pytest.raises(KeyError, match="'b'"):
        predict(m, {"a": 1.0})


def test_prediction_is_base_plus_scaled_tree_sum(rng):
    m = random_ensemble(rng, n_features=4, n_trees=5, depth=3, lr=0.3)
    X = rng.normal(size=(50, 4))
    manual = m.base_score + m.learning_rate * m.tree_outputs(X).sum(axis=0)
    assert np.array_equal(m.predict(X), manual)


# fitting

def test_constant_label_gives_no_trees():
    X = np.random.default_rng(0).normal(size=(300, 2))
    m = fit(X, np.full(300, 1.25), _hp())
    assert m.trees == [] and np.all(m.predict(X) == 1.25)


def test_separable_toy_learns():
    x = np.random.default_rng(0).uniform(-1, 1, (1000, 1))
    y = np.sign(x[:, 0])
    m = fit(x, y, _hp(depth=1, iterations=50, learning_rate=0.1, l2_leaf=0.0))
    assert np.mean((m.predict(x) - y) ** 2) < 0.05


@pytest.mark.parametrize("seed", range(20))
def test_training_mse_non_increasing(seed):
    X, y = _data(seed, n=400)
    rng = np.random.default_rng(seed)
    hp = _hp(depth=int(rng.integers(1, 4)), iterations=25,
             learning_rate=float(rng.uniform(0.01, 0.1)), l2_leaf=float(rng.uniform(0, 5)))
    m = fit(X, y, hp, seed=seed)
    B = m.bin(X)
    pred = np.full(len(y), m.base_score)
    prev = np.mean((y - pred) ** 2)
    for t in m.trees:
        pred = pred + m.learning_rate * t.predict_binned(B)
        cur = np.mean((y - pred) ** 2)
        assert cur <= prev + 1e-15
        prev = cur


def test_depth_and_thresholds_in_range():
    X, y = _data(1)
    m = fit(X, y, _hp(depth=4, bins=16))
    for t in m.trees:
        assert t.max_depth() <= 4
        split = t.feature >= 0
        for f, th in zip(t.feature[split], t.threshold[split]):
            assert 0 <= th < len(m.bin_edges[f]) + 1


def test_leaf_value_formula_single_tree():
    X, y = _data(2, n=500)
    m = fit(X, y, _hp(iterations=10, l2_leaf=4.0))
    leaf = m.trees[0].leaf_index(m.bin(X))
    resid = y - m.base_score
    for node in np.unique(leaf):
        rows = leaf == node
        assert m.trees[0].value[node] == pytest.approx(resid[rows].sum() / (rows.sum() + 4.0),
                                                       rel=1e-12)


def test_deterministic_and_seed_sensitive():
    X, y = _data(3)
    hp = _hp(subsample=0.7)
    assert fit(X, y, hp, seed=1).to_json() == fit(X, y, hp, seed=1).to_json()
    assert fit(X, y, hp, seed=1).model_id != fit(X, y, hp, seed=2).model_id


def test_monotone_transform_invariance():
    X, y = _data(4)
    Z = X.copy()
    Z[:, 0] = np.exp(3 * X[:, 0])
    Z[:, 1] = X[:, 1] ** 3 + 7
    a = fit(X, y, _hp(), seed=0)
    b = fit(Z, y, _hp(), seed=0)
    assert np.array_equal(a.bin(X), b.bin(Z))
    assert np.array_equal(a.predict(X), b.predict(Z))


def test_fit_errors():
    X, y = _data(5, n=100)
    with pytest.raises(DataError):
        fit(X, y, _hp())  # fewer than 2 * min_leaf rows
    X, y = _data(5)
    X[3, 1] = np.nan
    with pytest.raises(DataError):
        fit(X, y, _hp())
    with pytest.raises(ValueError):
        Hyperparams(depth=0)
    with pytest.raises(ValueError):
        Hyperparams(subsample=0.0)


def test_serialization_round_trip():
    X, y = _data(6)
    m = fit(X, y, _hp(), feature_names=("a", "b", "c"))
    back = TreeEnsemble.from_json(m.to_json())
    assert back.to_json() == m.to_json() and back.model_id == m.model_id
    assert np.array_equal(back.predict(X), m.predict(X))
    doc = m.to_dict()
    assert doc["format"] == "lobshap-gbdt" and doc["version"] == 1
    doc["version"] = 99
    with pytest.raises(ValueError):
        TreeEnsemble.from_dict(doc)


# metrics

def test_gmadl_zero_preds():
    r = np.random.default_rng(0).normal(0, 0.01, 1000)
    assert gmadl(r, np.zeros_like(r)) == 0.0


def test_gmadl_saturation():
    for b in (0.5, 1.0, 2.0):
        v = gmadl([0.01], [1e6], GmadlParams(a=1000, b=b))
        assert abs(v - (-0.5 * 0.01 ** b)) < 1e-12


def test_gmadl_two_sample_scalar_oracle():
    R, F = [0.01, -0.02], [0.005, -0.001]
    a, b = 1000.0, 1.0

    def term(r, f):
        return -(1.0 / (1.0 + math.exp(-a * r * f)) - 0.5) * abs(r) ** b

    want = (term(R[0], F[0]) + term(R[1], F[1])) / 2
    assert abs(gmadl(R, F, GmadlParams(a, b)) - want) < 1e-12


@settings(max_examples=300, deadline=None)
@given(st.floats(1e-5, 0.05), st.floats(1e-6, 0.05), st.booleans())
def test_gmadl_flip_worsens(r, f, neg):
    R = -r if neg else r
    right = math.copysign(f, R)
    assert gmadl([R], [-right]) > gmadl([R], [right])


def test_gmadl_terms_mean_and_sign():
    rng = np.random.default_rng(3)
    r, f = rng.normal(0, 0.01, 500), rng.normal(0, 0.01, 500)
    t = gmadl_terms(r, f)
    assert t.shape == (500,) and gmadl(r, f) == float(np.mean(t))
    assert np.all(t[r * f > 0] < 0) and np.all(t[r * f < 0] > 0)


def test_gmadl_length_mismatch():
    with pytest.raises(ValueError):
        gmadl([0.1, 0.2], [0.1])
    with pytest.raises(ValueError):
        GmadlParams(a=0)


def test_r2_examples():
    y = np.random.default_rng(0).normal(size=100)
    assert r2(y, y) == 1.0
    assert abs(r2(y, np.full_like(y, y.mean()))) < 1e-15
    assert math.isnan(r2(np.ones(5), np.zeros(5)))


def test_r2_null():
    rng = np.random.default_rng(1)
    y = rng.normal(size=10_000)
    f = 0.01 * rng.normal(size=10_000)
    assert r2(y, f) <= 0.01


def test_hit_rate():
    assert hit_rate([1, -1, 1, 0], [1, 1, 1, 1]) == pytest.approx(2 / 3)
    assert math.isnan(hit_rate([0, 0], [1, 1]))
