import numpy as np
import pytest

from volfit.errors import EmptyData
from volfit.trees import ForestSpec, GbtSpec, fit_gbt, fit_random_forest, fit_tree, resolve_max_features


def exhaustive_split(X, y, min_leaf=1):
    """Brute-force best (gain, feature, threshold) by direct SSE evaluation."""
    def sse(v):
        return float(((v - v.mean()) ** 2).sum()) if v.size else 0.0

    base = sse(y)
    best = (0.0, -1, None)
    for j in range(X.shape[1]):
        vals = np.unique(X[:, j])
        for lo, hi in zip(vals[:-1], vals[1:]):
            thr = (lo + hi) / 2
            left = X[:, j] <= thr
            if left.sum() < min_leaf or (~left).sum() < min_leaf:
                continue
            g = base - sse(y[left]) - sse(y[~left])
            if g > best[0] + 1e-9 * max(base, 1.0):
                best = (g, j, thr)
    return best


def test_root_split_matches_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        X = np.round(rng.standard_normal((60, 4)), 2)
        y = X[:, rng.integers(4)] ** 2 + 0.3 * rng.standard_normal(60)
        g, j, thr = exhaustive_split(X, y)
        t = fit_tree(X, y, max_depth=1)
        assert t.feature[0] == j
        assert t.threshold[0] == pytest.approx(thr)


def test_min_leaf_equal_n_is_single_leaf():
    X = np.arange(10.0)[:, None]
    y = np.arange(10.0)
    t = fit_tree(X, y, min_samples_leaf=10)
    assert t.n_nodes == 1 and t.value[0] == pytest.approx(4.5)


def test_two_clusters():
    x = np.r_[np.linspace(0, 0.4, 10), np.linspace(0.6, 1, 10)]
    y = np.r_[np.ones(10), 2 * np.ones(10)]
    t = fit_tree(x[:, None], y)
    assert t.depth() == 1
    assert 0.4 <= t.threshold[0] < 0.6
    assert sorted(t.value[t.feature == -1]) == [1.0, 2.0]


def test_constant_target_single_leaf():
    rng = np.random.default_rng(0)
    t = fit_tree(rng.standard_normal((30, 3)), np.full(30, 3.3))
    assert t.n_nodes == 1


def test_full_tree_interpolates_distinct_points():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((40, 2))
    y = rng.standard_normal(40)
    np.testing.assert_allclose(fit_tree(X, y).predict(X), y)


def test_leaf_size_respected():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((200, 3))
    t = fit_tree(X, rng.standard_normal(200), min_samples_leaf=7)
    assert t.n_samples[t.feature == -1].min() >= 7


def test_max_features_resolution():
    assert resolve_max_features("third", 101) == 34
    assert resolve_max_features("sqrt", 101) == 10
    assert resolve_max_features("all", 101) == 101
    assert resolve_max_features("third", 1) == 1


def test_degenerate_forest_equals_tree():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((80, 3))
    y = rng.standard_normal(80)
    f = fit_random_forest(X, y, ForestSpec(1, 1, "all", 0, bootstrap=False))
    np.testing.assert_array_equal(f.predict(X), fit_tree(X, y).predict(X))


def test_forest_constant_target():
    rng = np.random.default_rng(5)
    X = rng.standard_normal((50, 4))
    f = fit_random_forest(X, np.full(50, -1.25), ForestSpec(20, 3, "sqrt", 9))
    np.testing.assert_array_equal(f.predict(rng.standard_normal((7, 4))), -1.25)


def test_forest_deterministic_across_workers():
    rng = np.random.default_rng(6)
    X = rng.standard_normal((100, 6))
    y = X[:, 0] + rng.standard_normal(100)
    spec = ForestSpec(12, 2, "third", 42)
    a = fit_random_forest(X, y, spec, workers=1).predict(X)
    b = fit_random_forest(X, y, spec, workers=4).predict(X)
    np.testing.assert_array_equal(a, b)


def test_gbt_zero_trees_is_mean():
    y = np.array([1.0, 2.0, 4.0])
    m = fit_gbt(np.zeros((3, 1)), y, GbtSpec(1, 0))
    np.testing.assert_array_equal(m.predict(np.zeros((2, 1))), [7 / 3, 7 / 3])


def test_gbt_one_stump_fits_two_clusters():
    x = np.r_[np.zeros(10), np.ones(10)][:, None]
    y = np.r_[np.ones(10), 2 * np.ones(10)]
    m = fit_gbt(x, y, GbtSpec(1, 1, 1.0))
    assert m.train_mse[1] == pytest.approx(0.0, abs=1e-28)


def test_gbt_staged_prediction():
    rng = np.random.default_rng(8)
    X = rng.standard_normal((60, 3))
    y = np.sin(X[:, 0]) + 0.1 * rng.standard_normal(60)
    full = fit_gbt(X, y, GbtSpec(2, 30, 0.1))
    part = fit_gbt(X, y, GbtSpec(2, 10, 0.1))
    np.testing.assert_allclose(full.predict(X, n_trees=10), part.predict(X), rtol=0, atol=1e-13)
    assert np.mean((part.predict(X) - y) ** 2) == pytest.approx(part.train_mse[-1])


def test_empty_inputs():
    with pytest.raises(EmptyData):
        fit_tree(np.zeros((0, 2)), np.zeros(0))
