import math

import numpy as np
import pandas as pd
import pytest

from volfit.features import FittingScheme
from volfit.linear import HarSpec, fit_ols, rolling_forecast
from volfit.synthetic import DgpSpec, simulate_panel
from volfit.tuning import (HyperGrid, SweepGrid, default_grid, heatmap_matrix, lasso_lambdas, scheme_sweep,
                           sweep_cell, tune_model, write_sweep)


def sparse_lag_data(seed=0, n=500, p=100):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    y = 0.5 * X[:, 0] + 0.3 * X[:, 4 % p] + 0.2 * X[:, 21 % p] + rng.standard_normal(n)
    return X, y


def test_lambda_grid():
    lam = lasso_lambdas()
    assert lam.size == 1001
    assert lam[0] == 100.0 and lam[-1] == pytest.approx(1e-3)
    assert np.all(np.diff(lam) < 0)


def test_default_grid_sizes():
    assert len(default_grid("lasso")) == 1001
    assert len(default_grid("rf")) == 27
    assert len(default_grid("gbt")) == 12
    assert len(default_grid("ffnn")) == 12


def test_single_candidate():
    X, y = sparse_lag_data()
    g = HyperGrid("lasso", ({"lam": 0.05},))
    r = tune_model("lasso", (X[:300], y[:300]), (X[300:], y[300:]), g)
    assert r.best_index == 0 and r.best_params == {"lam": 0.05}


def test_lasso_selection_beats_ols_endpoint():
    X, y = sparse_lag_data()
    lam = [float(x) for x in lasso_lambdas(100)] + [0.0]
    g = HyperGrid("lasso", tuple({"lam": v} for v in lam))
    r = tune_model("lasso", (X[:300], y[:300]), (X[300:], y[300:]), g)
    ols = fit_ols(X[:300], y[:300])
    assert r.scores[r.best_index] <= np.mean((ols.predict(X[300:]) - y[300:]) ** 2) + 1e-9
    assert r.scores[-1] == pytest.approx(np.mean((ols.predict(X[300:]) - y[300:]) ** 2), rel=1e-6)


def test_permuted_grid_same_winner():
    X, y = sparse_lag_data(1)
    cands = tuple({"lam": v} for v in (0.3, 0.1, 0.03, 0.01))
    a = tune_model("lasso", (X[:300], y[:300]), (X[300:], y[300:]), HyperGrid("lasso", cands))
    b = tune_model("lasso", (X[:300], y[:300]), (X[300:], y[300:]), HyperGrid("lasso", cands[::-1]))
    assert a.best_params == b.best_params


def test_ties_go_to_first_candidate():
    X, y = sparse_lag_data(2)
    g = HyperGrid("lasso", ({"lam": 50.0}, {"lam": 80.0}))
    r = tune_model("lasso", (X[:300], y[:300]), (X[300:], y[300:]), g)
    assert r.scores[0] == r.scores[1] and r.best_index == 0


def test_gbt_staged_scores_match_direct_fits():
    X, y = sparse_lag_data(3, n=300, p=5)
    g = HyperGrid.from_lists("gbt", depth=[1], n_trees=[5, 20], learning_rate=[0.1])
    r = tune_model("gbt", (X[:200], y[:200]), (X[200:], y[200:]), g)
    from volfit.tuning import fit_candidate
    for j, c in enumerate(g.candidates):
        m = fit_candidate("gbt", c, X[:200], y[:200])
        assert r.scores[j] == pytest.approx(np.mean((m.predict(X[200:]) - y[200:]) ** 2), rel=1e-12)
    assert len(r.model.trees) == r.best_params["n_trees"]


def test_tuning_ignores_test_rows():
    X, y = sparse_lag_data(4, n=400, p=10)
    g = HyperGrid.from_lists("rf", n_trees=[5], min_samples_leaf=[5, 10], max_features=["third"])
    a = tune_model("rf", (X[:250], y[:250]), (X[250:320], y[250:320]), g, seed=3)
    Xp = X.copy()
    Xp[320:] = np.nan
    b = tune_model("rf", (Xp[:250], y[:250]), (Xp[250:320], y[250:320]), g, seed=3)
    np.testing.assert_array_equal(a.scores, b.scores)


def test_ffnn_tuning_runs():
    X, y = sparse_lag_data(5, n=300, p=6)
    g = HyperGrid.from_lists("ffnn", architecture=[(2,), (4, 2)], lam=[0.0])
    r = tune_model("ffnn", (X[:200], y[:200]), (X[200:], y[200:]), g, mlp_options={"epochs": 5})
    assert np.all(np.isfinite(r.scores)) and r.best_index in (0, 1)


@pytest.fixture(scope="module")
def panel():
    return simulate_panel(DgpSpec(n_assets=3, n_days=600, rng_seed=2))


def test_one_cell_sweep_matches_direct(panel):
    sweep = SweepGrid(("rolling",), (100,), (5,))
    t = scheme_sweep(panel, HarSpec(), sweep)
    assert len(t) == 1
    sets = rolling_forecast(panel, HarSpec(), FittingScheme("rolling", 100, 5), range(100, 578))
    direct = np.mean([math.sqrt(np.mean((s.predictions - s.actual) ** 2)) for s in sets.values()])
    assert t.mean_rmse.iloc[0] == direct


def test_invalid_cells_are_nan(panel):
    t = scheme_sweep(panel, HarSpec(), SweepGrid(("rolling",), (100,), (1, 5), eval_range=range(50, 300)))
    assert t.mean_rmse.isna().all() and (t.n_assets == 0).all()


def test_zero_noise_sweep():
    p = simulate_panel(DgpSpec(n_assets=2, n_days=200, sigma_eps=0.0, beta_v=0.02, rng_seed=3))
    t = scheme_sweep(p, HarSpec(vix=True), SweepGrid(("rolling", "expanding"), (20, 60), (1, 7)))
    assert np.all(t.mean_rmse < 1e-8)


def test_cell_reproduces_standalone(panel):
    sweep = SweepGrid(("rolling", "expanding"), (63, 126), (1, 10))
    t = scheme_sweep(panel, HarSpec(), sweep, workers=2)
    row = sweep_cell(panel, HarSpec(), "expanding", 63, 10, range(126, 578))
    got = t[(t["style"] == "expanding") & (t.train_window == 63) & (t.stride == 10)].iloc[0]
    assert got.mean_rmse == row["mean_rmse"]
    assert (t.n_forecasts == 452).all()


def test_write_sweep(panel, tmp_path):
    t = scheme_sweep(panel, HarSpec(), SweepGrid(("rolling", "expanding"), (63, 126), (1, 10)))
    files = write_sweep(t, tmp_path)
    assert sorted(f.name for f in files) == ["heatmap.csv", "heatmap_expanding.matrix", "heatmap_rolling.matrix"]
    back = pd.read_csv(tmp_path / "heatmap.csv")
    assert list(back.columns) == ["style", "train_window", "stride", "mean_rmse", "n_assets", "n_forecasts"]
    lines = (tmp_path / "heatmap_rolling.matrix").read_text().splitlines()
    assert lines[1] == "2 63 126"
    m = heatmap_matrix(t, "rolling")
    assert float(lines[2].split()[1]) == m.loc[1, 63]
