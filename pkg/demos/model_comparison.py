"""Compare HAR variants with the machine-learning baselines and run the MCS.

Uses the same entry point as ``volfit backtest`` on a small synthetic panel
with deliberately small hyperparameter grids. Run with
``python3 demos/model_comparison.py``; outputs go to ``demo-out/``.
"""

import pandas as pd

from volfit.pipeline import RunConfig, run_backtest

cfg = RunConfig.from_dict({
    "synthetic": {"n_assets": 4, "n_days": 1000, "beta_v": 0.005, "rng_seed": 3},
    "roster": ["har_ols", "har-vix_ols", "har_wls", "har_ols_pooled", "lasso", "rf", "gbt", "ffnn"],
    "har_scheme": {"style": "rolling", "train_window": 400, "stride": 1},
    "lags": 22,
    "grids": {"lasso": {"lam": [0.1, 0.01, 0.001]},
              "rf": {"n_trees": [50], "min_samples_leaf": [5], "max_features": ["third"]},
              "gbt": {"depth": [1, 2], "n_trees": [100], "learning_rate": [0.1]},
              "ffnn": {"architecture": [[8, 4]], "lam": [0.0, 1e-4]}},
    "mlp": {"epochs": 50},
    "mcs": {"level": 0.95, "reps": 500, "block_length": None, "statistic": "max"},
    "output_dir": "demo-out",
})
manifest = run_backtest(cfg)
print("status:", manifest["status"])

summary = pd.read_csv("demo-out/summary.csv")
print(summary.pivot(index="model", columns="metric", values="mean").round(4).to_string())

print("\nShare of assets whose 95% model confidence set keeps each model:")
print(pd.read_csv("demo-out/mcs_summary.csv").pivot(index="model", columns="loss", values="inclusion_rate"))
