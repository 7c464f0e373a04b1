"""Hyperparameter tuning on the static split and the fitting-scheme grid sweep."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import pandas as pd

from volfit.errors import EstimationError, InsufficientHistory, VolfitError
from volfit.features import FittingScheme
from volfit.linear import HarSpec, fit_lasso, panel_har_features, rolling_forecast
from volfit.market_data import PanelDataset
from volfit.neural import ARCHITECTURES, PENALTIES, MlpSpec, mlp_train
from volfit.trees import ForestSpec, GbtSpec, fit_gbt, fit_random_forest

logger = logging.getLogger(__name__)

FAMILIES = ("lasso", "rf", "gbt", "ffnn")

DEFAULT_TRAIN_WINDOWS = (63, 126, 252, 378, 504, 630, 756, 882, 1008)
DEFAULT_STRIDES = (1, 2, 5, 10, 22, 63, 126, 250)


def lasso_lambdas(n: int = 1000) -> np.ndarray:
    """10 ** (2 - 5 i / n) for i = 0..n, from 100 down to 0.001."""
    i = np.arange(n + 1)
    return 10.0 ** (2.0 - 5.0 * i / n)


@dataclass(frozen=True)
class HyperGrid:
    family: str
    candidates: tuple

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown model family {self.family!r}")
        if not self.candidates:
            raise ValueError("a hyperparameter grid needs at least one candidate")

    def __len__(self):
        return len(self.candidates)

    @classmethod
    def from_lists(cls, family: str, **lists) -> "HyperGrid":
        """Cartesian product of the given candidate lists, first key varying slowest."""
        keys = list(lists)
        combos = [{}]
        for k in keys:
            combos = [dict(c, **{k: v}) for c in combos for v in lists[k]]
        return cls(family, tuple(combos))


def default_grid(family: str) -> HyperGrid:
    if family == "lasso":
        return HyperGrid("lasso", tuple({"lam": float(x)} for x in lasso_lambdas()))
    if family == "rf":
        return HyperGrid.from_lists("rf", n_trees=[100, 250, 500], min_samples_leaf=[1, 5, 10],
                                    max_features=["third", "sqrt", "all"])
    if family == "gbt":
        return HyperGrid.from_lists("gbt", depth=[1, 2], n_trees=[100, 250, 500], learning_rate=[0.01, 0.1])
    if family == "ffnn":
        return HyperGrid.from_lists("ffnn", architecture=list(ARCHITECTURES), lam=list(PENALTIES))
    raise ValueError(f"unknown model family {family!r}")


@dataclass
class TuneResult:
    family: str
    best_index: int
    best_params: dict
    scores: np.ndarray
    model: object

    def predict(self, X) -> np.ndarray:
        return self.model.predict(X)


def fit_candidate(family: str, params: dict, X, y, X_val=None, y_val=None, seed: int = 0,
                  mlp_options: dict | None = None, workers: int = 1):
    """Fit one family/hyperparameter combination; returns an object with ``predict``."""
    if family == "lasso":
        return fit_lasso(X, y, params["lam"])
    if family == "rf":
        spec = ForestSpec(int(params["n_trees"]), int(params["min_samples_leaf"]), params["max_features"], seed)
        return fit_random_forest(X, y, spec, workers=workers)
    if family == "gbt":
        return fit_gbt(X, y, GbtSpec(int(params["depth"]), int(params["n_trees"]),
                                      float(params["learning_rate"]), seed))
    if family == "ffnn":
        spec = MlpSpec(tuple(params["architecture"]), float(params["lam"]), rng_seed=seed, **(mlp_options or {}))
        return mlp_train(X, y, X_val, y_val, spec)
    raise ValueError(f"unknown model family {family!r}")


def _mse(pred, y):
    return float(np.mean((np.asarray(pred) - y) ** 2))


def _tune_lasso(grid, X, y, Xv, yv):
    lams = np.array([c["lam"] for c in grid.candidates], dtype=float)
    scores = np.empty(lams.size)
    models = {}
    warm = None
    # walk the path from large to small penalties, warm-starting each fit
    for j in sorted(range(lams.size), key=lambda j: (-lams[j], j)):
        try:
            m = fit_lasso(X, y, lams[j], warm_start=warm)
        except VolfitError as exc:
            raise EstimationError(str(exc), candidate=grid.candidates[j]) from exc
        warm = m.diagnostics["std_coef"]
        scores[j] = _mse(m.predict(Xv), yv)
        models[j] = m
    return scores, models


def _tune_gbt(grid, X, y, Xv, yv, seed):
    scores = np.empty(len(grid))
    groups: dict = {}
    for j, c in enumerate(grid.candidates):
        groups.setdefault((int(c["depth"]), float(c["learning_rate"])), []).append(j)
    models = {}
    for (depth, lr), js in groups.items():
        n_max = max(int(grid.candidates[j]["n_trees"]) for j in js)
        try:
            full = fit_gbt(X, y, GbtSpec(depth, n_max, lr, seed))
        except VolfitError as exc:
            raise EstimationError(str(exc), candidate={"depth": depth, "learning_rate": lr}) from exc
        for j in js:
            k = int(grid.candidates[j]["n_trees"])
            scores[j] = _mse(full.predict(Xv, n_trees=k), yv)
            # boosting is sequential, so the first k trees are the k-tree model
            models[j] = replace(full, trees=full.trees[:k], spec=GbtSpec(depth, k, lr, seed),
                                train_mse=full.train_mse[: k + 1])
    return scores, models


def tune_model(family: str, train, validation, grid: HyperGrid | None = None, seed: int = 0,
               mlp_options: dict | None = None, workers: int = 1) -> TuneResult:
    """Fit every candidate on ``train`` and pick the lowest validation MSE.

    ``train`` and ``validation`` are ``(X, y)`` pairs. Ties go to the earlier
    candidate. The returned model is the winning candidate fitted on ``train``.
    """
    grid = grid or default_grid(family)
    if grid.family != family:
        raise ValueError(f"grid is for {grid.family}, not {family}")
    X, y = (np.asarray(a, dtype=float) for a in train)
    Xv, yv = (np.asarray(a, dtype=float) for a in validation)
    if family == "lasso":
        scores, models = _tune_lasso(grid, X, y, Xv, yv)
    elif family == "gbt":
        scores, models = _tune_gbt(grid, X, y, Xv, yv, seed)
    else:
        def run(j):
            c = grid.candidates[j]
            try:
                m = fit_candidate(family, c, X, y, Xv, yv, seed, mlp_options)
            except VolfitError as exc:
                raise EstimationError(str(exc), candidate=c) from exc
            return _mse(m.predict(Xv), yv), m

        with ThreadPoolExecutor(max_workers=max(1, workers)) as ex:
            out = list(ex.map(run, range(len(grid))))
        scores = np.array([s for s, _ in out])
        models = {j: m for j, (_, m) in enumerate(out)}
    finite = np.where(np.isfinite(scores), scores, np.inf)
    best = int(np.argmin(finite))
    return TuneResult(family, best, dict(grid.candidates[best]), scores, models[best])


# ---------------------------------------------------------------- sweep


@dataclass(frozen=True)
class SweepGrid:
    styles: tuple = ("rolling",)
    train_windows: tuple = DEFAULT_TRAIN_WINDOWS
    strides: tuple = DEFAULT_STRIDES
    # HAR row indices to evaluate; defaults to every row after the largest window
    eval_range: range | None = None

    def cells(self):
        return [(s, w, k) for s in self.styles for w in self.train_windows for k in self.strides]

    def resolve_eval_range(self, n_rows: int) -> range:
        if self.eval_range is not None:
            return self.eval_range
        start = max(self.train_windows)
        if start >= n_rows:
            raise InsufficientHistory(f"largest window {start} leaves no rows out of {n_rows} to evaluate")
        return range(start, n_rows)


SWEEP_COLUMNS = ["style", "train_window", "stride", "mean_rmse", "n_assets", "n_forecasts"]


def sweep_cell(panel: PanelDataset, spec: HarSpec, style: str, window: int, stride: int,
               eval_range: range, features=None) -> dict:
    """Mean over assets of the out-of-sample RMSE for one fitting scheme."""
    sets = rolling_forecast(panel, spec, FittingScheme(style, window, stride), eval_range, features=features)
    rmse = [math.sqrt(float(np.mean((fs.predictions - fs.actual) ** 2))) for fs in sets.values()]
    return {"style": style, "train_window": window, "stride": stride, "mean_rmse": float(np.mean(rmse)),
            "n_assets": len(rmse), "n_forecasts": len(eval_range)}


def scheme_sweep(panel: PanelDataset, spec: HarSpec = HarSpec(), sweep: SweepGrid = SweepGrid(),
                 workers: int = 1) -> pd.DataFrame:
    """Long-format heatmap table, one row per (style, train_window, stride).

    Every cell forecasts the same evaluation rows. Cells that cannot be
    evaluated get ``NaN`` RMSE and zero counts.
    """
    fms = panel_har_features(panel, spec.vix)
    n_rows = len(next(iter(fms.values())))
    eval_range = sweep.resolve_eval_range(n_rows)

    def run(cell):
        style, w, k = cell
        try:
            return sweep_cell(panel, spec, style, w, k, eval_range, fms)
        except (VolfitError, ValueError) as exc:
            logger.warning("sweep cell %s/%d/%d failed: %s", style, w, k, exc)
            return {"style": style, "train_window": w, "stride": k, "mean_rmse": float("nan"),
                    "n_assets": 0, "n_forecasts": 0}

    with ThreadPoolExecutor(max_workers=max(1, workers)) as ex:
        rows = list(ex.map(run, sweep.cells()))
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)


def heatmap_matrix(table: pd.DataFrame, style: str) -> pd.DataFrame:
    """Strides x train windows matrix of mean RMSE for one style."""
    sub = table[table["style"] == style]
    return sub.pivot(index="stride", columns="train_window", values="mean_rmse").sort_index().sort_index(axis=1)


def write_sweep(table: pd.DataFrame, directory) -> list[Path]:
    """``heatmap.csv`` plus a gnuplot nonuniform-matrix file per style."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = [directory / "heatmap.csv"]
    with open(out[0], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in table.itertuples(index=False):
            w.writerow([r.style, int(r.train_window), int(r.stride),
                        "" if not np.isfinite(r.mean_rmse) else repr(float(r.mean_rmse)),
                        int(r.n_assets), int(r.n_forecasts)])
    for style in dict.fromkeys(table["style"]):
        m = heatmap_matrix(table, style)
        path = directory / f"heatmap_{style}.matrix"
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# {style} window style: rows are strides, columns are training windows\n")
            fh.write(" ".join([str(m.shape[1])] + [str(int(c)) for c in m.columns]) + "\n")
            for stride, row in m.iterrows():
                vals = ["NaN" if not np.isfinite(v) else repr(float(v)) for v in row.to_numpy()]
                fh.write(" ".join([str(int(stride))] + vals) + "\n")
        out.append(path)
    return out
