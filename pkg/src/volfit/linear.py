"""Least squares, weighted least squares and lasso, plus the HAR forecast engine.

All estimators fit an unpenalized intercept and return a :class:`LinearModel`.
:func:`rolling_forecast` re-estimates a HAR specification on the windows
produced by :func:`volfit.features.scheme_windows` and forecasts each block of
evaluation rows with the coefficients of its window.
"""

from __future__ import annotations

import csv
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numba
import numpy as np

from volfit.errors import (
    EstimationError,
    NonConvergence,
    RankDeficient,
    RankDeficientWarning,
    ShapeMismatch,
    VolfitError,
)
from volfit.features import FeatureMatrix, FittingScheme, har_features, scheme_windows
from volfit.market_data import PanelDataset, format_date, format_float, to_dates

RANK_TOL = 1e-10
RIDGE_FALLBACK = 1e-8
WLS_FLOOR = 1e-8


@dataclass
class LinearModel:
    intercept: float
    coefficients: np.ndarray
    feature_names: tuple
    estimator: str
    penalty: float | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        if self.coefficients.shape != (len(self.feature_names),):
            raise ShapeMismatch("one coefficient per feature name required")

    def predict(self, X) -> np.ndarray:
        X = _as_2d(X)
        if X.shape[1] != self.coefficients.size:
            raise ShapeMismatch(f"expected {self.coefficients.size} columns, got {X.shape[1]}")
        return self.intercept + X @ self.coefficients


def _as_2d(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    return X


def _names(X, feature_names):
    if feature_names is None:
        return tuple(f"x{j}" for j in range(X.shape[1]))
    if len(feature_names) != X.shape[1]:
        raise ShapeMismatch("feature_names length differs from the column count")
    return tuple(feature_names)


def _lstsq(A, y, label):
    if A.shape[0] < A.shape[1]:
        raise RankDeficient(f"{label}: {A.shape[0]} rows for {A.shape[1]} parameters")
    sol, _, _, sv = np.linalg.lstsq(A, y, rcond=None)
    if sv[-1] < RANK_TOL * sv[0]:
        raise RankDeficient(f"{label}: design is rank deficient (condition {sv[0] / max(sv[-1], 1e-300):.3g})")
    return sol


def fit_ols(X, y, feature_names=None) -> LinearModel:
    X = _as_2d(X)
    y = np.asarray(y, dtype=float)
    A = np.column_stack([np.ones(X.shape[0]), X])
    sol = _lstsq(A, y, "ols")
    return LinearModel(float(sol[0]), sol[1:], _names(X, feature_names), "ols")


def fit_wls(X, y, feature_names=None, floor: float = WLS_FLOOR) -> LinearModel:
    """Two-stage WLS with weights ``1 / max(exp(yhat_ols), floor)``.

    High fitted log-variance days get less weight.
    """
    X = _as_2d(X)
    y = np.asarray(y, dtype=float)
    A = np.column_stack([np.ones(X.shape[0]), X])
    stage1 = _lstsq(A, y, "wls stage 1")
    w = 1.0 / np.maximum(np.exp(A @ stage1), floor)
    sw = np.sqrt(w)
    sol = _lstsq(A * sw[:, None], y * sw, "wls stage 2")
    return LinearModel(float(sol[0]), sol[1:], _names(X, feature_names), "wls",
                       diagnostics={"weight_floor": floor})


def fit_ridge(X, y, penalty: float = RIDGE_FALLBACK, feature_names=None) -> LinearModel:
    """Ridge on centred data, intercept unpenalized; the rank-deficiency fallback."""
    X = _as_2d(X)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    mx, my = X.mean(axis=0), y.mean()
    Xc = X - mx
    G = Xc.T @ Xc + penalty * n * np.eye(p)
    b = np.linalg.solve(G, Xc.T @ (y - my)) if p else np.zeros(0)
    return LinearModel(float(my - mx @ b), b, _names(X, feature_names), "ridge", penalty)


# ------------------------------------------------------------------- lasso


@numba.njit(cache=True)
def _cd(Zt, yc, lam, b, max_sweeps, coef_tol, gap_tol, record):
    # Zt is the transposed design so each column is contiguous
    p, n = Zt.shape
    col_sq = np.zeros(p)
    for j in range(p):
        col_sq[j] = np.dot(Zt[j], Zt[j]) / n
    r = yc - Zt.T @ b
    y_sq = np.dot(yc, yc)
    hist = np.empty(max_sweeps + 1 if record else 1)
    if record:
        hist[0] = np.dot(r, r) / (2 * n) + lam * np.sum(np.abs(b))
    gap = np.inf
    sweeps = 0
    converged = False
    while sweeps < max_sweeps:
        max_step = 0.0
        for j in range(p):
            if col_sq[j] == 0.0:
                b[j] = 0.0
                continue
            old = b[j]
            rho = np.dot(Zt[j], r) / n + col_sq[j] * old
            if rho > lam:
                new = (rho - lam) / col_sq[j]
            elif rho < -lam:
                new = (rho + lam) / col_sq[j]
            else:
                new = 0.0
            if new != old:
                r -= Zt[j] * (new - old)
                b[j] = new
                step = abs(new - old)
                if step > max_step:
                    max_step = step
        sweeps += 1
        rss = np.dot(r, r)
        primal = rss / (2 * n) + lam * np.sum(np.abs(b))
        if record:
            hist[sweeps] = primal
        # dual point: residual scaled into the feasible set |Z^T theta| <= n lam
        zr = np.max(np.abs(Zt @ r)) if p > 0 else 0.0
        s = 1.0 if zr <= n * lam else n * lam / zr
        dual = (y_sq - np.dot(yc - s * r, yc - s * r)) / (2 * n)
        gap = primal - dual
        if max_step < coef_tol or gap < gap_tol * max(y_sq / (2 * n), 1e-300):
            converged = True
            break
    return sweeps, gap, converged, hist[: sweeps + 1] if record else hist[:0]


def _standardize(X):
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (X - mu) / sd, mu, sd


def fit_lasso(X, y, lam: float, feature_names=None, max_sweeps: int = 10_000,
              coef_tol: float = 1e-9, gap_tol: float = 1e-8, warm_start=None,
              record_history: bool = False) -> LinearModel:
    """Coordinate-descent lasso on internally standardized columns.

    Minimizes ``||y - c - Z b||^2 / (2n) + lam * ||b||_1`` where ``Z`` are the
    columns centred and scaled to unit (population) standard deviation; the
    returned coefficients are mapped back to the original scale. ``warm_start``
    takes standardized-scale coefficients (``diagnostics['std_coef']`` of a
    previous fit).
    """
    if lam < 0:
        raise ValueError("lasso penalty must be >= 0")
    X = _as_2d(X)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    if n < 2:
        raise RankDeficient("lasso needs at least two rows")
    Z, mu, sd = _standardize(X)
    ybar = y.mean()
    yc = y - ybar
    b = np.zeros(p) if warm_start is None else np.array(warm_start, dtype=float)
    sweeps, gap, converged, hist = _cd(np.ascontiguousarray(Z.T), yc, float(lam), b,
                                       int(max_sweeps), coef_tol, gap_tol, record_history)
    if not converged:
        raise NonConvergence(f"lasso did not converge in {max_sweeps} sweeps (duality gap {gap:.3g})", gap)
    coef = b / sd
    diag = {"sweeps": int(sweeps), "duality_gap": float(gap), "std_coef": b.copy(),
            "x_mean": mu, "x_scale": sd}
    if record_history:
        diag["objective"] = hist
    return LinearModel(float(ybar - mu @ coef), coef, _names(X, feature_names), "lasso", float(lam), diag)


def lasso_lambda_max(X, y) -> float:
    """Smallest penalty at which every standardized slope is zero."""
    Z, _, _ = _standardize(_as_2d(X))
    y = np.asarray(y, dtype=float)
    return float(np.max(np.abs(Z.T @ (y - y.mean()))) / y.size)


# ------------------------------------------------------------------ pooling

ESTIMATORS = {"ols": fit_ols, "wls": fit_wls}


def _stack(blocks: Sequence):
    Xs, ys, names = [], [], None
    for b in blocks:
        if isinstance(b, FeatureMatrix):
            X, y, nm = b.X, b.y, b.names
        else:
            X, y, *rest = b
            X = _as_2d(X)
            nm = tuple(rest[0]) if rest and rest[0] is not None else tuple(f"x{j}" for j in range(X.shape[1]))
        if names is None:
            names = tuple(nm)
        elif tuple(nm) != names:
            raise ShapeMismatch(f"feature names differ across assets: {names} vs {tuple(nm)}")
        Xs.append(X)
        ys.append(np.asarray(y, dtype=float))
    return np.concatenate(Xs), np.concatenate(ys), names


def pooled_fit(blocks: Sequence, estimator: str = "ols", **kwargs) -> LinearModel:
    """One coefficient vector on the stacked per-asset samples.

    ``blocks`` holds :class:`FeatureMatrix` objects or ``(X, y[, names])`` tuples.
    """
    if len(blocks) < 2:
        raise ValueError("pooled estimation needs at least two assets")
    X, y, names = _stack(blocks)
    if estimator == "lasso":
        model = fit_lasso(X, y, feature_names=names, **kwargs)
    else:
        model = ESTIMATORS[estimator](X, y, feature_names=names, **kwargs)
    model.diagnostics["pooled"] = len(blocks)
    return model


# ------------------------------------------------------------- HAR engine


@dataclass(frozen=True)
class HarSpec:
    vix: bool = False
    estimator: Literal["ols", "wls"] = "ols"
    pooled: bool = False

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown HAR estimator {self.estimator!r}")

    @property
    def model_id(self) -> str:
        return ("har-vix" if self.vix else "har") + f"_{self.estimator}" + ("_pooled" if self.pooled else "")

    @classmethod
    def from_id(cls, model_id: str) -> "HarSpec":
        parts = model_id.split("_")
        if parts[0] not in ("har", "har-vix") or len(parts) not in (2, 3) or \
                (len(parts) == 3 and parts[2] != "pooled"):
            raise ValueError(f"not a HAR model id: {model_id!r}")
        return cls(parts[0] == "har-vix", parts[1], len(parts) == 3)


HAR_SPECS = tuple(HarSpec(v, e, p) for p in (False, True) for e in ("ols", "wls") for v in (False, True))


@dataclass
class ForecastSet:
    asset_id: str
    model_id: str
    dates: np.ndarray
    predictions: np.ndarray
    actual: np.ndarray | None = None

    def __post_init__(self):
        self.dates = to_dates(self.dates)
        self.predictions = np.asarray(self.predictions, dtype=float)
        if self.actual is not None:
            self.actual = np.asarray(self.actual, dtype=float)

    def __len__(self):
        return self.predictions.size


def fit_with_fallback(estimator: str, X, y, names=None, **context) -> LinearModel:
    """Fit, falling back to a tiny ridge if the window is rank deficient."""
    try:
        return ESTIMATORS[estimator](X, y, feature_names=names)
    except RankDeficient as exc:
        warnings.warn(f"{exc}; using ridge({RIDGE_FALLBACK:g}) fallback {context}", RankDeficientWarning,
                      stacklevel=2)
        return fit_ridge(X, y, RIDGE_FALLBACK, feature_names=names)
    except VolfitError as exc:
        raise EstimationError(str(exc), **context) from exc
    except np.linalg.LinAlgError as exc:
        raise EstimationError(str(exc), **context) from exc


def panel_har_features(panel: PanelDataset, vix: bool) -> dict:
    if vix and panel.vix is None:
        raise ValueError("HAR-VIX requested but the panel has no VIX series")
    v = panel.vix if vix else None
    return {s.asset_id: har_features(s, v) for s in panel.assets}


def rows_for_targets(fm: FeatureMatrix, dates: np.ndarray, start, end) -> range:
    """Contiguous row range whose target dates fall within ``[start, end]``."""
    target_dates = dates[fm.origins + 1]
    idx = np.flatnonzero((target_dates >= np.datetime64(start, "D")) & (target_dates <= np.datetime64(end, "D")))
    if idx.size == 0:
        raise ValueError("no rows target the requested dates")
    return range(int(idx[0]), int(idx[-1]) + 1)


def _forecast_one(asset_id, fm: FeatureMatrix, dates, spec: HarSpec, scheme, eval_range):
    pred = np.empty(len(eval_range))
    for k, w in enumerate(scheme_windows(scheme, len(fm), eval_range)):
        sl = slice(w.fit_start, w.fit_stop)
        m = fit_with_fallback(spec.estimator, fm.X[sl], fm.y[sl], fm.names, asset=asset_id, window=k)
        pts = slice(w.forecast_points.start, w.forecast_points.stop)
        pred[pts.start - eval_range.start: pts.stop - eval_range.start] = m.predict(fm.X[pts])
    rows = slice(eval_range.start, eval_range.stop)
    return ForecastSet(asset_id, spec.model_id, dates[fm.origins[rows] + 1], pred, fm.y[rows].copy())


def rolling_forecast(panel: PanelDataset, spec: HarSpec, scheme: FittingScheme, eval_range: range,
                     workers: int = 1, features: dict | None = None) -> dict:
    """One-step-ahead HAR forecasts over ``eval_range`` (HAR row indices).

    Returns ``{asset_id: ForecastSet}``. Pooled specs fit each window once on
    the stacked assets and forecast every asset with those coefficients.
    """
    fms = features if features is not None else panel_har_features(panel, spec.vix)
    dates = panel.dates
    ids = panel.asset_ids
    if not spec.pooled:
        with ThreadPoolExecutor(max_workers=max(1, workers)) as ex:
            sets = list(ex.map(lambda a: _forecast_one(a, fms[a], dates, spec, scheme, eval_range), ids))
        return dict(zip(ids, sets))

    n_rows = len(fms[ids[0]])
    windows = scheme_windows(scheme, n_rows, eval_range)

    def run(kw):
        k, w = kw
        sl = slice(w.fit_start, w.fit_stop)
        X = np.concatenate([fms[a].X[sl] for a in ids])
        y = np.concatenate([fms[a].y[sl] for a in ids])
        m = fit_with_fallback(spec.estimator, X, y, fms[ids[0]].names, asset="pooled", window=k)
        pts = slice(w.forecast_points.start, w.forecast_points.stop)
        return [m.predict(fms[a].X[pts]) for a in ids]

    with ThreadPoolExecutor(max_workers=max(1, workers)) as ex:
        blocks = list(ex.map(run, enumerate(windows)))
    rows = slice(eval_range.start, eval_range.stop)
    out = {}
    for i, a in enumerate(ids):
        pred = np.concatenate([b[i] for b in blocks])
        fm = fms[a]
        out[a] = ForecastSet(a, spec.model_id, dates[fm.origins[rows] + 1], pred, fm.y[rows].copy())
    return out


# --------------------------------------------------------------- CSV I/O


def write_forecasts(sets, path) -> None:
    """``asset,date,model_id,prediction`` rows in the order given."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["asset", "date", "model_id", "prediction"])
        for fs in sets:
            for d, p in zip(fs.dates, fs.predictions):
                w.writerow([fs.asset_id, format_date(d), fs.model_id, format_float(p)])


def read_forecasts(path) -> list[ForecastSet]:
    groups: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            key = (row["asset"], row["model_id"])
            d, p = groups.setdefault(key, ([], []))
            d.append(row["date"])
            p.append(float(row["prediction"]))
    return [ForecastSet(a, m, d, p) for (a, m), (d, p) in groups.items()]
