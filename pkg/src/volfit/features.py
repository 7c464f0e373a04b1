"""Regressor matrices and fitting-scheme windows.

Row ``i`` of every feature matrix carries the information available at
calendar index ``origins[i]`` and targets the log-RV one day later.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from volfit.errors import InsufficientHistory, SeriesTooShort
from volfit.market_data import RvSeries

WEEKLY = 5
MONTHLY = 22
DEFAULT_LAGS = 100


@dataclass(frozen=True)
class FeatureMatrix:
    X: np.ndarray
    y: np.ndarray
    names: tuple
    origins: np.ndarray

    def __len__(self):
        return self.y.size

    def rows(self, idx) -> "FeatureMatrix":
        return FeatureMatrix(self.X[idx], self.y[idx], self.names, self.origins[idx])


def _values(series) -> np.ndarray:
    if isinstance(series, RvSeries):
        return series.values
    return np.asarray(series, dtype=float)


def _trailing_mean(v: np.ndarray, k: int) -> np.ndarray:
    """out[t] = mean(v[t-k+1 : t+1]) for t >= k-1, NaN before."""
    out = np.full(v.size, np.nan)
    if v.size >= k:
        # explicit window sums keep the result independent of earlier values
        win = np.lib.stride_tricks.sliding_window_view(v, k)
        out[k - 1:] = win.sum(axis=1) / k
    return out


def har_features(series, vix=None, weekly: int = WEEKLY, monthly: int = MONTHLY) -> FeatureMatrix:
    """Daily, weekly-mean and monthly-mean log-RV (plus VIX) against next-day log-RV."""
    v = _values(series)
    n = v.size
    if n < monthly + 1:
        raise SeriesTooShort(f"HAR features need at least {monthly + 1} observations, got {n}")
    t = np.arange(monthly - 1, n - 1)
    cols = [v[t], _trailing_mean(v, weekly)[t], _trailing_mean(v, monthly)[t]]
    names = ["rv_d", "rv_w", "rv_m"]
    if vix is not None:
        vix = np.asarray(vix, dtype=float)
        if vix.shape != v.shape:
            raise ValueError("vix must be aligned with the series")
        cols.append(vix[t])
        names.append("vix")
    return FeatureMatrix(np.column_stack(cols), v[t + 1].copy(), tuple(names), t)


def lag_features(series, lags: int = DEFAULT_LAGS, vix=None) -> FeatureMatrix:
    """The ``lags`` most recent log-RVs, most recent first."""
    v = _values(series)
    n = v.size
    if lags < 1:
        raise ValueError("lags must be >= 1")
    if n < lags + 1:
        raise SeriesTooShort(f"{lags} lags need at least {lags + 1} observations, got {n}")
    t = np.arange(lags - 1, n - 1)
    X = np.lib.stride_tricks.sliding_window_view(v[: n - 1], lags)[:, ::-1].copy()
    names = [f"lag_{k}" for k in range(1, lags + 1)]
    if vix is not None:
        vix = np.asarray(vix, dtype=float)
        if vix.shape != v.shape:
            raise ValueError("vix must be aligned with the series")
        X = np.column_stack([X, vix[t]])
        names.append("vix")
    return FeatureMatrix(X, v[t + 1].copy(), tuple(names), t)


@dataclass(frozen=True)
class FittingScheme:
    style: Literal["rolling", "expanding"] = "rolling"
    train_window: int = 630
    stride: int = 1

    def __post_init__(self):
        if self.style not in ("rolling", "expanding"):
            raise ValueError(f"unknown window style {self.style!r}")
        if self.train_window < 1 or self.stride < 1:
            raise ValueError("train_window and stride must be >= 1")


@dataclass(frozen=True)
class SchemeWindow:
    fit_start: int
    fit_stop: int
    forecast_points: range

    @property
    def fit_range(self) -> range:
        return range(self.fit_start, self.fit_stop)


def scheme_windows(scheme: FittingScheme, n_rows: int, eval_range: range) -> list[SchemeWindow]:
    """Split ``eval_range`` into stride-sized blocks, each with its training rows.

    The last block is truncated at the end of ``eval_range``.
    """
    start, stop = eval_range.start, eval_range.stop
    if eval_range.step != 1 or stop <= start:
        raise ValueError("eval_range must be a non-empty contiguous range")
    if stop > n_rows:
        raise InsufficientHistory(f"eval_range ends at {stop} but only {n_rows} rows exist")
    if start < scheme.train_window:
        raise InsufficientHistory(
            f"first evaluation row {start} leaves fewer than {scheme.train_window} training rows")
    out = []
    for s in range(start, stop, scheme.stride):
        fit_start = s - scheme.train_window if scheme.style == "rolling" else start - scheme.train_window
        out.append(SchemeWindow(fit_start, s, range(s, min(s + scheme.stride, stop))))
    return out
