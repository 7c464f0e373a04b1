"""Forecast losses, realized utility, CSED curves and the model confidence set.

Every function takes log-RV realizations and log-RV forecasts on the same
dates. Variance ratios are formed as ``exp(rv - rv_hat)`` so that large
log-RV levels never overflow.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from volfit.errors import DegenerateLosses, Misaligned
from volfit.market_data import NINE_MONTHS

QUANTILES = (0.05, 0.25, 0.50, 0.75, 0.95)
TRADING_DAYS = 252
_LOG_MAX = math.log(np.finfo(float).max)


@dataclass
class LossSeries:
    """Per-date loss summands and their mean."""

    mean: float
    summands: np.ndarray
    dates: np.ndarray | None = None
    asset_id: str | None = None
    model_id: str | None = None


def _pair(actual, forecast):
    a = np.asarray(actual, dtype=float)
    f = np.asarray(forecast, dtype=float)
    if a.shape != f.shape or a.ndim != 1:
        raise Misaligned(f"actual {a.shape} and forecast {f.shape} are not aligned 1-d series")
    if a.size == 0:
        raise Misaligned("empty series")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(f))):
        raise ValueError("losses need finite inputs")
    return a, f


def mse(actual, forecast) -> LossSeries:
    a, f = _pair(actual, forecast)
    s = (a - f) ** 2
    return LossSeries(float(s.mean()), s)


def qlike(actual, forecast) -> LossSeries:
    """``exp(rv)/exp(rv_hat) - (rv - rv_hat) - 1`` per date."""
    a, f = _pair(actual, forecast)
    d = a - f
    if d.max() > _LOG_MAX:
        raise OverflowError("variance ratio exp(rv - rv_hat) overflows float64")
    # expm1(d) - d equals ratio - d - 1 without cancellation near d = 0
    s = np.maximum(np.expm1(d) - d, 0.0)
    return LossSeries(float(s.mean()), s)


@dataclass(frozen=True)
class UtilityParams:
    sharpe_ratio: float = 0.40
    gamma: float = 2.0
    cost_window: int = NINE_MONTHS
    # periods per year used to annualize the daily variance in the position rule
    annualization: int = TRADING_DAYS

    def __post_init__(self):
        if self.sharpe_ratio <= 0 or self.gamma <= 0:
            raise ValueError("sharpe_ratio and gamma must be positive")

    @property
    def max_utility(self) -> float:
        """Utility of perfect forecasts in percent: SR^2 / (2 gamma)."""
        return _scale(self) / 2.0


def _scale(params: UtilityParams) -> float:
    # 100 * SR first keeps SR=0.40 exact: 40 * 0.4 == 16.0 in binary floating point
    return 100.0 * params.sharpe_ratio * params.sharpe_ratio / params.gamma


def realized_utility(actual, forecast, params: UtilityParams = UtilityParams()) -> LossSeries:
    """Per-date realized utility in percent.

    ``(SR^2 / gamma) * (sqrt(rho) - rho / 2)`` with ``rho`` the realized over
    forecast variance ratio.
    """
    a, f = _pair(actual, forecast)
    rho = np.exp(a - f)
    u = _scale(params) * (np.sqrt(rho) - 0.5 * rho)
    return LossSeries(float(u.mean()), u)


def positions(forecast, params: UtilityParams = UtilityParams()) -> np.ndarray:
    """Volatility-targeting risky weight ``(SR/gamma) / sigma_hat`` with annualized sigma_hat."""
    f = np.asarray(forecast, dtype=float)
    return (params.sharpe_ratio / params.gamma) / np.sqrt(params.annualization * np.exp(f))


def realized_utility_tc(actual, forecast, spreads, params: UtilityParams = UtilityParams()) -> LossSeries:
    """Realized utility net of trading costs, in percent.

    ``spreads`` are the (already smoothed, e.g. rolling-median) relative
    bid-ask spreads at each rebalancing date. Each date pays the half-spread
    on the change in position; the first date pays for entering the position.
    """
    a, f = _pair(actual, forecast)
    c = np.asarray(spreads, dtype=float)
    if c.shape != a.shape:
        raise Misaligned("spreads are not aligned with the forecasts")
    if np.any(c < 0):
        raise ValueError("spreads must be non-negative")
    ru = realized_utility(a, f, params).summands
    w = positions(f, params)
    turnover = np.abs(np.diff(w, prepend=0.0))
    net = ru - 100.0 * (c / 2.0) * turnover
    return LossSeries(float(net.mean()), net)


def csed(loss_model, loss_reference) -> np.ndarray:
    """Running sum of per-date loss differences (model minus reference)."""
    a = np.asarray(getattr(loss_model, "summands", loss_model), dtype=float)
    b = np.asarray(getattr(loss_reference, "summands", loss_reference), dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise Misaligned("loss series are not aligned")
    return np.cumsum(a - b)


# ------------------------------------------------------------------ MCS


@dataclass
class McsResult:
    models: list
    survivors: list
    pvalues: dict
    level: float
    eliminated: list = field(default_factory=list)

    def included(self, model) -> bool:
        return model in self.survivors


def moving_block_indices(T: int, block_length: int, reps: int, rng) -> np.ndarray:
    """``reps x T`` indices from overlapping blocks with uniform start points."""
    n_blocks = -(-T // block_length)
    starts = rng.integers(0, T - block_length + 1, size=(reps, n_blocks))
    idx = starts[:, :, None] + np.arange(block_length)
    return idx.reshape(reps, -1)[:, :T]


def mcs(losses, level: float = 0.95, reps: int = 1000, block_length: int | None = None,
        seed: int = 0, statistic: str = "max") -> McsResult:
    """Model confidence set by sequential elimination.

    ``losses`` is a ``T x k`` array or a mapping ``{model: loss series}``.
    ``statistic='max'`` uses the largest standardized deviation of a model's
    mean loss from the average of the surviving set; ``'range'`` uses the
    largest standardized pairwise difference. The null distribution comes
    from a moving-block bootstrap that is drawn once and reused at every step.
    MCS p-values are the running maximum of the step p-values; models whose
    p-value is at least ``1 - level`` survive.
    """
    if isinstance(losses, Mapping):
        names = list(losses)
        L = np.column_stack([np.asarray(losses[m], dtype=float) for m in names])
    else:
        L = np.asarray(losses, dtype=float)
        names = list(range(L.shape[1]))
    T, k = L.shape
    if k < 2:
        raise ValueError("the MCS needs at least two models")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    if block_length is None:
        block_length = max(1, math.ceil(T ** (1.0 / 3.0)))
    if T < 2 * block_length:
        raise ValueError(f"need at least {2 * block_length} observations for block length {block_length}")
    if statistic not in ("max", "range"):
        raise ValueError(f"unknown MCS statistic {statistic!r}")
    if np.all(L == L[:, :1]):
        warnings.warn("all loss differentials are identically zero; every model survives",
                      DegenerateLosses, stacklevel=2)
        return McsResult(names, list(names), {n: 1.0 for n in names}, level, [])
    rng = np.random.default_rng(seed)
    idx = moving_block_indices(T, block_length, reps, rng)
    means = L.mean(axis=0)
    # bootstrap means of each model, shape reps x k
    boot = np.stack([L[row].mean(axis=0) for row in idx])

    alive = list(range(k))
    pvals = {}
    order = []
    running = 0.0
    while len(alive) > 1:
        m = means[alive]
        b = boot[:, alive]
        if statistic == "max":
            d = m - m.mean()
            db = (b - b.mean(axis=1, keepdims=True)) - d
            var = np.mean(db**2, axis=0)
            t, tb = _standardize(d, db, var)
            stat = t.max()
            stat_b = tb.max(axis=1)
            worst = int(np.argmax(t))
        else:
            d = m[:, None] - m[None, :]
            db = (b[:, :, None] - b[:, None, :]) - d
            var = np.mean(db**2, axis=0)
            t, tb = _standardize(d, db, var)
            stat = np.abs(t).max()
            stat_b = np.abs(tb).reshape(reps, -1).max(axis=1)
            # eliminate the model with the largest standardized excess loss
            worst = int(np.argmax(t.max(axis=1)))
        p = float(np.mean(stat_b >= stat)) if stat > 0 else 1.0
        running = max(running, p)
        gone = alive.pop(worst)
        pvals[names[gone]] = running
        order.append(names[gone])
    pvals[names[alive[0]]] = 1.0
    alpha = 1.0 - level
    survivors = [n for n in names if pvals[n] >= alpha]
    return McsResult(names, survivors, {n: pvals[n] for n in names}, level, order)


def _standardize(d, db, var):
    with np.errstate(divide="ignore", invalid="ignore"):
        sd = np.sqrt(var)
        t = np.where(sd > 0, d / np.where(sd > 0, sd, 1.0), 0.0)
        tb = np.where(sd > 0, db / np.where(sd > 0, sd, 1.0), 0.0)
    return t, tb


# ------------------------------------------------------------ aggregation


def summarize(metrics: pd.DataFrame, metric_columns: Sequence[str] = ("mse", "qlike", "ru", "ru_tc"),
              model_order: Sequence[str] | None = None) -> pd.DataFrame:
    """Cross-asset mean and quantiles per (model, metric).

    ``metrics`` has one row per (asset, model). Output columns:
    ``model, metric, mean, q05, q25, q50, q75, q95``.
    """
    models = list(model_order) if model_order is not None else list(dict.fromkeys(metrics["model"]))
    rows = []
    for m in models:
        sub = metrics[metrics["model"] == m]
        for col in metric_columns:
            if col not in sub:
                continue
            v = sub[col].to_numpy(dtype=float)
            v = v[np.isfinite(v)]
            if v.size == 0:
                continue
            q = np.quantile(v, QUANTILES)
            rows.append({"model": m, "metric": col, "mean": float(v.mean()),
                         **{f"q{int(round(100 * p)):02d}": float(x) for p, x in zip(QUANTILES, q)}})
    return pd.DataFrame(rows, columns=["model", "metric", "mean", "q05", "q25", "q50", "q75", "q95"])


def inclusion_rates(mcs_table: pd.DataFrame) -> pd.DataFrame:
    """Share of assets whose MCS contains each model."""
    g = mcs_table.groupby("model", sort=False)["in_best_set"].mean()
    return g.rename("inclusion_rate").reset_index()
