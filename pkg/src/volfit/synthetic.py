"""Seeded HAR data-generating process for synthetic panels.

Each asset follows

    rv[t+1] = c + b_d rv[t] + b_w mean(rv[t-4:t+1]) + b_m mean(rv[t-21:t+1])
              + b_v F[t] + eps[t+1]

with Gaussian ``eps`` and a common AR(1) factor ``F`` that plays the role of
the VIX. The first ``BURN_IN`` simulated days are discarded.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from volfit.errors import NonStationarySpec
from volfit.market_data import PanelDataset, RvSeries, Split, TradingCalendar

BURN_IN = 200


@dataclass(frozen=True)
class DgpSpec:
    n_assets: int = 5
    n_days: int = 2000
    c: float = 0.1
    beta_d: float = 0.4
    beta_w: float = 0.3
    beta_m: float = 0.2
    beta_v: float = 0.0
    sigma_eps: float = 0.2
    factor_mean: float = 20.0
    factor_persistence: float = 0.98
    factor_sd: float = 1.0
    # cross-sectional sd of per-asset intercept shifts
    intercept_dispersion: float = 0.0
    # idiosyncratic AR(1) drift of each asset's intercept (off when level_sd == 0)
    level_persistence: float = 0.0
    level_sd: float = 0.0
    # slow AR(1) drift that moves weight between beta_d and beta_m, keeping their sum fixed
    weight_persistence: float = 0.0
    weight_sd: float = 0.0
    spread_level: float = 1e-3
    spread_noise: float = 0.2
    start_date: str = "2015-01-02"
    rng_seed: int = 0

    def fixed_point(self, factor: float | None = None) -> float:
        f = self.factor_mean if factor is None else factor
        return (self.c + self.beta_v * f) / (1.0 - self.beta_d - self.beta_w - self.beta_m)

    def to_dict(self) -> dict:
        return asdict(self)


def _check(spec: DgpSpec):
    if spec.beta_d + spec.beta_w + spec.beta_m >= 1.0:
        raise NonStationarySpec("beta_d + beta_w + beta_m must be < 1")
    if max(abs(spec.factor_persistence), abs(spec.level_persistence), abs(spec.weight_persistence)) >= 1.0:
        raise NonStationarySpec("factor and level persistence must lie in (-1, 1)")
    if min(spec.sigma_eps, spec.factor_sd, spec.spread_noise, spec.level_sd, spec.weight_sd) < 0:
        raise ValueError("standard deviations must be >= 0")
    if spec.n_days < 100:
        raise ValueError("n_days must be >= 100")
    if spec.n_assets < 1:
        raise ValueError("n_assets must be >= 1")


def business_days(start: str, n: int) -> np.ndarray:
    first = np.busday_offset(np.datetime64(start, "D"), 0, roll="forward")
    return np.busday_offset(first, np.arange(n), roll="forward")


def simulate_factor(spec: DgpSpec, n: int, rng) -> np.ndarray:
    f = np.empty(n)
    prev = spec.factor_mean
    shocks = rng.standard_normal(n) * spec.factor_sd
    for t in range(n):
        prev = spec.factor_mean + spec.factor_persistence * (prev - spec.factor_mean) + shocks[t]
        f[t] = prev
    return f


def _ar1(rng, n, persistence, sd):
    out = np.empty(n)
    prev = 0.0
    for t, z in enumerate(rng.standard_normal(n) * sd):
        prev = persistence * prev + z
        out[t] = prev
    return out


def simulate_har(spec: DgpSpec, factor: np.ndarray, rng, intercept_shift: float = 0.0) -> np.ndarray:
    """One asset's log-RV path, burn-in included, started at the fixed point."""
    n = factor.size
    eps = rng.standard_normal(n) * spec.sigma_eps
    c = np.full(n, spec.c + intercept_shift)
    if spec.level_sd > 0:
        c = c + _ar1(rng, n, spec.level_persistence, spec.level_sd)
    bd = np.full(n, spec.beta_d)
    bm = np.full(n, spec.beta_m)
    if spec.weight_sd > 0:
        # tanh keeps both loadings non-negative
        shift = min(spec.beta_d, spec.beta_m) * np.tanh(_ar1(rng, n, spec.weight_persistence, spec.weight_sd))
        bd, bm = bd + shift, bm - shift
    rv = np.empty(n + 21)
    rv[:22] = spec.fixed_point() + intercept_shift / (1.0 - spec.beta_d - spec.beta_w - spec.beta_m)
    for t in range(21, n + 20):
        w = rv[t - 4: t + 1].sum() / 5.0
        m = rv[t - 21: t + 1].sum() / 22.0
        rv[t + 1] = c[t - 21] + bd[t - 21] * rv[t] + spec.beta_w * w + bm[t - 21] * m \
            + spec.beta_v * factor[t - 21] + eps[t - 20]
    return rv[21:]


def simulate_panel(spec: DgpSpec, split_fractions=(0.64, 0.13, 0.23)) -> PanelDataset:
    """Synthetic panel with log-RV, VIX-like factor and bid-ask spreads.

    Stream 0 of the seed drives the factor; asset ``i`` uses stream ``i + 1``
    for its intercept shift, innovations and spreads.
    """
    _check(spec)
    total = BURN_IN + spec.n_days
    factor_rng = np.random.default_rng(np.random.SeedSequence(spec.rng_seed, spawn_key=(0,)))
    factor = simulate_factor(spec, total, factor_rng)
    dates = business_days(spec.start_date, spec.n_days)
    assets, spreads = [], {}
    for i in range(spec.n_assets):
        rng = np.random.default_rng(np.random.SeedSequence(spec.rng_seed, spawn_key=(i + 1,)))
        shift = rng.standard_normal() * spec.intercept_dispersion
        rv = simulate_har(spec, factor, rng, shift)[BURN_IN:]
        aid = f"A{i:03d}"
        assets.append(RvSeries(aid, dates, rv))
        noise = rng.standard_normal(spec.n_days) * spec.spread_noise
        spreads[aid] = spec.spread_level * np.exp(noise - 0.5 * spec.spread_noise**2)
    cal = TradingCalendar(dates)
    split = Split.from_fractions(cal, split_fractions) if split_fractions is not None else None
    return PanelDataset(assets, cal, factor[BURN_IN:].copy(), spreads, split)
