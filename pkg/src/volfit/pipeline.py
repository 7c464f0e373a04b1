"""End-to-end runs: load or simulate a panel, forecast every roster model, evaluate.

A run is fully described by a :class:`RunConfig`. Everything written lands in
``config.output_dir``; the JSON manifest records the config hash, seeds,
library versions and per-model failures.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import platform
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import pandas as pd

from volfit import __version__
from volfit.errors import VolfitError
from volfit.evaluation import (UtilityParams, csed, inclusion_rates, mcs, mse, qlike, realized_utility,
                               realized_utility_tc, summarize)
from volfit.features import DEFAULT_LAGS, FittingScheme, lag_features
from volfit.linear import ForecastSet, HarSpec, panel_har_features, rolling_forecast, rows_for_targets, \
    write_forecasts
from volfit.market_data import (DEFAULT_DELTA_MINUTES, IngestConfig, PanelDataset, Split, cached_ingest,
                                format_date, format_float, rolling_median_spread, sha256_file)
from volfit.neural import MlpSpec
from volfit.synthetic import DgpSpec, simulate_panel
from volfit.tuning import FAMILIES, DEFAULT_STRIDES, DEFAULT_TRAIN_WINDOWS, HyperGrid, SweepGrid, default_grid, \
    scheme_sweep, tune_model, write_sweep

logger = logging.getLogger(__name__)

HAR_IDS = tuple(HarSpec(v, e, p).model_id for p in (False, True) for e in ("ols", "wls") for v in (False, True))
ML_IDS = tuple(f"{f}{s}" for f in FAMILIES for s in ("", "-vix"))
ALL_MODELS = HAR_IDS + ML_IDS
REFERENCE_MODEL = "har-vix_ols"
MANIFEST_FILE = "manifest.json"


class ConfigError(VolfitError, ValueError):
    """The run configuration is invalid."""


def parse_model_id(model_id: str):
    """``('har', HarSpec)`` or ``('ml', family, vix)``."""
    if model_id.startswith("har"):
        try:
            return "har", HarSpec.from_id(model_id)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    family, _, suffix = model_id.partition("-")
    if family not in FAMILIES or suffix not in ("", "vix"):
        raise ConfigError(f"unknown model id {model_id!r}")
    return "ml", family, suffix == "vix"


@dataclass
class RunConfig:
    data: dict | None = None
    synthetic: dict | None = None
    split: dict = field(default_factory=lambda: {"fractions": [0.64, 0.13, 0.23]})
    roster: list = field(default_factory=lambda: ["har_ols"])
    har_scheme: dict = field(default_factory=lambda: {"style": "rolling", "train_window": 630, "stride": 1})
    lags: int = DEFAULT_LAGS
    grids: dict = field(default_factory=dict)
    mlp: dict = field(default_factory=dict)
    utility: dict = field(default_factory=dict)
    mcs: dict = field(default_factory=lambda: {"level": 0.95, "reps": 1000, "block_length": None,
                                               "statistic": "max"})
    sweep: dict = field(default_factory=dict)
    output_dir: str = "volfit-out"
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        if base_dir is not None:
            cfg._resolve_paths(Path(base_dir))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            with open(path, encoding="utf-8") as fh:
                d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(d, base_dir=path.parent)

    def _resolve_paths(self, base: Path):
        if self.data:
            for k in ("rv_path", "intraday_path", "vix_path", "spreads_path"):
                if self.data.get(k):
                    p = Path(self.data[k])
                    self.data[k] = str(p if p.is_absolute() else base / p)
        out = Path(self.output_dir)
        self.output_dir = str(out if out.is_absolute() else base / out)

    def validate(self):
        if (self.data is None) == (self.synthetic is None):
            raise ConfigError("set exactly one of 'data' and 'synthetic'")
        if self.data is not None:
            allowed = {"rv_path", "intraday_path", "vix_path", "spreads_path", "delta_minutes",
                       "max_missing_frac"}
            if set(self.data) - allowed:
                raise ConfigError(f"unknown data keys: {sorted(set(self.data) - allowed)}")
            for k in ("rv_path", "intraday_path", "vix_path", "spreads_path"):
                if self.data.get(k) and not Path(self.data[k]).exists():
                    raise ConfigError(f"{k} does not exist: {self.data[k]}")
        else:
            names = {f.name for f in fields(DgpSpec)}
            if set(self.synthetic) - names:
                raise ConfigError(f"unknown synthetic keys: {sorted(set(self.synthetic) - names)}")
        if not self.roster:
            raise ConfigError("roster must name at least one model")
        if len(set(self.roster)) != len(self.roster):
            raise ConfigError("roster contains duplicates")
        for m in self.roster:
            parse_model_id(m)
        if not ({"fractions"} >= set(self.split) or {"train_end", "validation_end", "test_end"} >= set(self.split)):
            raise ConfigError("split takes either 'fractions' or train_end/validation_end[/test_end]")
        for fam, g in self.grids.items():
            if fam not in FAMILIES:
                raise ConfigError(f"grid given for unknown family {fam!r}")
            if g != "default" and not (isinstance(g, dict) and g and all(isinstance(v, list) and v for v in g.values())):
                raise ConfigError(f"grid for {fam} must be 'default' or a mapping of non-empty lists")
        if self.lags < 1:
            raise ConfigError("lags must be >= 1")
        try:
            self.scheme()
            self.utility_params()
            MlpSpec(**self.mlp)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    # -- typed views

    def scheme(self) -> FittingScheme:
        return FittingScheme(**self.har_scheme)

    def utility_params(self) -> UtilityParams:
        return UtilityParams(**self.utility)

    def grid(self, family: str) -> HyperGrid:
        g = self.grids.get(family, "default")
        return default_grid(family) if g == "default" else HyperGrid.from_lists(family, **g)

    def sweep_grid(self) -> SweepGrid:
        s = dict(self.sweep)
        s.pop("model", None)
        return SweepGrid(styles=tuple(s.get("styles", ("rolling",))),
                         train_windows=tuple(s.get("train_windows", DEFAULT_TRAIN_WINDOWS)),
                         strides=tuple(s.get("strides", DEFAULT_STRIDES)))

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        """Digest of every setting that affects results (the output directory does not)."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def apply_reference_defaults(cfg: RunConfig) -> RunConfig:
    """Pin the reference settings: 5-minute bars, 630/1 rolling HAR, full grids, SR 0.40, gamma 2, 95% MCS."""
    if cfg.data is not None:
        cfg.data["delta_minutes"] = DEFAULT_DELTA_MINUTES
    cfg.har_scheme = {"style": "rolling", "train_window": 630, "stride": 1}
    cfg.grids = {f: "default" for f in FAMILIES}
    cfg.mlp = {}
    cfg.utility = {**cfg.utility, "sharpe_ratio": 0.40, "gamma": 2.0}
    cfg.mcs = {**cfg.mcs, "level": 0.95}
    cfg.validate()
    return cfg


def load_run_panel(cfg: RunConfig, workers: int = 1) -> PanelDataset:
    if cfg.synthetic is not None:
        panel = simulate_panel(DgpSpec(**cfg.synthetic), split_fractions=None)
    else:
        ic = IngestConfig(**cfg.data, workers=workers)
        panel = cached_ingest(ic, Path(cfg.output_dir) / "panel_cache")
    return panel.with_split(make_split(cfg, panel))


def make_split(cfg: RunConfig, panel: PanelDataset) -> Split:
    try:
        if "fractions" in cfg.split:
            return Split.from_fractions(panel.calendar, tuple(cfg.split["fractions"]))
        if "train_end" in cfg.split:
            return Split.from_dates(panel.calendar, cfg.split["train_end"], cfg.split["validation_end"],
                                    cfg.split.get("test_end"))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"invalid split: {exc}") from exc
    if panel.split is not None:
        return panel.split
    return Split.from_fractions(panel.calendar)


def derive_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=key).generate_state(1)[0])


# ---------------------------------------------------------------- forecasting


def har_test_forecasts(panel: PanelDataset, spec: HarSpec, scheme: FittingScheme, workers: int = 1) -> dict:
    """Rolling HAR forecasts for every target date in the test segment."""
    fms = panel_har_features(panel, spec.vix)
    test = panel.split.test
    first = next(iter(fms.values()))
    rows = rows_for_targets(first, panel.dates, test[0], test[1])
    return rolling_forecast(panel, spec, scheme, rows, workers=workers, features=fms)


def _segment_rows(fm, dates, seg):
    return rows_for_targets(fm, dates, seg[0], seg[1])


def ml_forecasts(panel: PanelDataset, family: str, vix: bool, cfg: RunConfig, asset_index: int,
                 workers: int = 1):
    """Tune on train/validation, forecast the test segment with the train-fit winner."""
    a = panel.assets[asset_index]
    fm = lag_features(a, cfg.lags, panel.vix if vix else None)
    sp = panel.split
    tr, va, te = (_segment_rows(fm, panel.dates, s) for s in (sp.train, sp.validation, sp.test))
    seed = derive_seed(cfg.seed, asset_index, FAMILIES.index(family), int(vix))
    res = tune_model(family, (fm.X[tr.start:tr.stop], fm.y[tr.start:tr.stop]),
                     (fm.X[va.start:va.stop], fm.y[va.start:va.stop]), cfg.grid(family), seed=seed,
                     mlp_options=cfg.mlp, workers=workers)
    rows = slice(te.start, te.stop)
    model_id = family + ("-vix" if vix else "")
    fs = ForecastSet(a.asset_id, model_id, panel.dates[fm.origins[rows] + 1], res.predict(fm.X[rows]),
                     fm.y[rows].copy())
    return fs, {"asset": a.asset_id, "model": model_id, "seed": seed, "best_index": res.best_index,
                "best_params": res.best_params, "validation_mse": float(res.scores[res.best_index])}


def forecast_roster(panel: PanelDataset, cfg: RunConfig, workers: int = 1):
    """``({model: {asset: ForecastSet}}, tuning records, failures)`` in roster order."""
    out, tuned, failures = {}, [], []
    scheme = cfg.scheme()
    for model_id in cfg.roster:
        kind = parse_model_id(model_id)
        try:
            if kind[0] == "har":
                with warnings.catch_warnings(record=True) as caught:
                    warnings.simplefilter("always")
                    sets = har_test_forecasts(panel, kind[1], scheme, workers)
                for w in caught:
                    logger.warning("%s: %s", model_id, w.message)
            else:
                _, family, vix = kind
                if vix and panel.vix is None:
                    raise ConfigError("model needs a VIX series but the panel has none")
                with ThreadPoolExecutor(max_workers=max(1, workers)) as ex:
                    res = list(ex.map(lambda i: ml_forecasts(panel, family, vix, cfg, i),
                                      range(len(panel.assets))))
                sets = {fs.asset_id: fs for fs, _ in res}
                tuned.extend(r for _, r in res)
            out[model_id] = sets
        except (VolfitError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
            logger.error("model %s failed: %s", model_id, exc)
            failures.append({"model": model_id, "error": type(exc).__name__, "message": str(exc)})
    return out, tuned, failures


# ----------------------------------------------------------------- evaluation


def _origin_spreads(panel: PanelDataset, asset_id: str, target_dates, window: int):
    if panel.spreads is None:
        return None
    smooth = rolling_median_spread(panel.spreads[asset_id], window)
    # trade at the close of the origin day, one trading day before the target
    return smooth[np.searchsorted(panel.dates, target_dates) - 1]


def evaluate(panel: PanelDataset, forecasts: dict, cfg: RunConfig):
    """Metric, MCS and CSED tables from ``{model: {asset: ForecastSet}}``."""
    params = cfg.utility_params()
    models = list(forecasts)
    metric_rows, se, ql = [], {}, {}
    for a in panel.asset_ids:
        for m in models:
            fs = forecasts[m][a]
            e, q = mse(fs.actual, fs.predictions), qlike(fs.actual, fs.predictions)
            ru = realized_utility(fs.actual, fs.predictions, params).mean
            spreads = _origin_spreads(panel, a, fs.dates, params.cost_window)
            ru_tc = (realized_utility_tc(fs.actual, fs.predictions, spreads, params).mean
                     if spreads is not None else float("nan"))
            metric_rows.append({"asset": a, "model": m, "mse": e.mean, "qlike": q.mean, "ru": ru, "ru_tc": ru_tc})
            se[a, m], ql[a, m] = e.summands, q.summands
    metrics = pd.DataFrame(metric_rows, columns=["asset", "model", "mse", "qlike", "ru", "ru_tc"])

    tables = {}
    mc = cfg.mcs
    for loss_name, loss in (("mse", se), ("qlike", ql)):
        rows = []
        for i, a in enumerate(panel.asset_ids):
            if len(models) < 2:
                rows += [{"asset": a, "model": m, "in_best_set": True, "p_value": 1.0} for m in models]
                continue
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                r = mcs({m: loss[a, m] for m in models}, level=mc.get("level", 0.95), reps=mc.get("reps", 1000),
                        block_length=mc.get("block_length"), seed=derive_seed(cfg.seed, 1000 + i),
                        statistic=mc.get("statistic", "max"))
            rows += [{"asset": a, "model": m, "in_best_set": r.included(m), "p_value": r.pvalues[m]} for m in models]
        tables[loss_name] = pd.DataFrame(rows, columns=["asset", "model", "in_best_set", "p_value"])

    ref = REFERENCE_MODEL if REFERENCE_MODEL in models else models[0]
    dates = forecasts[ref][panel.asset_ids[0]].dates
    csed_rows = []
    for m in models:
        diff = np.mean([csed(se[a, m], se[a, ref]) for a in panel.asset_ids], axis=0)
        csed_rows += [{"date": format_date(d), "model": m, "value": v} for d, v in zip(dates, diff)]
    csed_df = pd.DataFrame(csed_rows, columns=["date", "model", "value"])
    return metrics, tables, csed_df, ref


# --------------------------------------------------------------------- output


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return "" if not math.isfinite(v) else format_float(float(v))
    if isinstance(v, np.datetime64):
        return format_date(v)
    return str(v)


def write_table(df: pd.DataFrame, path) -> Path:
    """CSV with shortest round-trip floats, ``\\n`` line ends and empty cells for NaN."""
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(df.columns)
        for row in df.itertuples(index=False):
            w.writerow([_fmt(v) for v in row])
    return path


def versions() -> dict:
    import numba

    return {"volfit": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "pandas": pd.__version__, "numba": numba.__version__}


def _previous_manifest(out: Path):
    try:
        with open(out / MANIFEST_FILE, encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError):
        return None


def _finish(out: Path, cfg: RunConfig, command: str, written: list, extra: dict) -> dict:
    previous = _previous_manifest(out)
    manifest = {
        "command": command,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "versions": versions(),
        "defaults": {"mlp": asdict(MlpSpec(**cfg.mlp)), "utility": asdict(cfg.utility_params())},
        "outputs": {p.name: sha256_file(p) for p in written},
        **extra,
    }
    if previous and previous.get("config_hash") == manifest["config_hash"] and previous.get("command") == command:
        same = previous.get("outputs") == manifest["outputs"]
        manifest["reproduced_previous_run"] = same
        if same:
            logger.info("outputs reproduce the previous run with the same config hash")
        else:
            logger.warning("outputs differ from the previous run with the same config hash")
    with open(out / MANIFEST_FILE, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    return manifest


def run_backtest(cfg: RunConfig, workers: int = 1) -> dict:
    """Forecast, evaluate and write the report files; returns the manifest."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    panel = load_run_panel(cfg, workers)
    forecasts, tuned, failures = forecast_roster(panel, cfg, workers)
    extra = {"failures": failures, "tuning": tuned, "assets": panel.asset_ids,
             "split": panel.split.to_dict(), "succeeded": list(forecasts)}
    if not forecasts:
        _finish(out, cfg, "backtest", [], extra)
        return {**extra, "status": "all models failed"}
    metrics, mcs_tables, csed_df, ref = evaluate(panel, forecasts, cfg)
    summary = summarize(metrics, model_order=list(forecasts))
    incl = pd.concat([inclusion_rates(t).assign(loss=name) for name, t in mcs_tables.items()], ignore_index=True)
    incl = incl[["model", "loss", "inclusion_rate"]]
    fpath = out / "forecasts.csv"
    write_forecasts([forecasts[m][a] for m in forecasts for a in panel.asset_ids], fpath)
    written = [fpath,
               write_table(metrics, out / "metrics.csv"),
               write_table(summary, out / "summary.csv"),
               write_table(mcs_tables["mse"], out / "mcs.csv"),
               write_table(mcs_tables["qlike"], out / "mcs_qlike.csv"),
               write_table(incl, out / "mcs_summary.csv"),
               write_table(csed_df, out / "csed.csv")]
    return _finish(out, cfg, "backtest", written, {**extra, "csed_reference": ref, "status": "ok"})


def run_sweep(cfg: RunConfig, workers: int = 1) -> dict:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    panel = load_run_panel(cfg, workers)
    spec = HarSpec.from_id(cfg.sweep.get("model", "har_ols"))
    table = scheme_sweep(panel, spec, cfg.sweep_grid(), workers=workers)
    written = write_sweep(table, out)
    invalid = int(table["mean_rmse"].isna().sum())
    return _finish(out, cfg, "sweep", written, {"model": spec.model_id, "invalid_cells": invalid,
                                                 "status": "ok" if invalid < len(table) else "all cells failed"})


def run_tune(cfg: RunConfig, family: str, vix: bool = False, workers: int = 1) -> dict:
    """Tune one family for every asset; writes ``tuning.csv`` with the winners."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    panel = load_run_panel(cfg, workers)
    records, failures = [], []
    for i, a in enumerate(panel.asset_ids):
        try:
            records.append(ml_forecasts(panel, family, vix, cfg, i, workers)[1])
        except (VolfitError, ValueError, ArithmeticError) as exc:
            failures.append({"asset": a, "error": type(exc).__name__, "message": str(exc)})
    df = pd.DataFrame([{"asset": r["asset"], "model": r["model"], "best_index": r["best_index"],
                        "params": json.dumps(r["best_params"], sort_keys=True),
                        "validation_mse": r["validation_mse"]} for r in records],
                      columns=["asset", "model", "best_index", "params", "validation_mse"])
    path = write_table(df, out / "tuning.csv")
    return _finish(out, cfg, "tune", [path], {"family": family, "vix": vix, "failures": failures,
                                              "status": "ok" if records else "all models failed"})
