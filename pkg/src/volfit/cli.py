"""``volfit`` command line.

Exit codes: 0 success, 2 input error, 3 every model failed. ``VOLFIT_THREADS``
overrides the worker count when ``--workers`` is not given.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import pandas as pd

from volfit.errors import VolfitError
from volfit.evaluation import mcs
from volfit.market_data import DEFAULT_DELTA_MINUTES, env_workers, rv_from_intraday, sha256_file, \
    write_panel, write_rv_long
from volfit.pipeline import (ConfigError, RunConfig, apply_reference_defaults, load_run_panel, run_backtest, run_sweep,
                             run_tune, write_table)
from volfit.synthetic import DgpSpec

logger = logging.getLogger("volfit")

EXIT_OK, EXIT_INPUT, EXIT_FAILED = 0, 2, 3


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if getattr(args, "paper_defaults", False):
        apply_reference_defaults(cfg)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.output_dir is not None:
        cfg.output_dir = str(Path(args.output_dir).resolve())
    return cfg


def cmd_rv(args) -> int:
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    src = sha256_file(args.bars)
    stamp = out.with_name(out.name + ".sha256")
    key = f"{src} delta={args.delta}\n"
    if out.exists() and stamp.exists() and stamp.read_text() == key:
        logger.info("cache hit: %s is up to date for %s", out, args.bars)
        return EXIT_OK
    series = rv_from_intraday(args.bars, args.delta, args.workers)
    write_rv_long(series, out)
    stamp.write_text(key)
    logger.info("wrote %d assets to %s", len(series), out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _config(args)
    if cfg.synthetic is None:
        raise ConfigError("simulate needs a 'synthetic' section")
    out = Path(cfg.output_dir)
    panel = load_run_panel(cfg)
    write_panel(panel, out / "panel")
    write_rv_long(panel.assets, out / "rv.csv")
    rows = [{"date": d, "value": v} for d, v in zip(panel.dates, panel.vix)]
    write_table(pd.DataFrame(rows, columns=["date", "value"]), out / "vix.csv")
    rows = [{"asset": a, "date": d, "value": v} for a in panel.asset_ids for d, v in zip(panel.dates, panel.spreads[a])]
    write_table(pd.DataFrame(rows, columns=["asset", "date", "value"]), out / "spreads.csv")
    with open(out / "dgp.json", "w", encoding="utf-8") as fh:
        json.dump(DgpSpec(**cfg.synthetic).to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    logger.info("simulated %d assets x %d days into %s", len(panel.assets), len(panel), out)
    return EXIT_OK


def cmd_backtest(args) -> int:
    m = run_backtest(_config(args), args.workers)
    for f in m.get("failures", []):
        logger.warning("model %s failed (%s): %s", f["model"], f["error"], f["message"])
    return EXIT_OK if m.get("status") == "ok" else EXIT_FAILED


def cmd_sweep(args) -> int:
    m = run_sweep(_config(args), args.workers)
    return EXIT_OK if m["status"] == "ok" else EXIT_FAILED


def cmd_tune(args) -> int:
    m = run_tune(_config(args), args.family, args.vix, args.workers)
    return EXIT_OK if m["status"] == "ok" else EXIT_FAILED


def cmd_mcs(args) -> int:
    """Per-asset MCS from a long ``asset,date,model,loss`` file."""
    try:
        df = pd.read_csv(args.losses, dtype={"asset": str, "model": str, "date": str})
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise ConfigError(f"{args.losses}: {exc}") from exc
    missing = {"asset", "date", "model", "loss"} - set(df.columns)
    if missing:
        raise ConfigError(f"{args.losses}: missing columns {sorted(missing)}")
    rows = []
    for i, (asset, g) in enumerate(df.groupby("asset", sort=False)):
        wide = g.pivot(index="date", columns="model", values="loss").sort_index()
        wide = wide[list(dict.fromkeys(g["model"]))]
        if wide.isna().any().any():
            raise ConfigError(f"{args.losses}: models of asset {asset} do not share dates")
        r = mcs({m: wide[m].to_numpy() for m in wide.columns}, level=args.level, reps=args.reps,
                block_length=args.block_length, seed=(args.seed or 0) + i, statistic=args.statistic)
        rows += [{"asset": asset, "model": m, "in_best_set": r.included(m), "p_value": r.pvalues[m]}
                 for m in wide.columns]
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_table(pd.DataFrame(rows, columns=["asset", "model", "in_best_set", "p_value"]), out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="volfit", description="Realized-volatility forecasting runs.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("config", help="JSON run configuration")
            sp.add_argument("--output-dir", help="override the configured output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int, help="worker threads (default: VOLFIT_THREADS or all cores)")

    sp = sub.add_parser("rv", help="daily log-RV from intraday returns")
    sp.add_argument("bars", help="CSV with asset,date,time,log_return")
    sp.add_argument("-o", "--output", required=True)
    sp.add_argument("--delta", type=int, default=DEFAULT_DELTA_MINUTES, help="sampling interval in minutes")
    common(sp, config=False)
    sp.set_defaults(func=cmd_rv)

    sp = sub.add_parser("simulate", help="write a synthetic panel")
    common(sp)
    sp.set_defaults(func=cmd_simulate)

    for name, func, text in (("backtest", cmd_backtest, "forecast and evaluate the model roster"),
                             ("sweep", cmd_sweep, "fitting-scheme RMSE heatmap"),
                             ("tune", cmd_tune, "per-asset hyperparameter search")):
        sp = sub.add_parser(name, help=text)
        common(sp)
        sp.add_argument("--paper-defaults", action="store_true",
                        help="pin 5-minute bars, 630/1 rolling HAR, full grids, SR 0.40, gamma 2, 95%% MCS")
        if name == "tune":
            sp.add_argument("--family", required=True, choices=("lasso", "rf", "gbt", "ffnn"))
            sp.add_argument("--vix", action="store_true")
        sp.set_defaults(func=func)

    sp = sub.add_parser("mcs", help="model confidence set from a long loss file")
    sp.add_argument("losses")
    sp.add_argument("-o", "--output", required=True)
    sp.add_argument("--level", type=float, default=0.95)
    sp.add_argument("--reps", type=int, default=1000)
    sp.add_argument("--block-length", type=int)
    sp.add_argument("--statistic", choices=("max", "range"), default="max")
    common(sp, config=False)
    sp.set_defaults(func=cmd_mcs)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers is None:
        args.workers = env_workers()
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"volfit: error: {exc.filename}: file not found", file=sys.stderr)
        return EXIT_INPUT
    except (VolfitError, ValueError, KeyError) as exc:
        print(f"volfit: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
