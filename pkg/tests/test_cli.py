import json

import numpy as np
import pandas as pd

from volfit.cli import main
from volfit.pipeline import ALL_MODELS

SMALL_GRIDS = {
    "lasso": {"lam": [0.1, 0.01]},
    "rf": {"n_trees": [5], "min_samples_leaf": [10], "max_features": ["third"]},
    "gbt": {"depth": [1], "n_trees": [10], "learning_rate": [0.1]},
    "ffnn": {"architecture": [[4]], "lam": [0.0]},
}


def write_config(tmp_path, name="cfg.json", **over):
    cfg = {"synthetic": {"n_assets": 2, "n_days": 500, "rng_seed": 4},
           "har_scheme": {"style": "rolling", "train_window": 200, "stride": 1},
           "mcs": {"level": 0.9, "reps": 100, "block_length": None, "statistic": "max"},
           "output_dir": "out"}
    cfg.update(over)
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


def bars_file(tmp_path):
    rng = np.random.default_rng(0)
    lines = ["asset,date,time,log_return"]
    for day in ("2021-03-01", "2021-03-02"):
        for k in range(1, 61):
            h, m = divmod(9 * 60 + 30 + k, 60)
            lines.append(f"AAA,{day},{h:02d}:{m:02d},{0.001 * rng.standard_normal():.6f}")
    p = tmp_path / "bars.csv"
    p.write_text("\n".join(lines) + "\n")
    return p


def test_rv_command(tmp_path, caplog):
    bars = bars_file(tmp_path)
    out = tmp_path / "rv.csv"
    assert main(["rv", str(bars), "-o", str(out)]) == 0
    df = pd.read_csv(out)
    assert list(df.columns) == ["asset", "date", "value"] and len(df) == 2
    before = out.stat().st_mtime_ns
    caplog.set_level("INFO", logger="volfit")
    assert main(["rv", str(bars), "-o", str(out)]) == 0
    assert "cache hit" in caplog.text
    assert out.stat().st_mtime_ns == before


def test_rv_empty_file_is_input_error(tmp_path, capsys):
    p = tmp_path / "empty.csv"
    p.write_text("")
    assert main(["rv", str(p), "-o", str(tmp_path / "x.csv")]) == 2
    assert "empty" in capsys.readouterr().err


def test_missing_file_is_input_error(tmp_path):
    assert main(["rv", str(tmp_path / "nope.csv"), "-o", str(tmp_path / "x.csv")]) == 2


def test_bad_config_is_input_error(tmp_path, capsys):
    p = write_config(tmp_path, roster=["har_ols", "no_such_model"])
    assert main(["backtest", str(p)]) == 2
    assert "no_such_model" in capsys.readouterr().err
    p.write_text("{not json")
    assert main(["backtest", str(p)]) == 2
    p.write_text(json.dumps({"synthetic": {}, "colour": "red"}))
    assert main(["backtest", str(p)]) == 2
    assert not (tmp_path / "out").exists()


def test_simulate(tmp_path):
    p = write_config(tmp_path)
    assert main(["simulate", str(p)]) == 0
    out = tmp_path / "out"
    assert {"panel", "rv.csv", "vix.csv", "spreads.csv", "dgp.json"} <= {f.name for f in out.iterdir()}
    assert len(pd.read_csv(out / "rv.csv")) == 2 * 500
    assert json.loads((out / "dgp.json").read_text())["rng_seed"] == 4


def test_har_only_backtest(tmp_path):
    p = write_config(tmp_path)
    assert main(["backtest", str(p)]) == 0
    out = tmp_path / "out"
    m = pd.read_csv(out / "metrics.csv")
    assert len(m) == 2 and set(m.model) == {"har_ols"}
    assert {"mse", "qlike", "ru", "ru_tc"} <= set(m.columns)
    f = pd.read_csv(out / "forecasts.csv")
    assert list(f.columns) == ["asset", "date", "model_id", "prediction"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "ok" and manifest["seed"] == 0
    assert set(manifest["outputs"]) >= {"metrics.csv", "summary.csv", "mcs.csv", "csed.csv"}


def test_full_roster_layout(tmp_path):
    p = write_config(tmp_path, synthetic={"n_assets": 5, "n_days": 500, "rng_seed": 6},
                     roster=list(ALL_MODELS), grids=SMALL_GRIDS, lags=10, mlp={"epochs": 5})
    assert main(["backtest", str(p), "--workers", "2"]) == 0
    out = tmp_path / "out"
    s = pd.read_csv(out / "summary.csv")
    assert list(s.columns) == ["model", "metric", "mean", "q05", "q25", "q50", "q75", "q95"]
    assert list(dict.fromkeys(s.model)) == list(ALL_MODELS)
    assert len(s) == 16 * 4
    assert np.all(s.q05 <= s.q50) and np.all(s.q50 <= s.q95)
    m = pd.read_csv(out / "metrics.csv")
    assert len(m) == 16 * 5
    mcs = pd.read_csv(out / "mcs.csv")
    assert len(mcs) == 16 * 5 and mcs.groupby("asset").in_best_set.any().all()
    inc = pd.read_csv(out / "mcs_summary.csv")
    assert set(inc.loss) == {"mse", "qlike"} and inc.inclusion_rate.between(0, 1).all()
    c = pd.read_csv(out / "csed.csv")
    assert set(c.model) == set(ALL_MODELS)
    assert (c[c.model == "har-vix_ols"].value == 0).all()


def test_identical_config_identical_outputs(tmp_path):
    a = write_config(tmp_path, name="a.json", output_dir="a", roster=["har_ols", "har-vix_wls", "gbt"],
                     grids=SMALL_GRIDS, lags=10)
    b = write_config(tmp_path, name="b.json", output_dir="b", roster=["har_ols", "har-vix_wls", "gbt"],
                     grids=SMALL_GRIDS, lags=10)
    assert main(["backtest", str(a), "--workers", "1"]) == 0
    assert main(["backtest", str(b), "--workers", "3"]) == 0
    for f in sorted((tmp_path / "a").glob("*.csv")):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes(), f.name
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert ma["config_hash"] == mb["config_hash"] and ma["outputs"] == mb["outputs"]


def test_rerun_reports_reproduction(tmp_path):
    p = write_config(tmp_path)
    assert main(["backtest", str(p)]) == 0
    assert main(["backtest", str(p)]) == 0
    assert json.loads((tmp_path / "out" / "manifest.json").read_text())["reproduced_previous_run"] is True


def test_all_models_failed_exit_code(tmp_path):
    p = write_config(tmp_path, har_scheme={"style": "rolling", "train_window": 5000, "stride": 1})
    assert main(["backtest", str(p)]) == 3
    m = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert m["failures"][0]["model"] == "har_ols"


def test_writes_stay_in_output_dir(tmp_path):
    p = write_config(tmp_path)
    before = {q for q in tmp_path.rglob("*")}
    assert main(["backtest", str(p), "--output-dir", str(tmp_path / "elsewhere")]) == 0
    new = {q for q in tmp_path.rglob("*")} - before
    assert new and all(tmp_path / "elsewhere" in q.parents or q == tmp_path / "elsewhere" for q in new)


def test_sweep_command(tmp_path):
    p = write_config(tmp_path, sweep={"styles": ["rolling", "expanding"], "train_windows": [63, 126],
                                      "strides": [1, 5]})
    assert main(["sweep", str(p)]) == 0
    h = pd.read_csv(tmp_path / "out" / "heatmap.csv")
    assert len(h) == 8 and h.mean_rmse.notna().all()
    assert (tmp_path / "out" / "heatmap_expanding.matrix").exists()


def test_tune_command(tmp_path):
    p = write_config(tmp_path, grids=SMALL_GRIDS, lags=10)
    assert main(["tune", str(p), "--family", "lasso", "--vix"]) == 0
    t = pd.read_csv(tmp_path / "out" / "tuning.csv")
    assert len(t) == 2 and set(t.model) == {"lasso-vix"}
    assert all(json.loads(x)["lam"] in (0.1, 0.01) for x in t.params)


def test_mcs_command(tmp_path):
    rng = np.random.default_rng(1)
    rows = []
    for asset in ("A", "B"):
        for t in range(300):
            base = rng.standard_normal() ** 2
            rows += [(asset, f"d{t:04d}", "good", base), (asset, f"d{t:04d}", "bad", base + 1.0)]
    src = tmp_path / "losses.csv"
    pd.DataFrame(rows, columns=["asset", "date", "model", "loss"]).to_csv(src, index=False)
    out = tmp_path / "mcs_out.csv"
    assert main(["mcs", str(src), "-o", str(out), "--reps", "200", "--seed", "3"]) == 0
    r = pd.read_csv(out)
    kept = r[r.in_best_set]
    assert set(kept.model) == {"good"} and len(kept) == 2


def test_volfit_threads_env(monkeypatch):
    from volfit.cli import build_parser
    from volfit.market_data import env_workers
    monkeypatch.setenv("VOLFIT_THREADS", "2")
    assert env_workers() == 2
    assert build_parser().parse_args(["sweep", "c.json"]).workers is None
