"""Daily log realized variance, input ingestion and the aligned panel.

Intraday log-returns are bucketed into ``delta_minutes`` intervals and the
daily log-RV is ``log(sum(r_i ** 2))`` over the intraday intervals of the day.
Overnight returns are never part of the sum. Everything downstream works on
:class:`PanelDataset`, which holds the per-asset log-RV series, the optional
VIX level and bid-ask spreads on one shared trading calendar.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from volfit.errors import AllZeroReturns, EmptyPanel, NonFiniteInput, ParseError

logger = logging.getLogger(__name__)

DEFAULT_DELTA_MINUTES = 5
# nine months of trading days (21 x 9)
NINE_MONTHS = 189
MANIFEST_NAME = "panel.json"
CACHE_FORMAT = 1


def _frozen(a, dtype=None):
    arr = np.array(a, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


def to_dates(values) -> np.ndarray:
    return np.asarray(values, dtype="datetime64[D]")


def format_date(d) -> str:
    return str(np.datetime64(d, "D"))


def format_float(x: float) -> str:
    # repr round-trips float64 exactly
    return repr(float(x))


@dataclass(frozen=True)
class IntradayDay:
    asset_id: str
    date: np.datetime64
    returns: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "returns", _frozen(self.returns, float))
        object.__setattr__(self, "date", np.datetime64(self.date, "D"))
        if self.returns.ndim != 1 or self.returns.size < 1:
            raise ValueError("an intraday day needs at least one return")


def compute_log_rv(day) -> float:
    """Log of the sum of squared intraday returns.

    ``day`` is an :class:`IntradayDay` or any 1-d sequence of log-returns.
    """
    r = day.returns if isinstance(day, IntradayDay) else np.asarray(day, dtype=float)
    if r.size == 0:
        raise AllZeroReturns("no intraday returns")
    if not np.all(np.isfinite(r)):
        raise NonFiniteInput("intraday returns contain NaN or infinity")
    total = float(np.sum(r * r))
    if total == 0.0:
        raise AllZeroReturns("all intraday returns are zero, log-RV undefined")
    return math.log(total)


@dataclass(frozen=True)
class TradingCalendar:
    dates: np.ndarray

    def __post_init__(self):
        d = _frozen(self.dates, "datetime64[D]")
        if d.size > 1 and not np.all(d[1:] > d[:-1]):
            raise ValueError("calendar dates must be strictly increasing")
        object.__setattr__(self, "dates", d)

    def __len__(self):
        return self.dates.size

    def index_of(self, d) -> int:
        d = np.datetime64(d, "D")
        i = int(np.searchsorted(self.dates, d))
        if i >= len(self) or self.dates[i] != d:
            raise KeyError(f"{d} is not a trading day in the calendar")
        return i

    def locate(self, d, side="left") -> int:
        """Insertion index of ``d`` (need not be a trading day)."""
        return int(np.searchsorted(self.dates, np.datetime64(d, "D"), side=side))


@dataclass(frozen=True)
class RvSeries:
    asset_id: str
    dates: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        d = _frozen(self.dates, "datetime64[D]")
        v = _frozen(self.values, float)
        if d.shape != v.shape or d.ndim != 1:
            raise ValueError(f"{self.asset_id}: dates and values must be equal-length 1-d arrays")
        if d.size > 1 and not np.all(d[1:] > d[:-1]):
            raise ValueError(f"{self.asset_id}: dates must be strictly increasing")
        if not np.all(np.isfinite(v)):
            raise NonFiniteInput(f"{self.asset_id}: log-RV values must be finite")
        object.__setattr__(self, "dates", d)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.size

    def restrict(self, dates: np.ndarray) -> "RvSeries":
        idx = np.searchsorted(self.dates, dates)
        return RvSeries(self.asset_id, dates, self.values[idx])


@dataclass(frozen=True)
class Split:
    """Three contiguous, ordered, inclusive date ranges."""

    train: tuple
    validation: tuple
    test: tuple

    def __post_init__(self):
        parts = [tuple(np.datetime64(x, "D") for x in p) for p in (self.train, self.validation, self.test)]
        for (a, b) in parts:
            if a > b:
                raise ValueError("split range start after end")
        if not (parts[0][1] < parts[1][0] and parts[1][1] < parts[2][0]):
            raise ValueError("split ranges must be disjoint and ordered")
        object.__setattr__(self, "train", parts[0])
        object.__setattr__(self, "validation", parts[1])
        object.__setattr__(self, "test", parts[2])

    @classmethod
    def from_fractions(cls, calendar: TradingCalendar, fractions=(0.64, 0.13, 0.23)) -> "Split":
        n = len(calendar)
        f = np.asarray(fractions, dtype=float)
        if f.size != 3 or np.any(f <= 0) or f.sum() > 1 + 1e-9:
            raise ValueError("fractions must be three positive numbers summing to at most 1")
        n_train = int(round(f[0] * n))
        n_val = int(round(f[1] * n))
        n_test = min(int(round(f[2] * n)), n - n_train - n_val)
        if min(n_train, n_val, n_test) < 1:
            raise ValueError("calendar too short for the requested split")
        d = calendar.dates
        return cls(
            (d[0], d[n_train - 1]),
            (d[n_train], d[n_train + n_val - 1]),
            (d[n_train + n_val], d[n_train + n_val + n_test - 1]),
        )

    @classmethod
    def from_dates(cls, calendar: TradingCalendar, train_end, validation_end, test_end=None) -> "Split":
        d = calendar.dates
        i1 = calendar.locate(train_end, "right")
        i2 = calendar.locate(validation_end, "right")
        i3 = len(calendar) if test_end is None else calendar.locate(test_end, "right")
        if not 0 < i1 < i2 < i3:
            raise ValueError("split dates do not carve three non-empty ranges out of the calendar")
        return cls((d[0], d[i1 - 1]), (d[i1], d[i2 - 1]), (d[i2], d[i3 - 1]))

    def segment(self, dates) -> np.ndarray:
        """0/1/2 for train/validation/test, -1 outside every range."""
        dates = to_dates(dates)
        out = np.full(dates.shape, -1, dtype=int)
        for k, (a, b) in enumerate((self.train, self.validation, self.test)):
            out[(dates >= a) & (dates <= b)] = k
        return out

    def to_dict(self):
        return {name: [format_date(a), format_date(b)] for name, (a, b) in
                zip(("train", "validation", "test"), (self.train, self.validation, self.test))}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["train"]), tuple(d["validation"]), tuple(d["test"]))


@dataclass(frozen=True)
class PanelDataset:
    assets: tuple
    calendar: TradingCalendar
    vix: np.ndarray | None = None
    spreads: Mapping[str, np.ndarray] | None = None
    split: Split | None = None
    dropped: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "assets", tuple(self.assets))
        n = len(self.calendar)
        for s in self.assets:
            if len(s) != n or not np.array_equal(s.dates, self.calendar.dates):
                raise ValueError(f"{s.asset_id}: series does not cover the panel calendar")
        if self.vix is not None:
            v = _frozen(self.vix, float)
            if v.shape != (n,):
                raise ValueError("vix must be aligned to the calendar")
            object.__setattr__(self, "vix", v)
        if self.spreads is not None:
            sp = {}
            for a in self.asset_ids:
                arr = _frozen(self.spreads[a], float)
                if arr.shape != (n,):
                    raise ValueError(f"{a}: spreads must be aligned to the calendar")
                sp[a] = arr
            object.__setattr__(self, "spreads", sp)
        if len(set(self.asset_ids)) != len(self.assets):
            raise ValueError("duplicate asset ids")

    @property
    def asset_ids(self) -> list[str]:
        return [s.asset_id for s in self.assets]

    @property
    def dates(self) -> np.ndarray:
        return self.calendar.dates

    def __len__(self):
        return len(self.calendar)

    def asset(self, asset_id: str) -> RvSeries:
        for s in self.assets:
            if s.asset_id == asset_id:
                return s
        raise KeyError(asset_id)

    def rv_matrix(self) -> np.ndarray:
        """Dates x assets array of log-RV."""
        return np.column_stack([s.values for s in self.assets])

    def with_split(self, split: Split) -> "PanelDataset":
        return PanelDataset(self.assets, self.calendar, self.vix, self.spreads, split, self.dropped)

    def subset(self, asset_ids: Sequence[str]) -> "PanelDataset":
        keep = [self.asset(a) for a in asset_ids]
        sp = None if self.spreads is None else {a: self.spreads[a] for a in asset_ids}
        return PanelDataset(keep, self.calendar, self.vix, sp, self.split, self.dropped)

    def equals(self, other: "PanelDataset") -> bool:
        """Bit-exact comparison of every array and the split."""
        if self.asset_ids != other.asset_ids or self.split != other.split:
            return False
        if not np.array_equal(self.dates, other.dates):
            return False
        if any(not np.array_equal(a.values, b.values) for a, b in zip(self.assets, other.assets)):
            return False
        if (self.vix is None) != (other.vix is None):
            return False
        if self.vix is not None and not np.array_equal(self.vix, other.vix):
            return False
        if (self.spreads is None) != (other.spreads is None):
            return False
        if self.spreads is not None:
            return all(np.array_equal(self.spreads[a], other.spreads[a]) for a in self.asset_ids)
        return True


# --------------------------------------------------------------------- parsing


def _read_rows(path, required: Sequence[str]):
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise ParseError(path, 0, f"cannot open file: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(path, 1, "file is empty") from None
        header = [h.strip() for h in header]
        missing = [c for c in required if c not in header]
        if missing:
            raise ParseError(path, 1, f"missing columns {missing}, got {header}")
        pos = [header.index(c) for c in required]
        for row in reader:
            line = reader.line_num
            if not row or all(not x.strip() for x in row):
                continue
            if len(row) != len(header):
                raise ParseError(path, line, f"expected {len(header)} fields, got {len(row)}")
            yield line, [row[p].strip() for p in pos]


def _parse_date(path, line, s):
    try:
        return np.datetime64(date.fromisoformat(s), "D")
    except ValueError:
        raise ParseError(path, line, f"bad ISO-8601 date {s!r}") from None


def _parse_float(path, line, s):
    try:
        x = float(s)
    except ValueError:
        raise ParseError(path, line, f"bad number {s!r}") from None
    if not math.isfinite(x):
        raise ParseError(path, line, f"non-finite value {s!r}")
    return x


def _parse_minutes(path, line, s):
    parts = s.split(":")
    try:
        if len(parts) not in (2, 3):
            raise ValueError
        h, m = int(parts[0]), int(parts[1])
        sec = float(parts[2]) if len(parts) == 3 else 0.0
    except ValueError:
        raise ParseError(path, line, f"bad time {s!r}") from None
    return h * 60 + m + sec / 60.0


def read_intraday_csv(path, delta_minutes: int = DEFAULT_DELTA_MINUTES) -> dict:
    """Parse an ``asset,date,time,log_return`` file into Δ-minute returns.

    Returns ``{asset: {date: returns}}``. Returns inside one Δ-minute bucket
    (by time of day) are summed, so finer bars aggregate to Δ-minute log-returns.
    """
    buckets = defaultdict(lambda: defaultdict(lambda: defaultdict(float)))
    n = 0
    for line, (asset, d, t, r) in _read_rows(path, ("asset", "date", "time", "log_return")):
        if not asset:
            raise ParseError(path, line, "empty asset id")
        day = _parse_date(path, line, d)
        minute = _parse_minutes(path, line, t)
        # a bar stamped at its close belongs to the interval ending there
        b = math.ceil(minute / delta_minutes - 1e-9)
        buckets[asset][day][b] += _parse_float(path, line, r)
        n += 1
    if n == 0:
        raise ParseError(path, 1, "no data rows")
    return {
        a: {d: np.array([v for _, v in sorted(bs.items())]) for d, bs in days.items()}
        for a, days in buckets.items()
    }


def _series_from_days(asset, days: Mapping) -> RvSeries:
    dates = sorted(days)
    values = []
    for d in dates:
        try:
            values.append(compute_log_rv(days[d]))
        except (AllZeroReturns, NonFiniteInput) as exc:
            raise type(exc)(f"{asset} {format_date(d)}: {exc}") from None
    return RvSeries(asset, to_dates(dates), np.array(values))


def rv_from_intraday(path, delta_minutes: int = DEFAULT_DELTA_MINUTES, workers: int = 1) -> list[RvSeries]:
    per_asset = read_intraday_csv(path, delta_minutes)
    names = sorted(per_asset)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as ex:
        return list(ex.map(lambda a: _series_from_days(a, per_asset[a]), names))


def read_daily_csv(path) -> dict | tuple:
    """Read ``date,value`` or ``asset,date,value``.

    Returns ``(dates, values)`` for the single-series layout and
    ``{asset: (dates, values)}`` for the long layout. A directory is read as
    one ``<asset>.csv`` (``date,value``) file per asset.
    """
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix == ".csv")
        if not files:
            raise ParseError(path, 0, "directory holds no .csv files")
        return {p.stem: read_daily_csv(p) for p in files}
    with open(path, newline="", encoding="utf-8") as fh:
        first = fh.readline()
    header = [h.strip() for h in first.strip().split(",")]
    if "asset" in header:
        out = defaultdict(dict)
        for line, (a, d, v) in _read_rows(path, ("asset", "date", "value")):
            day = _parse_date(path, line, d)
            if day in out[a]:
                raise ParseError(path, line, f"duplicate date {d} for {a}")
            out[a][day] = _parse_float(path, line, v)
        if not out:
            raise ParseError(path, 1, "no data rows")
        return {a: _sorted_pairs(m) for a, m in out.items()}
    rows = {}
    for line, (d, v) in _read_rows(path, ("date", "value")):
        day = _parse_date(path, line, d)
        if day in rows:
            raise ParseError(path, line, f"duplicate date {d}")
        rows[day] = _parse_float(path, line, v)
    if not rows:
        raise ParseError(path, 1, "no data rows")
    return _sorted_pairs(rows)


def _sorted_pairs(m):
    keys = sorted(m)
    return to_dates(keys), np.array([m[k] for k in keys], dtype=float)


# ------------------------------------------------------------------- ingestion


@dataclass
class IngestConfig:
    """Where the inputs live and how to align them.

    Exactly one of ``rv_path`` (precomputed log-RV, long layout or a directory
    of per-asset files) and ``intraday_path`` must be set.
    """

    rv_path: str | None = None
    intraday_path: str | None = None
    vix_path: str | None = None
    spreads_path: str | None = None
    delta_minutes: int = DEFAULT_DELTA_MINUTES
    max_missing_frac: float = 0.0
    split_fractions: tuple | None = None
    split_dates: dict | None = None
    workers: int = 1


def _align(series: Sequence[RvSeries], vix, spreads, max_missing_frac):
    union = np.unique(np.concatenate([s.dates for s in series]))
    dropped = {}
    kept = []
    for s in series:
        frac = 1.0 - len(s) / union.size
        if frac > max_missing_frac:
            dropped[s.asset_id] = frac
            logger.warning("dropping %s: missing %.2f%% of calendar dates", s.asset_id, 100 * frac)
        else:
            kept.append(s)
    if spreads is not None:
        for s in list(kept):
            if s.asset_id not in spreads:
                dropped[s.asset_id] = 1.0
                kept.remove(s)
                logger.warning("dropping %s: no spread series", s.asset_id)
    if not kept:
        raise EmptyPanel("no asset survived alignment")
    common = kept[0].dates
    for s in kept[1:]:
        common = np.intersect1d(common, s.dates)
    if vix is not None:
        common = np.intersect1d(common, vix[0])
    if spreads is not None:
        for s in kept:
            common = np.intersect1d(common, spreads[s.asset_id][0])
    if common.size == 0:
        raise EmptyPanel("assets share no common date")
    cal = TradingCalendar(common)
    assets = [s.restrict(common) for s in kept]
    vix_al = None if vix is None else vix[1][np.searchsorted(vix[0], common)]
    sp_al = None
    if spreads is not None:
        sp_al = {s.asset_id: spreads[s.asset_id][1][np.searchsorted(spreads[s.asset_id][0], common)]
                 for s in kept}
    return assets, cal, vix_al, sp_al, dropped


def ingest_panel(config: IngestConfig) -> PanelDataset:
    if (config.rv_path is None) == (config.intraday_path is None):
        raise ValueError("set exactly one of rv_path and intraday_path")
    if config.intraday_path is not None:
        series = rv_from_intraday(config.intraday_path, config.delta_minutes, config.workers)
    else:
        raw = read_daily_csv(config.rv_path)
        if isinstance(raw, tuple):
            raw = {Path(config.rv_path).stem: raw}
        series = [RvSeries(a, *raw[a]) for a in sorted(raw)]
    vix = None
    if config.vix_path is not None:
        vix = read_daily_csv(config.vix_path)
        if not isinstance(vix, tuple):
            raise ParseError(config.vix_path, 1, "vix file must use the date,value layout")
    spreads = None
    if config.spreads_path is not None:
        spreads = read_daily_csv(config.spreads_path)
        if isinstance(spreads, tuple):
            raise ParseError(config.spreads_path, 1, "spreads need an asset column or per-asset files")
    assets, cal, vix_al, sp_al, dropped = _align(series, vix, spreads, config.max_missing_frac)
    split = None
    if config.split_dates is not None:
        sd = config.split_dates
        if "train" in sd:
            split = Split.from_dict(sd)
        else:
            split = Split.from_dates(cal, sd["train_end"], sd["validation_end"], sd.get("test_end"))
    elif config.split_fractions is not None:
        split = Split.from_fractions(cal, config.split_fractions)
    return PanelDataset(assets, cal, vix_al, sp_al, split, dropped)


def rolling_median_spread(spreads, window: int = NINE_MONTHS):
    """Trailing median over the last ``min(window, available)`` observations.

    Accepts a 1-d array or a mapping of per-asset arrays; returns the same shape.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    if isinstance(spreads, Mapping):
        return {k: rolling_median_spread(v, window) for k, v in spreads.items()}
    s = pd.Series(np.asarray(spreads, dtype=float))
    return s.rolling(window, min_periods=1).median().to_numpy()


# ---------------------------------------------------------------- disk layout


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_series(path: Path, dates, values):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "value"])
        for d, v in zip(dates, values):
            w.writerow([format_date(d), format_float(v)])


def write_rv_long(series: Iterable[RvSeries], path) -> None:
    """Long ``asset,date,value`` CSV of log-RV."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["asset", "date", "value"])
        for s in series:
            for d, v in zip(s.dates, s.values):
                w.writerow([s.asset_id, format_date(d), format_float(v)])


def write_panel(panel: PanelDataset, directory, source_key: str | None = None) -> Path:
    """Canonical cache: ``rv/<asset>.csv``, ``vix.csv``, ``spreads/<asset>.csv``
    and a ``panel.json`` manifest with SHA-256 of every file."""
    directory = Path(directory)
    (directory / "rv").mkdir(parents=True, exist_ok=True)
    files = {}
    for s in panel.assets:
        p = directory / "rv" / f"{s.asset_id}.csv"
        _write_series(p, s.dates, s.values)
        files[f"rv/{s.asset_id}.csv"] = sha256_file(p)
    if panel.vix is not None:
        p = directory / "vix.csv"
        _write_series(p, panel.dates, panel.vix)
        files["vix.csv"] = sha256_file(p)
    if panel.spreads is not None:
        (directory / "spreads").mkdir(exist_ok=True)
        for a in panel.asset_ids:
            p = directory / "spreads" / f"{a}.csv"
            _write_series(p, panel.dates, panel.spreads[a])
            files[f"spreads/{a}.csv"] = sha256_file(p)
    manifest = {
        "format": CACHE_FORMAT,
        "assets": panel.asset_ids,
        "calendar": {"start": format_date(panel.dates[0]), "end": format_date(panel.dates[-1]),
                     "n_dates": len(panel)},
        "split": None if panel.split is None else panel.split.to_dict(),
        "dropped": dict(panel.dropped),
        "files": files,
        "source_key": source_key,
    }
    with open(directory / MANIFEST_NAME, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return directory / MANIFEST_NAME


def read_manifest(directory) -> dict:
    with open(Path(directory) / MANIFEST_NAME, encoding="utf-8") as fh:
        return json.load(fh)


def load_panel(directory, verify: bool = True) -> PanelDataset:
    directory = Path(directory)
    m = read_manifest(directory)
    if verify:
        for rel, digest in m["files"].items():
            if sha256_file(directory / rel) != digest:
                raise ParseError(directory / rel, 0, "content hash does not match the manifest")
    cfg = IngestConfig(
        rv_path=str(directory / "rv"),
        vix_path=str(directory / "vix.csv") if "vix.csv" in m["files"] else None,
        spreads_path=str(directory / "spreads") if (directory / "spreads").is_dir() else None,
        split_dates=m["split"],
    )
    panel = ingest_panel(cfg)
    if panel.asset_ids != m["assets"]:
        # directory listing sorts by name; restore manifest order
        panel = panel.subset(m["assets"])
    return PanelDataset(panel.assets, panel.calendar, panel.vix, panel.spreads, panel.split, m.get("dropped", {}))


def source_key(config: IngestConfig) -> str:
    """Hash of the ingestion inputs and settings, used as the cache key."""
    h = hashlib.sha256()
    cfg = {k: v for k, v in vars(config).items() if k != "workers"}
    h.update(json.dumps(cfg, sort_keys=True, default=str).encode())
    for key in ("rv_path", "intraday_path", "vix_path", "spreads_path"):
        p = getattr(config, key)
        if p is None:
            continue
        p = Path(p)
        paths = sorted(p.rglob("*.csv")) if p.is_dir() else [p]
        for f in paths:
            h.update(str(f.name).encode())
            h.update(sha256_file(f).encode())
    return h.hexdigest()


def cached_ingest(config: IngestConfig, cache_dir) -> PanelDataset:
    """Ingest once; later calls with unchanged inputs load the cached panel."""
    key = source_key(config)
    cache_dir = Path(cache_dir)
    if (cache_dir / MANIFEST_NAME).exists():
        try:
            if read_manifest(cache_dir).get("source_key") == key:
                logger.info("panel cache hit in %s", cache_dir)
                return load_panel(cache_dir)
        except (ParseError, OSError, ValueError, KeyError):
            logger.warning("panel cache in %s is unreadable, re-ingesting", cache_dir)
    panel = ingest_panel(config)
    write_panel(panel, cache_dir, source_key=key)
    return panel


def env_workers(default: int | None = None) -> int:
    v = os.environ.get("VOLFIT_THREADS")
    if v:
        return max(1, int(v))
    return default if default is not None else (os.cpu_count() or 1)
