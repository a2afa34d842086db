"""Market panels: CSV ingestion, seeded synthetic generation and return targets."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .evaluator import evaluate, max_lookback
from .expr import Node
from .metrics import zscore_daily

log = logging.getLogger(__name__)

FEATURES = ("open", "high", "low", "close", "volume", "vwap")
CSV_COLUMNS = ("date", "symbol") + FEATURES


class DataError(ValueError):
    pass


class SchemaError(DataError):
    pass


class DuplicateRow(DataError):
    pass


class NonNumericCell(DataError):
    pass


class MissingData(DataError):
    pass


class DegenerateConfig(DataError):
    pass


class HorizonTooLarge(DataError):
    pass


@dataclass(frozen=True, eq=False)
class Panel:
    assets: tuple[str, ...]
    features: tuple[str, ...]
    dates: pd.DatetimeIndex
    data: np.ndarray  # (assets, features, days)
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    @property
    def n_assets(self) -> int:
        return len(self.assets)

    @property
    def n_days(self) -> int:
        return len(self.dates)

    def feature(self, name: str) -> np.ndarray:
        """(days, assets) view of one feature."""
        arr = self._cache.get(name)
        if arr is None:
            j = self.features.index(name)
            arr = np.ascontiguousarray(self.data[:, j, :].T)
            arr.flags.writeable = False
            self._cache[name] = arr
        return arr

    def day_range(self, start: str | None, end: str | None) -> range:
        """Indices of days with ``start <= date < end`` (either bound optional)."""
        lo = 0 if start is None else int(self.dates.searchsorted(pd.Timestamp(start), "left"))
        hi = self.n_days if end is None else int(self.dates.searchsorted(pd.Timestamp(end), "left"))
        return range(lo, hi)

    def equals(self, other: "Panel", atol: float = 0.0) -> bool:
        return (self.assets == other.assets and self.features == other.features
                and self.dates.equals(other.dates) and self.data.shape == other.data.shape
                and bool(np.allclose(self.data, other.data, rtol=0.0, atol=atol)))


@dataclass(frozen=True, eq=False)
class TargetMatrix:
    values: np.ndarray  # (days, assets); NaN where unavailable
    horizon: int = 5


def check_prices(panel: Panel) -> list[str]:
    """Return human-readable violations of volume/OHLC ordering."""
    f = {name: panel.data[:, j, :] for j, name in enumerate(panel.features)}
    problems = []
    tol = 1e-9
    if (f["volume"] < 0).any():
        problems.append("negative volume")
    hi_body = np.maximum(f["open"], f["close"])
    lo_body = np.minimum(f["open"], f["close"])
    if (f["high"] < hi_body - tol * np.abs(hi_body)).any():
        problems.append("high below max(open, close)")
    if (f["low"] > lo_body + tol * np.abs(lo_body)).any():
        problems.append("low above min(open, close)")
    return problems


def load_panel(path: str | Path, missing: str = "reject") -> Panel:
    """Read a long-format CSV (date,symbol,open,high,low,close,volume,vwap).

    ``missing`` is ``"reject"`` (any gap raises) or ``"drop"`` (assets with
    gaps are removed).
    """
    df = pd.read_csv(path, dtype={"symbol": str})
    absent = [c for c in CSV_COLUMNS if c not in df.columns]
    if absent:
        raise SchemaError(f"missing columns: {', '.join(absent)}")
    for col in FEATURES:
        num = pd.to_numeric(df[col], errors="coerce")
        bad = num.isna() & df[col].notna()
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise NonNumericCell(f"column {col!r}, row {row + 2}: {df[col].iloc[row]!r}")
        df[col] = num.astype(float)
    try:
        df["date"] = pd.to_datetime(df["date"], format="ISO8601")
    except (ValueError, TypeError) as exc:
        raise SchemaError(f"bad date: {exc}") from None
    dup = df.duplicated(["date", "symbol"])
    if dup.any():
        r = df[dup].iloc[0]
        raise DuplicateRow(f"{r['date'].date()} {r['symbol']}")

    wide = df.set_index(["date", "symbol"])[list(FEATURES)].unstack("symbol").sort_index()
    gaps = wide.isna().any(axis=0).groupby(level="symbol").any()
    if gaps.any():
        bad_assets = sorted(gaps[gaps].index)
        if missing != "drop":
            raise MissingData(f"gaps for {', '.join(bad_assets)}")
        log.warning("dropping assets with gaps: %s", ", ".join(bad_assets))
        wide = wide.drop(columns=bad_assets, level="symbol")
    assets = tuple(sorted(wide.columns.get_level_values("symbol").unique()))
    if not assets:
        raise MissingData("no complete assets")
    data = np.stack([wide[f][list(assets)].to_numpy(dtype=float).T for f in FEATURES], axis=1)
    panel = Panel(assets, FEATURES, pd.DatetimeIndex(wide.index), data)
    problems = check_prices(panel)
    if problems:
        raise DataError("; ".join(problems))
    return panel


def write_panel_csv(panel: Panel, path: str | Path) -> None:
    rows = []
    for l, day in enumerate(panel.dates):
        d = day.strftime("%Y-%m-%d")
        for i, sym in enumerate(panel.assets):
            rows.append([d, sym] + [repr(float(v)) for v in panel.data[i, :, l]])
    pd.DataFrame(rows, columns=["date", "symbol", *panel.features]).to_csv(path, index=False)


def write_targets_csv(panel: Panel, targets: TargetMatrix, path: str | Path) -> None:
    rows = []
    for l, day in enumerate(panel.dates):
        d = day.strftime("%Y-%m-%d")
        for i, sym in enumerate(panel.assets):
            v = targets.values[l, i]
            rows.append([d, sym, repr(float(v)) if np.isfinite(v) else ""])
    pd.DataFrame(rows, columns=["date", "symbol", "target"]).to_csv(path, index=False)


def load_targets(path: str | Path, panel: Panel, horizon: int = 5) -> TargetMatrix:
    df = pd.read_csv(path, dtype={"symbol": str})
    if not {"date", "symbol", "target"} <= set(df.columns):
        raise SchemaError("targets file needs date,symbol,target")
    df["date"] = pd.to_datetime(df["date"], format="ISO8601")
    wide = df.pivot(index="date", columns="symbol", values="target")
    wide = wide.reindex(index=panel.dates, columns=list(panel.assets))
    return TargetMatrix(wide.to_numpy(dtype=float), horizon)


def forward_returns(panel: Panel, horizon: int = 5) -> TargetMatrix:
    """Simple ``horizon``-day forward return on close; the last days are NaN."""
    if horizon < 1:
        raise HorizonTooLarge(f"horizon must be >= 1, got {horizon}")
    if horizon >= panel.n_days:
        raise HorizonTooLarge(f"horizon {horizon} >= {panel.n_days} days")
    close = panel.feature("close")
    out = np.full(close.shape, np.nan)
    out[:-horizon] = close[horizon:] / close[:-horizon] - 1.0
    return TargetMatrix(out, horizon)


def synth_panel(seed: int, n: int, L: int, planted: Node | None = None, noise_std: float = 1.0,
                horizon: int = 5, start: str = "2016-01-01") -> tuple[Panel, TargetMatrix]:
    """Geometric random-walk OHLCV panel and its targets.

    Without ``planted`` the targets are forward returns.  With it, targets are
    the planted factor's daily z-score plus Gaussian noise of ``noise_std``,
    NaN where the factor lacks history.
    """
    headroom = max_lookback(planted) if planted is not None else 0
    if n < 2:
        raise DegenerateConfig(f"need at least 2 assets, got {n}")
    if L <= horizon + headroom:
        raise DegenerateConfig(f"L={L} leaves no room for horizon {horizon} and lookback {headroom}")
    if noise_std < 0:
        raise DegenerateConfig("noise_std must be non-negative")

    rng = np.random.default_rng(seed)
    drift = rng.normal(0.0002, 0.0003, size=(n, 1))
    vol = rng.uniform(0.01, 0.03, size=(n, 1))
    log_close = np.log(rng.uniform(5.0, 100.0, size=(n, 1))) + np.cumsum(
        drift + vol * rng.standard_normal((n, L)), axis=1)
    close = np.exp(log_close)
    prev = np.concatenate([close[:, :1], close[:, :-1]], axis=1)
    open_ = prev * np.exp(0.3 * vol * rng.standard_normal((n, L)))
    body_hi = np.maximum(open_, close)
    body_lo = np.minimum(open_, close)
    high = body_hi * np.exp(np.abs(0.5 * vol * rng.standard_normal((n, L))))
    low = body_lo * np.exp(-np.abs(0.5 * vol * rng.standard_normal((n, L))))
    mix = rng.uniform(0.2, 0.8, size=(n, L))
    vwap = low + mix * (high - low)
    volume = np.exp(rng.normal(13.0, 0.5, size=(n, 1)) + 0.3 * rng.standard_normal((n, L)))

    by_name = {"open": open_, "high": high, "low": low, "close": close, "volume": volume, "vwap": vwap}
    data = np.stack([by_name[f] for f in FEATURES], axis=1)
    dates = pd.bdate_range(start, periods=L)
    panel = Panel(tuple(f"S{i:03d}" for i in range(n)), FEATURES, dates, data)
    problems = check_prices(panel)
    if problems:
        log.warning("synthetic panel: %s", "; ".join(problems))

    if planted is None:
        return panel, forward_returns(panel, horizon)
    fm = evaluate(planted, panel, range(headroom, L), nan_tolerance=1.0)
    y = np.full((L, n), np.nan)
    y[headroom:] = zscore_daily(fm.values) + noise_std * rng.standard_normal((L - headroom, n))
    return panel, TargetMatrix(y, horizon)
