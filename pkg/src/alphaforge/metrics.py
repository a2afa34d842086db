"""Cross-sectional information coefficients and daily normalisation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

# a cross-section counts as constant when its spread is below this fraction
# of its magnitude; guards against float residue such as (x + c) - x
DEGENERATE_RTOL = 1e-12


class LengthMismatch(ValueError):
    pass


class NoValidDays(ValueError):
    pass


@dataclass(frozen=True)
class ICSeries:
    values: np.ndarray  # per-day IC, NaN on skipped days
    mean: float
    skipped: int

    @property
    def retained(self) -> int:
        return int(self.values.size - self.skipped)


def _degenerate(std: np.ndarray, scale: np.ndarray) -> np.ndarray:
    return std <= DEGENERATE_RTOL * np.maximum(scale, 1.0)


def pearson_ic(z, y) -> float:
    """Pearson correlation of two cross-sections; NaN flags a degenerate day."""
    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float)
    if z.shape != y.shape or z.ndim != 1:
        raise LengthMismatch(f"{z.shape} vs {y.shape}")
    if z.size < 2:
        raise LengthMismatch("need at least two assets")
    return float(daily_ic(z[None, :], y[None, :])[0])


def rank_ic(z, y) -> float:
    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float)
    if z.shape != y.shape or z.ndim != 1:
        raise LengthMismatch(f"{z.shape} vs {y.shape}")
    return pearson_ic(rankdata(z), rankdata(y))


def daily_ic(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-row Pearson IC over assets where both values are finite."""
    if z.shape != y.shape:
        raise LengthMismatch(f"{z.shape} vs {y.shape}")
    ok = np.isfinite(z) & np.isfinite(y)
    cnt = ok.sum(axis=1)
    zf = np.where(ok, z, 0.0)
    yf = np.where(ok, y, 0.0)
    with np.errstate(all="ignore"):
        mz = zf.sum(axis=1) / cnt
        my = yf.sum(axis=1) / cnt
        dz = np.where(ok, zf - mz[:, None], 0.0)
        dy = np.where(ok, yf - my[:, None], 0.0)
        sz = np.sqrt((dz * dz).sum(axis=1) / cnt)
        sy = np.sqrt((dy * dy).sum(axis=1) / cnt)
        ic = (dz * dy).sum(axis=1) / cnt / (sz * sy)
    bad = (cnt < 2) | _degenerate(sz, np.abs(zf).max(axis=1)) | _degenerate(sy, np.abs(yf).max(axis=1))
    return np.where(bad, np.nan, np.clip(ic, -1.0, 1.0))


def _rank_rows(m: np.ndarray) -> np.ndarray:
    out = np.full(m.shape, np.nan)
    for i, row in enumerate(m):
        ok = np.isfinite(row)
        out[i, ok] = rankdata(row[ok])
    return out


def daily_rank_ic(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    ok = np.isfinite(z) & np.isfinite(y)
    return daily_ic(_rank_rows(np.where(ok, z, np.nan)), _rank_rows(np.where(ok, y, np.nan)))


def _summarise(per_day: np.ndarray) -> ICSeries:
    keep = np.isfinite(per_day)
    if not keep.any():
        raise NoValidDays("every day is degenerate")
    return ICSeries(per_day, float(per_day[keep].mean()), int((~keep).sum()))


def _aligned(z, y, days: range | None) -> tuple[np.ndarray, np.ndarray]:
    z = np.asarray(getattr(z, "values", z), dtype=float)
    y = np.asarray(getattr(y, "values", y), dtype=float)
    if days is not None:
        # full-panel grids are cut down to the evaluated days
        if z.shape[0] != len(days):
            z = z[days.start:days.stop]
        if y.shape[0] != len(days):
            y = y[days.start:days.stop]
    return z, y


def mean_ic(z, y, days: range | None = None) -> ICSeries:
    """Mean daily IC; degenerate days are skipped rather than scored 0.

    ``z`` and ``y`` are (days, assets) grids (or objects with ``.values``).
    When ``days`` is given, any grid spanning the whole panel is sliced to it.
    """
    return _summarise(daily_ic(*_aligned(z, y, days)))


def mean_rank_ic(z, y, days: range | None = None) -> ICSeries:
    return _summarise(daily_rank_ic(*_aligned(z, y, days)))


def zscore_daily(m: np.ndarray) -> np.ndarray:
    """Per-day cross-sectional z-score (population std); constant days map to 0."""
    m = np.asarray(m, dtype=float)
    ok = np.isfinite(m)
    cnt = ok.sum(axis=1, keepdims=True)
    mf = np.where(ok, m, 0.0)
    with np.errstate(all="ignore"):
        mu = mf.sum(axis=1, keepdims=True) / cnt
        dev = np.where(ok, mf - mu, 0.0)
        sd = np.sqrt((dev * dev).sum(axis=1, keepdims=True) / cnt)
        flat = _degenerate(sd, np.abs(mf).max(axis=1, keepdims=True))
        out = np.where(flat, 0.0, dev / np.where(flat, 1.0, sd))
    return np.where(ok, out, np.nan)
