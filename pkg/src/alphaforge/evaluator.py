"""Vectorised evaluation of expression trees over a market panel.

All windowed operators look back over the trailing ``l`` days inclusive of
today, except ``Ref`` and ``Delta`` which reach exactly ``l`` days back.
Values are double precision; numerical failures become NaN and the result is
flagged invalid when the non-finite share exceeds ``nan_tolerance``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .expr import Node
from .tokens import TokenKind

if TYPE_CHECKING:
    from .market_data import Panel


class InsufficientHistory(ValueError):
    def __init__(self, required: int, available: int):
        super().__init__(f"expression needs {required} days of history, {available} available")
        self.required = required
        self.available = available


@dataclass(frozen=True)
class FactorMatrix:
    values: np.ndarray  # (days, assets)
    day_range: range
    valid: bool = True
    nonfinite_fraction: float = 0.0

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def own_lookback(node: Node) -> int:
    tok = node.token
    if tok.kind is not TokenKind.TS_OPERATOR:
        return 0
    span = int(node.children[-1].token.value)
    return span if tok.name in ("Ref", "Delta") else span - 1


def max_lookback(tree: Node) -> int:
    inner = max((max_lookback(c) for c in tree.children), default=0)
    return own_lookback(tree) + inner


# -- operator kernels ------------------------------------------------------


def _log(x):
    return np.where(x > 0, np.log(np.where(x > 0, x, 1.0)), np.nan)


def _div(x, y):
    return np.where(y != 0, x / np.where(y != 0, y, 1.0), np.nan)


def _pow(x, y):
    return np.power(x, y)


ELEMENTWISE: dict[str, Callable[..., np.ndarray]] = {
    "Abs": np.abs,
    "Log": _log,
    "Sign": np.sign,
    "Add": np.add,
    "Sub": np.subtract,
    "Mul": np.multiply,
    "Div": _div,
    "Larger": np.maximum,
    "Smaller": np.minimum,
    "Pow": _pow,
}


def _windows(x: np.ndarray, span: int) -> np.ndarray:
    # (rows, assets, span), last axis ordered oldest -> today
    return sliding_window_view(x, span, axis=0)


def _constant_window(w: np.ndarray) -> np.ndarray:
    return w.max(axis=-1) == w.min(axis=-1)


def _ema_weights(span: int) -> np.ndarray:
    alpha = 2.0 / (span + 1)
    k = np.arange(span)
    w = alpha * (1 - alpha) ** (span - 1 - k)
    w[0] = (1 - alpha) ** (span - 1)
    return w


def _mad(w):
    return np.abs(w - w.mean(axis=-1, keepdims=True)).mean(axis=-1)


def _lower_median(w):
    return np.sort(w, axis=-1)[..., (w.shape[-1] - 1) // 2]


def _wma(w):
    span = w.shape[-1]
    weights = np.arange(1, span + 1, dtype=float)
    return w @ (weights / weights.sum())


def _ema(w):
    return w @ _ema_weights(w.shape[-1])


ROLLING: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "Mean": lambda w: w.mean(axis=-1),
    "Sum": lambda w: w.sum(axis=-1),
    "Std": lambda w: w.std(axis=-1),
    "Var": lambda w: w.var(axis=-1),
    "Max": lambda w: w.max(axis=-1),
    "Min": lambda w: w.min(axis=-1),
    "Med": _lower_median,
    "Mad": _mad,
    "WMA": _wma,
    "EMA": _ema,
}


def _cov(wx, wy):
    dx = wx - wx.mean(axis=-1, keepdims=True)
    dy = wy - wy.mean(axis=-1, keepdims=True)
    return (dx * dy).mean(axis=-1)


def _corr(wx, wy):
    dx = wx - wx.mean(axis=-1, keepdims=True)
    dy = wy - wy.mean(axis=-1, keepdims=True)
    num = (dx * dy).sum(axis=-1)
    den = np.sqrt((dx * dx).sum(axis=-1) * (dy * dy).sum(axis=-1))
    flat = _constant_window(wx) | _constant_window(wy)
    return np.where(flat, np.nan, num / np.where(flat, 1.0, den))


def _apply(node: Node, panel: "Panel", start: int, stop: int) -> np.ndarray:
    tok = node.token
    rows = stop - start
    if tok.kind is TokenKind.FEATURE:
        return panel.feature(tok.short_name)[start:stop]
    if tok.kind is TokenKind.CONSTANT:
        return np.full((rows, panel.n_assets), tok.value)
    if tok.kind is TokenKind.CS_OPERATOR:
        args = [_apply(c, panel, start, stop) for c in node.children]
        return ELEMENTWISE[tok.name](*args)
    if tok.kind is TokenKind.TS_OPERATOR:
        span = int(node.children[-1].token.value)
        back = own_lookback(node)
        args = [_apply(c, panel, start - back, stop) for c in node.children[:-1]]
        x = args[0]
        if tok.name == "Ref":
            return x[:rows]
        if tok.name == "Delta":
            return x[span:] - x[:rows]
        if tok.name in ("Cov", "Corr"):
            wx, wy = _windows(x, span), _windows(args[1], span)
            return _cov(wx, wy) if tok.name == "Cov" else _corr(wx, wy)
        return ROLLING[tok.name](_windows(x, span))
    raise ValueError(f"cannot evaluate token {tok.name!r}")


def evaluate(tree: Node, panel: "Panel", days: range, nan_tolerance: float = 0.0) -> FactorMatrix:
    """Factor values for ``days`` (a contiguous range of panel day indices)."""
    if days.step != 1 or len(days) == 0:
        raise ValueError("days must be a non-empty contiguous range")
    if days.stop > panel.n_days:
        raise ValueError(f"days end at {days.stop}, panel has {panel.n_days}")
    need = max_lookback(tree)
    if days.start < need:
        raise InsufficientHistory(need, days.start)
    with np.errstate(all="ignore"):
        values = np.ascontiguousarray(_apply(tree, panel, days.start, days.stop), dtype=np.float64)
    bad = float(np.count_nonzero(~np.isfinite(values))) / values.size
    return FactorMatrix(values, days, valid=bad <= nan_tolerance, nonfinite_fraction=bad)
