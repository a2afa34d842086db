"""Linear factor pool: cached z-scored factors, fitted weights, eviction."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .evaluator import InsufficientHistory, evaluate, max_lookback
from .expr import Node, parse_rpn, rpn_text, to_infix, to_rpn, tokenize
from .market_data import Panel, TargetMatrix
from .metrics import NoValidDays, mean_ic, mean_rank_ic, zscore_daily
from .tokens import DEFAULT_VOCAB, Vocabulary

log = logging.getLogger(__name__)

EXPORT_COLUMNS = ("formula", "rpn", "weight", "train_ic")


class EmptyPool(ValueError):
    pass


class InvalidCandidate(ValueError):
    pass


class NonFiniteLoss(ArithmeticError):
    pass


@dataclass
class PoolEntry:
    key: tuple[int, ...]
    tree: Node
    values: np.ndarray  # z-scored, (train days, assets)
    ic: float


class FactorPool:
    """Factor set with weights fitted by full-batch gradient descent.

    The loss is the mean squared error per (day, asset) cell between the
    weighted factor sum and the targets, i.e. the daily squared norm averaged
    over days and divided by the asset count.  Cells with unavailable targets
    are left out.
    """

    def __init__(self, panel: Panel, targets: TargetMatrix, days: range, capacity: int = 10,
                 lr: float = 1e-2, steps: int = 500, nan_tolerance: float = 0.0,
                 vocab: Vocabulary = DEFAULT_VOCAB):
        self.panel = panel
        self.targets = targets
        self.days = days
        self.capacity = capacity
        self.lr = lr
        self.steps = steps
        self.nan_tolerance = nan_tolerance
        self.vocab = vocab
        self.entries: list[PoolEntry] = []
        self.weights = np.zeros(0)
        y = targets.values[days.start:days.stop]
        self._mask = np.isfinite(y)
        self._y = np.where(self._mask, y, 0.0)
        self._cells = max(int(self._mask.sum()), 1)
        self._gram = np.zeros((0, 0))
        self._proj = np.zeros(0)
        self._yy = float((self._y ** 2).sum()) / self._cells
        self._value_cache: dict[tuple, np.ndarray | None] = {}

    def __len__(self) -> int:
        return len(self.entries)

    # -- evaluation helpers -------------------------------------------------

    def factor_values(self, tree: Node, days: range | None = None) -> np.ndarray | None:
        """Z-scored values of ``tree`` on ``days``; None when invalid."""
        days = self.days if days is None else days
        key = (to_rpn(tree, self.vocab), days.start, days.stop)
        if key in self._value_cache:
            return self._value_cache[key]
        out = None
        if max_lookback(tree) <= days.start:
            fm = evaluate(tree, self.panel, days, self.nan_tolerance)
            if fm.valid:
                out = zscore_daily(fm.values)
        if len(self._value_cache) > 50_000:
            self._value_cache.clear()
        self._value_cache[key] = out
        return out

    def combination(self, days: range | None = None) -> np.ndarray:
        """Weighted factor sum on ``days`` (training range by default)."""
        if not self.entries:
            raise EmptyPool("pool is empty")
        if days is None or days == self.days:
            mats = [e.values for e in self.entries]
        else:
            mats = [self.factor_values(e.tree, days) for e in self.entries]
            if any(m is None for m in mats):
                raise InsufficientHistory(max(max_lookback(e.tree) for e in self.entries), days.start)
        return np.tensordot(self.weights, np.stack(mats), axes=1)

    def score(self, days: range | None = None, rank: bool = False) -> float:
        days = self.days if days is None else days
        z = self.combination(days)
        y = self.targets.values[days.start:days.stop]
        return (mean_rank_ic if rank else mean_ic)(z, y).mean

    # -- weights ------------------------------------------------------------

    def loss(self, w: np.ndarray | None = None) -> float:
        w = self.weights if w is None else w
        return float(w @ self._gram @ w - 2 * w @ self._proj + self._yy)

    def fit_weights(self, steps: int | None = None, lr: float | None = None) -> float:
        """Gradient descent on the pool loss; returns the final loss."""
        if not self.entries:
            raise EmptyPool("pool is empty")
        steps = self.steps if steps is None else steps
        lr = self.lr if lr is None else lr
        # ``steps`` iterations of w <- w - 2 lr (G w - b) form one affine map,
        # applied here through a matrix power instead of a Python loop
        k = len(self.entries)
        step = np.eye(k + 1)
        step[:k, :k] -= 2.0 * lr * self._gram
        step[:k, k] = 2.0 * lr * self._proj
        with np.errstate(all="ignore"):
            w = (np.linalg.matrix_power(step, steps) @ np.append(self.weights, 1.0))[:k]
        final = self.loss(w)
        if not np.isfinite(final) or not np.all(np.isfinite(w)):
            raise NonFiniteLoss(f"loss became {final}")
        self.weights = w
        return final

    def _add(self, entry: PoolEntry) -> None:
        z = np.where(self._mask, entry.values, 0.0)
        others = [np.where(self._mask, e.values, 0.0) for e in self.entries]
        cross = np.array([float((z * o).sum()) for o in others]) / self._cells
        k = len(self.entries)
        gram = np.zeros((k + 1, k + 1))
        gram[:k, :k] = self._gram
        gram[k, :k] = gram[:k, k] = cross
        gram[k, k] = float((z * z).sum()) / self._cells
        self._gram = gram
        self._proj = np.append(self._proj, float((z * self._y).sum()) / self._cells)
        self.entries.append(entry)
        self.weights = np.append(self.weights, 0.0)

    def _remove(self, idx: int) -> PoolEntry:
        keep = [i for i in range(len(self.entries)) if i != idx]
        self._gram = self._gram[np.ix_(keep, keep)]
        self._proj = self._proj[keep]
        self.weights = self.weights[keep]
        return self.entries.pop(idx)

    def evict_weakest(self) -> PoolEntry:
        """Drop the entry with the smallest |weight|; the oldest wins ties."""
        if not self.entries:
            raise EmptyPool("pool is empty")
        return self._remove(int(np.argmin(np.abs(self.weights))))

    def contains(self, key: Sequence[int]) -> bool:
        return any(e.key == tuple(key) for e in self.entries)

    def admit(self, tree: Node) -> float:
        """Add ``tree``, refit, evict beyond capacity; returns the pool's mean IC."""
        key = to_rpn(tree, self.vocab)
        if self.contains(key):
            return self.score()
        values = self.factor_values(tree)
        if values is None:
            raise InvalidCandidate(to_infix(tree))
        try:
            ic = mean_ic(values, self.targets.values[self.days.start:self.days.stop]).mean
        except NoValidDays:
            raise InvalidCandidate(to_infix(tree)) from None
        snapshot = (list(self.entries), self.weights.copy(), self._gram.copy(), self._proj.copy())
        self._add(PoolEntry(key, tree, values, ic))
        try:
            self.fit_weights()
            if len(self.entries) > self.capacity:
                gone = self.evict_weakest()
                log.debug("evicted %s", to_infix(gone.tree))
                if self.entries:
                    self.fit_weights()
        except NonFiniteLoss:
            self.entries, self.weights, self._gram, self._proj = snapshot
            raise
        if not self.entries:
            return 0.0
        try:
            return self.score()
        except NoValidDays:
            return 0.0

    def restore(self, rpn_lines: Sequence[str], weights: Sequence[float]) -> None:
        """Rebuild entries from RPN text with given weights (no refit)."""
        self.entries, self.weights = [], np.zeros(0)
        self._gram, self._proj = np.zeros((0, 0)), np.zeros(0)
        for line in rpn_lines:
            tree = parse_rpn(tokenize(line, self.vocab), self.vocab)
            values = self.factor_values(tree)
            if values is None:
                raise InvalidCandidate(line)
            try:
                ic = mean_ic(values, self.targets.values[self.days.start:self.days.stop]).mean
            except NoValidDays:
                ic = float("nan")
            self._add(PoolEntry(to_rpn(tree, self.vocab), tree, values, ic))
        self.weights = np.asarray(weights, dtype=float).copy()

    # -- export -------------------------------------------------------------

    def records(self) -> list[dict]:
        return [{"formula": to_infix(e.tree), "rpn": rpn_text(e.key, self.vocab),
                 "weight": float(w), "train_ic": float(e.ic)}
                for e, w in zip(self.entries, self.weights)]


def write_pool_export(records: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EXPORT_COLUMNS)
        for r in records:
            writer.writerow([r["formula"], r["rpn"], repr(float(r["weight"])), repr(float(r["train_ic"]))])


def read_pool_export(path: str | Path, vocab: Vocabulary = DEFAULT_VOCAB) -> list[dict]:
    """Read a pool export; every RPN field is reparsed and checked against its formula."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != EXPORT_COLUMNS:
            raise ValueError(f"unexpected header {reader.fieldnames}")
        for row in reader:
            tree = parse_rpn(tokenize(row["rpn"], vocab), vocab)
            if to_infix(tree) != row["formula"]:
                raise ValueError(f"formula/RPN mismatch: {row['formula']!r}")
            out.append({"formula": row["formula"], "rpn": row["rpn"],
                        "weight": float(row["weight"]), "train_ic": float(row["train_ic"])})
    return out
