"""Token vocabulary for formulaic factor expressions.

The default table reproduces the 48-token layout (ids 0-47) used by the
factor-mining environment, followed by extension tokens needed to express
common Alpha101 formulas (Sign, Pow, the 1- and 5-day spans and the 0.001
constant).  A vocabulary can be shrunk with :meth:`Vocabulary.subset`, which
re-indexes ids densely while preserving table order.
"""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence


class TokenKind(enum.Enum):
    CS_OPERATOR = "cross-sectional operator"
    TS_OPERATOR = "time-series operator"
    FEATURE = "feature"
    TIME_SPAN = "time-span"
    CONSTANT = "constant"
    INDICATOR = "sequence-indicator"


@dataclass(frozen=True)
class Token:
    id: int
    name: str
    kind: TokenKind
    # number of sub-expression operands; time-series operators take one extra span
    n_exprs: int = 0
    value: float | None = None

    @property
    def takes_span(self) -> bool:
        return self.kind is TokenKind.TS_OPERATOR

    @property
    def arity(self) -> int:
        return self.n_exprs + (1 if self.takes_span else 0)

    @property
    def is_operator(self) -> bool:
        return self.kind in (TokenKind.CS_OPERATOR, TokenKind.TS_OPERATOR)

    @property
    def is_operand(self) -> bool:
        return self.kind in (TokenKind.FEATURE, TokenKind.CONSTANT)

    @property
    def short_name(self) -> str:
        """Name as written in formulas: ``close`` rather than ``$close``."""
        return self.name.lstrip("$")


CS, TS = TokenKind.CS_OPERATOR, TokenKind.TS_OPERATOR

# (name, kind, n_exprs, value) in id order
DEFAULT_TABLE: tuple[tuple[str, TokenKind, int, float | None], ...] = (
    ("Abs", CS, 1, None),
    ("Log", CS, 1, None),
    ("Add", CS, 2, None),
    ("Sub", CS, 2, None),
    ("Mul", CS, 2, None),
    ("Div", CS, 2, None),
    ("Larger", CS, 2, None),
    ("Smaller", CS, 2, None),
    ("Ref", TS, 1, None),
    ("Mean", TS, 1, None),
    ("Sum", TS, 1, None),
    ("Std", TS, 1, None),
    ("Var", TS, 1, None),
    ("Max", TS, 1, None),
    ("Min", TS, 1, None),
    ("Med", TS, 1, None),
    ("Mad", TS, 1, None),
    ("Delta", TS, 1, None),
    ("WMA", TS, 1, None),
    ("EMA", TS, 1, None),
    ("Cov", TS, 2, None),
    ("Corr", TS, 2, None),
    ("$open", TokenKind.FEATURE, 0, None),
    ("$close", TokenKind.FEATURE, 0, None),
    ("$high", TokenKind.FEATURE, 0, None),
    ("$low", TokenKind.FEATURE, 0, None),
    ("$volume", TokenKind.FEATURE, 0, None),
    ("$vwap", TokenKind.FEATURE, 0, None),
    ("10", TokenKind.TIME_SPAN, 0, 10.0),
    ("20", TokenKind.TIME_SPAN, 0, 20.0),
    ("30", TokenKind.TIME_SPAN, 0, 30.0),
    ("40", TokenKind.TIME_SPAN, 0, 40.0),
    ("50", TokenKind.TIME_SPAN, 0, 50.0),
    ("-30.0", TokenKind.CONSTANT, 0, -30.0),
    ("-10.0", TokenKind.CONSTANT, 0, -10.0),
    ("-5.0", TokenKind.CONSTANT, 0, -5.0),
    ("-2.0", TokenKind.CONSTANT, 0, -2.0),
    ("-1.0", TokenKind.CONSTANT, 0, -1.0),
    ("-0.5", TokenKind.CONSTANT, 0, -0.5),
    ("-0.01", TokenKind.CONSTANT, 0, -0.01),
    ("0.01", TokenKind.CONSTANT, 0, 0.01),
    ("0.5", TokenKind.CONSTANT, 0, 0.5),
    ("1.0", TokenKind.CONSTANT, 0, 1.0),
    ("2.0", TokenKind.CONSTANT, 0, 2.0),
    ("5.0", TokenKind.CONSTANT, 0, 5.0),
    ("10.0", TokenKind.CONSTANT, 0, 10.0),
    ("30.0", TokenKind.CONSTANT, 0, 30.0),
    ("SEP", TokenKind.INDICATOR, 0, None),
    # extensions
    ("Sign", CS, 1, None),
    ("Pow", CS, 2, None),
    ("1", TokenKind.TIME_SPAN, 0, 1.0),
    ("5", TokenKind.TIME_SPAN, 0, 5.0),
    ("0.001", TokenKind.CONSTANT, 0, 0.001),
)

_SPAN_RE = re.compile(r"^(\d+)d?$")


class UnknownName(KeyError):
    pass


@dataclass(eq=False)
class Vocabulary:
    tokens: tuple[Token, ...]
    _by_name: dict[str, Token] = field(init=False, repr=False)
    _close_cost: dict[int, dict[tuple[int, bool], int]] = field(init=False, repr=False)
    mask_cache: dict = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._by_name = {}
        for i, tok in enumerate(self.tokens):
            if tok.id != i:
                raise ValueError(f"token {tok.name!r} has id {tok.id}, expected {i}")
            if tok.name in self._by_name:
                raise ValueError(f"duplicate token name {tok.name!r}")
            self._by_name[tok.name] = tok
        if sum(t.kind is TokenKind.INDICATOR for t in self.tokens) != 1:
            raise ValueError("vocabulary needs exactly one SEP token")
        self._close_cost = {}
        self.mask_cache = {}

    @classmethod
    def from_table(cls, rows: Iterable[tuple[str, TokenKind, int, float | None]]) -> "Vocabulary":
        return cls(tuple(Token(i, n, k, a, v) for i, (n, k, a, v) in enumerate(rows)))

    def subset(self, names: Iterable[str]) -> "Vocabulary":
        """Vocabulary restricted to ``names`` (SEP is always kept), ids re-indexed."""
        keep = {self.lookup(n).name for n in names} | {self.sep.name}
        rows = [(t.name, t.kind, t.n_exprs, t.value) for t in self.tokens if t.name in keep]
        return Vocabulary.from_table(rows)

    def extended(self, rows: Iterable[tuple[str, TokenKind, int, float | None]]) -> "Vocabulary":
        """Append tokens after the existing ids (existing ids are unchanged)."""
        base = [(t.name, t.kind, t.n_exprs, t.value) for t in self.tokens]
        return Vocabulary.from_table(base + list(rows))

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, idx: int) -> Token:
        return self.tokens[idx]

    def __iter__(self):
        return iter(self.tokens)

    @property
    def sep(self) -> Token:
        return next(t for t in self.tokens if t.kind is TokenKind.INDICATOR)

    def of_kind(self, *kinds: TokenKind) -> list[Token]:
        return [t for t in self.tokens if t.kind in kinds]

    @property
    def feature_names(self) -> list[str]:
        return [t.short_name for t in self.of_kind(TokenKind.FEATURE)]

    def lookup(self, word: str) -> Token:
        """Resolve a word, accepting ``close``/``$close``, ``10``/``10d`` and any
        numeric spelling of a constant (``-1`` for ``-1.0``)."""
        tok = self._by_name.get(word) or self._by_name.get("$" + word)
        if tok is not None:
            return tok
        m = _SPAN_RE.match(word)
        if m:
            days = float(m.group(1))
            for t in self.of_kind(TokenKind.TIME_SPAN):
                if t.value == days:
                    return t
            if word.endswith("d"):
                raise UnknownName(word)
        try:
            value = float(word)
        except ValueError:
            raise UnknownName(word) from None
        for t in self.of_kind(TokenKind.CONSTANT):
            if t.value == value:
                return t
        raise UnknownName(word)

    def id_of(self, word: str) -> int:
        return self.lookup(word).id

    # -- syntax budget -----------------------------------------------------

    def close_cost(self, depth: int, pending_span: bool, limit: int) -> int:
        """Fewest further tokens (SEP included) that complete a prefix whose
        stack holds ``depth`` expressions (plus a span on top if
        ``pending_span``).  Returns a value > ``limit`` when impossible."""
        table = self._close_cost.get(limit)
        if table is None:
            table = self._close_cost[limit] = self._close_cost_table(limit)
        return table.get((depth, pending_span), limit + 1)

    def _close_cost_table(self, limit: int) -> dict[tuple[int, bool], int]:
        max_depth = limit + 2
        inf = 10 ** 9
        cost = {(d, p): inf for d in range(max_depth + 1) for p in (False, True)}
        cost[(1, False)] = 1
        has_term = bool(self.of_kind(TokenKind.FEATURE, TokenKind.CONSTANT))
        has_span = bool(self.of_kind(TokenKind.TIME_SPAN))
        cs_arities = sorted({t.n_exprs for t in self.of_kind(TokenKind.CS_OPERATOR)})
        ts_arities = sorted({t.n_exprs for t in self.of_kind(TokenKind.TS_OPERATOR)})
        changed = True
        while changed:
            changed = False
            for (d, p), c in list(cost.items()):
                succ: list[tuple[int, bool]] = []
                if p:
                    succ += [(d - k + 1, False) for k in ts_arities if k <= d]
                else:
                    if has_term and d + 1 <= max_depth:
                        succ.append((d + 1, False))
                    if has_span and any(k <= d for k in ts_arities):
                        succ.append((d, True))
                    succ += [(d - k + 1, False) for k in cs_arities if k <= d]
                best = min((cost[s] + 1 for s in succ if s in cost), default=inf)
                if best < c:
                    cost[(d, p)] = best
                    changed = True
        return {k: v for k, v in cost.items() if v < inf}


DEFAULT_VOCAB = Vocabulary.from_table(DEFAULT_TABLE)


def load_vocabulary(names: Sequence[str] | None = None, exclude: Sequence[str] = ()) -> Vocabulary:
    """Build a vocabulary from config: an explicit name list or the default
    table minus ``exclude``."""
    if names:
        return DEFAULT_VOCAB.subset(names)
    if exclude:
        dropped = {DEFAULT_VOCAB.lookup(n).name for n in exclude}
        return DEFAULT_VOCAB.subset(t.name for t in DEFAULT_VOCAB if t.name not in dropped)
    return DEFAULT_VOCAB
