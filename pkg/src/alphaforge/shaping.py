"""Reward shapers driven by expert demonstration formulas.

All shapers are potential based: the shaping term for the transition
``s -> s'`` is ``gamma * phi(s') - phi(s)``.  Terminal states (after SEP or
the length cap) have potential 0, so a full episode's terms sum to
``-phi(s_0)`` and optimal policies are unchanged.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .expr import DEFAULT_MAX_LEN, ExprError, TokenSequence, parse_rpn, read_rpn_lines
from .tokens import DEFAULT_VOCAB, Vocabulary

SHAPING_KINDS = ("none", "tlrs", "pbrs", "dpba")
NULL_ID = -1


class EmptyDemoSet(ValueError):
    pass


class UnparseableDemo(ValueError):
    def __init__(self, line: int, reason: str = ""):
        super().__init__(f"demonstration on line {line} does not parse{': ' + reason if reason else ''}")
        self.line = line


class NotAnExtension(ValueError):
    pass


def shape(base_reward: float, f: float, done: bool) -> float:
    return f + base_reward if done else f


@dataclass(frozen=True)
class ShapedStep:
    base: float
    f: float
    shaped: float
    phi: float
    phi_next: float


# -- demonstration trie ------------------------------------------------------


class _Node:
    __slots__ = ("count", "children")

    def __init__(self) -> None:
        self.count = 0
        self.children: dict[int, _Node] = {}


@dataclass
class DemoIndex:
    """Prefix trie over demonstrations (SEP stripped).

    ``totals[t]`` is the number of demonstrations with at least ``t`` tokens;
    a node at depth ``t`` counts the demonstrations whose first ``t`` tokens
    equal its path.
    """
    root: _Node
    totals: list[int]
    demos: list[TokenSequence]
    sep: int

    @property
    def size(self) -> int:
        return self.totals[0]

    def total(self, t: int) -> int:
        return self.totals[t] if t < len(self.totals) else 0

    def node(self, prefix: Sequence[int]) -> _Node | None:
        node = self.root
        for tok in prefix:
            node = node.children.get(tok)
            if node is None:
                return None
        return node

    def cursor(self) -> "TrieCursor":
        return TrieCursor(self)

    def nodes_at(self, depth: int) -> list[tuple[TokenSequence, int]]:
        """(path, count) for every node at ``depth``."""
        level = [((), self.root)]
        for _ in range(depth):
            level = [(p + (tok,), ch) for p, n in level for tok, ch in n.children.items()]
        return [(p, n.count) for p, n in level]


def _strip_sep(seq: Sequence[int], sep: int) -> TokenSequence:
    seq = tuple(seq)
    return seq[:-1] if seq and seq[-1] == sep else seq


def build_demo_index(demos: Iterable[Sequence[int]], vocab: Vocabulary | None = DEFAULT_VOCAB,
                     validate: bool = True) -> DemoIndex:
    """Build the trie in O(total tokens).

    With ``validate`` every demo must parse under ``vocab``; pass
    ``validate=False`` for abstract token ids in tests and toy problems.
    """
    sep = vocab.sep.id if vocab is not None else NULL_ID
    root = _Node()
    stripped: list[TokenSequence] = []
    for i, demo in enumerate(demos, start=1):
        body = _strip_sep(demo, sep)
        if validate:
            try:
                parse_rpn(body + (sep,), vocab)
            except ExprError as exc:
                raise UnparseableDemo(i, str(exc)) from None
        stripped.append(body)
        node = root
        node.count += 1
        for tok in body:
            node = node.children.setdefault(tok, _Node())
            node.count += 1
    if not stripped:
        raise EmptyDemoSet("no demonstrations")
    longest = max(len(d) for d in stripped)
    totals = [sum(len(d) >= t for d in stripped) for t in range(longest + 1)]
    return DemoIndex(root, totals, stripped, sep)


def load_demo_index(path: str | Path, vocab: Vocabulary = DEFAULT_VOCAB) -> DemoIndex:
    """Read a demonstration file in the text RPN format."""
    with open(path) as fh:
        lines = fh.readlines()
    try:
        demos = [seq for _, seq in read_rpn_lines(lines, vocab)]
    except ExprError as exc:
        raise UnparseableDemo(getattr(exc, "lineno", 0), str(exc)) from None
    return build_demo_index(demos, vocab)


def potential_exact(index: DemoIndex, state: Sequence[int]) -> Fraction:
    """Exact-match ratio of ``state`` as a fraction; 0 for terminal states."""
    state = tuple(state)
    if state and state[-1] == index.sep:
        return Fraction(0)
    t = len(state)
    n_t = index.total(t)
    node = index.node(state)
    if node is None or n_t == 0:
        return Fraction(0)
    return Fraction(node.count, n_t)


def potential(index: DemoIndex, state: Sequence[int]) -> float:
    return float(potential_exact(index, state))


def _check_extension(s: Sequence[int], s_next: Sequence[int]) -> None:
    if len(s_next) != len(s) + 1 or tuple(s_next[:len(s)]) != tuple(s):
        raise NotAnExtension(f"{tuple(s_next)} does not extend {tuple(s)} by one token")


def tlrs_f(index: DemoIndex, s: Sequence[int], s_next: Sequence[int]) -> float:
    _check_extension(s, s_next)
    return potential(index, s_next) - potential(index, s)


def tlrs_f_exact(index: DemoIndex, s: Sequence[int], s_next: Sequence[int]) -> Fraction:
    _check_extension(s, s_next)
    return potential_exact(index, s_next) - potential_exact(index, s)


class TrieCursor:
    """Walks the trie alongside an episode; each step is O(1)."""
    __slots__ = ("index", "node", "depth")

    def __init__(self, index: DemoIndex):
        self.index = index
        self.node: _Node | None = index.root
        self.depth = 0

    def advance(self, tok: int) -> float:
        """Move past ``tok`` and return the new potential."""
        self.depth += 1
        if tok == self.index.sep:
            self.node = None
            return 0.0
        if self.node is not None:
            self.node = self.node.children.get(tok)
        return self.value

    @property
    def value(self) -> float:
        n_t = self.index.total(self.depth)
        if self.node is None or n_t == 0:
            return 0.0
        return self.node.count / n_t


# -- distance baselines ------------------------------------------------------


@dataclass
class DemoVectors:
    """Demonstrations as fixed-length vectors for distance potentials.

    Each sequence is padded to ``max_len`` with a null id.  With
    ``encoding="id"`` a position holds the token id; with ``"onehot"`` it
    holds a one-hot block over the vocabulary (all zeros for null), so the
    vector dimension grows with the vocabulary.
    """
    demos: list[TokenSequence]
    vocab_size: int
    max_len: int = DEFAULT_MAX_LEN
    encoding: str = "id"
    _ids: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if not self.demos:
            raise EmptyDemoSet("no demonstrations")
        if self.encoding not in ("id", "onehot"):
            raise ValueError(f"unknown encoding {self.encoding!r}")
        ids = np.full((len(self.demos), self.max_len), NULL_ID, dtype=np.int64)
        for i, d in enumerate(self.demos):
            d = d[:self.max_len]
            ids[i, :len(d)] = d
        self._ids = ids

    @classmethod
    def from_index(cls, index: DemoIndex, vocab_size: int, max_len: int = DEFAULT_MAX_LEN,
                   encoding: str = "id") -> "DemoVectors":
        return cls(list(index.demos), vocab_size, max_len, encoding)

    def encode_ids(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids)
        if self.encoding == "id":
            return ids.astype(float)
        out = np.zeros(ids.shape + (self.vocab_size,))
        hit = ids != NULL_ID
        np.put_along_axis(out, np.where(hit, ids, 0)[..., None], hit[..., None].astype(float), axis=-1)
        return out.reshape(ids.shape[:-1] + (-1,))

    def pad(self, seq: Sequence[int]) -> np.ndarray:
        row = np.full(self.max_len, NULL_ID, dtype=np.int64)
        row[:len(seq)] = seq[:self.max_len]
        return row

    def truncated(self, t: int) -> np.ndarray:
        """Demo id matrix cut to their first ``t`` tokens, null padded."""
        ids = self._ids.copy()
        ids[:, t:] = NULL_ID
        return ids

    def distance_potential(self, seq: Sequence[int]) -> float:
        """Negative distance to the nearest equally long demo prefix."""
        t = len(seq)
        demo = self.encode_ids(self.truncated(t))
        x = self.encode_ids(self.pad(seq)[None, :])
        return -float(np.sqrt(((demo - x) ** 2).sum(axis=1)).min())


def pbrs_potential(vectors: DemoVectors, state: Sequence[int], sep: int | None = None) -> float:
    state = tuple(state)
    if sep is not None and state and state[-1] == sep:
        return 0.0
    return vectors.distance_potential(state)


def pbrs_f(vectors: DemoVectors, s: Sequence[int], s_next: Sequence[int], gamma: float = 1.0,
           sep: int | None = None) -> float:
    return gamma * pbrs_potential(vectors, s_next, sep) - pbrs_potential(vectors, s, sep)


def dpba_potential(vectors: DemoVectors, state: Sequence[int], action: int | None) -> float:
    """State-action potential; ``action=None`` marks a terminal state (0)."""
    if action is None:
        return 0.0
    return vectors.distance_potential(tuple(state) + (int(action),))


def dpba_f(vectors: DemoVectors, s: Sequence[int], a: int, s_next: Sequence[int], a_next: int | None,
           gamma: float = 1.0) -> float:
    return gamma * dpba_potential(vectors, s_next, a_next) - dpba_potential(vectors, s, a)


# -- episode-level shapers used by the learner --------------------------------


class Shaper:
    """No shaping.  Subclasses supply per-state potentials for an episode."""
    kind = "none"

    def __init__(self, gamma: float = 1.0):
        self.gamma = gamma

    def potentials(self, actions: Sequence[int]) -> np.ndarray:
        """phi(s_0) .. phi(s_T) for the states an episode visits."""
        return np.zeros(len(actions) + 1)

    def episode(self, actions: Sequence[int]) -> np.ndarray:
        """Shaping terms f_0 .. f_{T-1} of a finished episode."""
        phi = self.potentials(actions)
        return self.gamma * phi[1:] - phi[:-1]


class TlrsShaper(Shaper):
    kind = "tlrs"

    def __init__(self, index: DemoIndex, gamma: float = 1.0):
        super().__init__(gamma)
        self.index = index

    def potentials(self, actions: Sequence[int]) -> np.ndarray:
        cur = self.index.cursor()
        out = np.empty(len(actions) + 1)
        out[0] = cur.value
        for i, a in enumerate(actions, start=1):
            out[i] = cur.advance(a)
        out[-1] = 0.0
        return out


class PbrsShaper(Shaper):
    kind = "pbrs"

    def __init__(self, vectors: DemoVectors, sep: int, gamma: float = 1.0):
        super().__init__(gamma)
        self.vectors = vectors
        self.sep = sep

    def potentials(self, actions: Sequence[int]) -> np.ndarray:
        actions = tuple(actions)
        out = np.array([self.vectors.distance_potential(actions[:t]) for t in range(len(actions) + 1)])
        out[-1] = 0.0
        return out


class DpbaShaper(PbrsShaper):
    kind = "dpba"

    def potentials(self, actions: Sequence[int]) -> np.ndarray:
        actions = tuple(actions)
        T = len(actions)
        out = np.zeros(T + 1)
        for t in range(T):
            out[t] = dpba_potential(self.vectors, actions[:t], actions[t])
        return out


def make_shaper(kind: str, index: DemoIndex | None, vocab: Vocabulary = DEFAULT_VOCAB,
                gamma: float = 1.0, max_len: int = DEFAULT_MAX_LEN, encoding: str = "id") -> Shaper:
    if kind not in SHAPING_KINDS:
        raise ValueError(f"unknown shaping kind {kind!r}")
    if kind == "none":
        return Shaper(gamma)
    if index is None:
        raise EmptyDemoSet(f"shaping {kind!r} needs demonstrations")
    if kind == "tlrs":
        return TlrsShaper(index, gamma)
    vectors = DemoVectors.from_index(index, len(vocab), max_len, encoding)
    cls = PbrsShaper if kind == "pbrs" else DpbaShaper
    return cls(vectors, vocab.sep.id, gamma)
