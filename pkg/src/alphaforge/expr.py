"""RPN token sequences, expression trees and the action-mask predicate."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tokens import DEFAULT_VOCAB, Token, TokenKind, UnknownName, Vocabulary

TokenSequence = tuple[int, ...]

DEFAULT_MAX_LEN = 20  # actions per episode, SEP included


class ExprError(ValueError):
    pass


class UnknownToken(ExprError):
    def __init__(self, word: str, position: int):
        super().__init__(f"unknown token {word!r} at position {position}")
        self.word = word
        self.position = position


class MisplacedIndicator(ExprError):
    pass


class ArityUnderflow(ExprError):
    def __init__(self, step: int):
        super().__init__(f"operator at step {step} lacks operands")
        self.step = step


class DanglingOperands(ExprError):
    def __init__(self, count: int):
        super().__init__(f"{count} operands left on the stack at SEP")
        self.count = count


class TimeSpanMisuse(ExprError):
    def __init__(self, step: int):
        super().__init__(f"time span misuse at step {step}")
        self.step = step


@dataclass(frozen=True)
class Node:
    token: Token
    children: tuple["Node", ...] = ()

    def __str__(self) -> str:
        return to_infix(self)


def tokenize(text: str, vocab: Vocabulary = DEFAULT_VOCAB) -> TokenSequence:
    words = text.split()
    ids: list[int] = []
    sep = vocab.sep.id
    for pos, word in enumerate(words):
        if word == "BEG":
            if pos != 0:
                raise MisplacedIndicator(f"BEG at position {pos}")
            continue
        try:
            tok = vocab.lookup(word)
        except UnknownName:
            raise UnknownToken(word, pos) from None
        if tok.id == sep and pos != len(words) - 1:
            raise MisplacedIndicator(f"SEP at position {pos}")
        ids.append(tok.id)
    return tuple(ids)


def _reduce(stack: list, tok: Token, step: int) -> None:
    """Apply one token to a parse stack of Nodes (spans are Nodes too)."""
    if tok.kind in (TokenKind.FEATURE, TokenKind.CONSTANT, TokenKind.TIME_SPAN):
        stack.append(Node(tok))
        return
    span = None
    if tok.takes_span:
        if not stack or stack[-1].token.kind is not TokenKind.TIME_SPAN:
            raise TimeSpanMisuse(step)
        span = stack.pop()
    if len(stack) < tok.n_exprs:
        raise ArityUnderflow(step)
    args = stack[len(stack) - tok.n_exprs:] if tok.n_exprs else []
    if any(a.token.kind is TokenKind.TIME_SPAN for a in args):
        raise TimeSpanMisuse(step)
    del stack[len(stack) - tok.n_exprs:]
    stack.append(Node(tok, tuple(args) + ((span,) if span is not None else ())))


def parse_rpn(seq: Sequence[int], vocab: Vocabulary = DEFAULT_VOCAB) -> Node:
    sep = vocab.sep.id
    if not seq or seq[-1] != sep:
        raise MisplacedIndicator("sequence must end with SEP")
    stack: list[Node] = []
    for step, idx in enumerate(seq[:-1], start=1):
        if idx == sep:
            raise MisplacedIndicator(f"SEP at step {step}")
        _reduce(stack, vocab[idx], step)
    if not stack:
        raise ArityUnderflow(len(seq))
    if len(stack) > 1:
        raise DanglingOperands(len(stack))
    if stack[0].token.kind is TokenKind.TIME_SPAN:
        raise TimeSpanMisuse(len(seq))
    return stack[0]


def to_rpn(tree: Node, vocab: Vocabulary = DEFAULT_VOCAB) -> TokenSequence:
    out: list[int] = []

    def walk(node: Node) -> None:
        for child in node.children:
            walk(child)
        out.append(node.token.id)

    walk(tree)
    out.append(vocab.sep.id)
    return tuple(out)


def to_infix(tree: Node) -> str:
    tok = tree.token
    if not tree.children:
        if tok.kind is TokenKind.TIME_SPAN:
            return f"{int(tok.value)}d"
        if tok.kind is TokenKind.CONSTANT:
            return format(tok.value, "g")
        return tok.short_name
    return f"{tok.name}({', '.join(to_infix(c) for c in tree.children)})"


def rpn_text(seq: Sequence[int], vocab: Vocabulary = DEFAULT_VOCAB) -> str:
    """Whitespace-joined RPN in the demonstration file format.

    Constants keep their decimal point so ``10.0`` never reads back as a span.
    """
    return " ".join(vocab[i].short_name for i in seq)


# -- action masking --------------------------------------------------------


@dataclass(frozen=True)
class PrefixState:
    """Syntactic summary of a reachable prefix."""
    depth: int = 0
    pending_span: bool = False
    length: int = 0
    closed: bool = False

    def push(self, tok: Token) -> "PrefixState":
        k = tok.kind
        if k is TokenKind.INDICATOR:
            return PrefixState(self.depth, False, self.length + 1, True)
        if k is TokenKind.TIME_SPAN:
            return PrefixState(self.depth, True, self.length + 1)
        if tok.is_operator:
            return PrefixState(self.depth - tok.n_exprs + 1, False, self.length + 1)
        return PrefixState(self.depth + 1, False, self.length + 1)


def prefix_state(prefix: Sequence[int], vocab: Vocabulary = DEFAULT_VOCAB) -> PrefixState:
    st = PrefixState()
    for idx in prefix:
        st = st.push(vocab[idx])
    return st


def _locally_legal(st: PrefixState, tok: Token, vocab: Vocabulary) -> bool:
    if st.closed:
        return False
    k = tok.kind
    if st.pending_span:
        return k is TokenKind.TS_OPERATOR and tok.n_exprs <= st.depth
    if k is TokenKind.INDICATOR:
        return st.depth == 1
    if k is TokenKind.TS_OPERATOR:
        return False
    if k is TokenKind.CS_OPERATOR:
        return tok.n_exprs <= st.depth
    if k is TokenKind.TIME_SPAN:
        return st.depth >= 1 and any(t.n_exprs <= st.depth for t in vocab.of_kind(TokenKind.TS_OPERATOR))
    return True


def legal_after(st: PrefixState, tok: Token, vocab: Vocabulary = DEFAULT_VOCAB,
                max_len: int = DEFAULT_MAX_LEN) -> bool:
    if not _locally_legal(st, tok, vocab):
        return False
    nxt = st.push(tok)
    if nxt.closed:
        return nxt.length <= max_len
    return nxt.length + vocab.close_cost(nxt.depth, nxt.pending_span, max_len) <= max_len


def legal_next(prefix: Sequence[int], candidate: int | Token, vocab: Vocabulary = DEFAULT_VOCAB,
               max_len: int = DEFAULT_MAX_LEN) -> bool:
    tok = candidate if isinstance(candidate, Token) else vocab[candidate]
    return legal_after(prefix_state(prefix, vocab), tok, vocab, max_len)


def legal_mask(st: PrefixState, vocab: Vocabulary = DEFAULT_VOCAB,
               max_len: int = DEFAULT_MAX_LEN) -> np.ndarray:
    """Boolean mask over the vocabulary (read-only, memoised per state)."""
    key = (st, max_len)
    mask = vocab.mask_cache.get(key)
    if mask is None:
        mask = np.array([legal_after(st, t, vocab, max_len) for t in vocab], dtype=bool)
        mask.flags.writeable = False
        vocab.mask_cache[key] = mask
    return mask


# -- generators used by tests and benchmarks ---------------------------------


def random_tree(rng: np.random.Generator, vocab: Vocabulary = DEFAULT_VOCAB, max_depth: int = 4) -> Node:
    """Sample a random well-formed tree (no length budget)."""
    operands = vocab.of_kind(TokenKind.FEATURE, TokenKind.CONSTANT)
    operators = vocab.of_kind(TokenKind.CS_OPERATOR, TokenKind.TS_OPERATOR)
    spans = vocab.of_kind(TokenKind.TIME_SPAN)
    if not spans:
        operators = [t for t in operators if not t.takes_span]
    if max_depth <= 0 or not operators or rng.random() < 0.3:
        return Node(operands[rng.integers(len(operands))])
    op = operators[rng.integers(len(operators))]
    children = [random_tree(rng, vocab, max_depth - 1) for _ in range(op.n_exprs)]
    if op.takes_span:
        children.append(Node(spans[rng.integers(len(spans))]))
    return Node(op, tuple(children))


def random_masked_sequence(rng: np.random.Generator, vocab: Vocabulary = DEFAULT_VOCAB,
                           max_len: int = DEFAULT_MAX_LEN) -> TokenSequence:
    """Uniform sampling among legal tokens until SEP."""
    st = PrefixState()
    seq: list[int] = []
    sep = vocab.sep.id
    while True:
        legal = np.flatnonzero(legal_mask(st, vocab, max_len))
        if legal.size == 0:
            raise RuntimeError(f"dead end after prefix {seq}")
        a = int(legal[rng.integers(legal.size)])
        seq.append(a)
        st = st.push(vocab[a])
        if a == sep:
            return tuple(seq)


def read_rpn_lines(lines: Iterable[str], vocab: Vocabulary = DEFAULT_VOCAB) -> list[tuple[int, TokenSequence]]:
    """Parse the text RPN format; returns (line number, sequence) pairs.

    Each sequence is validated with :func:`parse_rpn`; errors propagate with
    the offending line number attached as ``lineno``.
    """
    out = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            seq = tokenize(line, vocab)
            parse_rpn(seq, vocab)
        except ExprError as exc:
            exc.lineno = lineno
            raise
        out.append((lineno, seq))
    return out


def read_rpn_file(path: str | Path, vocab: Vocabulary = DEFAULT_VOCAB) -> list[TokenSequence]:
    with open(path) as fh:
        return [seq for _, seq in read_rpn_lines(fh, vocab)]
