"""The factor-mining MDP: token prefixes as states, masked token actions."""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .evaluator import max_lookback
from .expr import (DEFAULT_MAX_LEN, ExprError, PrefixState, TokenSequence, legal_mask,
                   parse_rpn)
from .factor_pool import FactorPool, InvalidCandidate, NonFiniteLoss
from .tokens import DEFAULT_VOCAB, Vocabulary

log = logging.getLogger(__name__)

INVALID_REWARD = -1.0


class IllegalAction(ValueError):
    pass


class Terminal(enum.Enum):
    NONE = "none"
    SEP = "sep"
    LENGTH_CAP = "length-cap"


@dataclass(frozen=True)
class EnvState:
    prefix: TokenSequence = ()
    t: int = 0
    done: bool = False
    terminal: Terminal = Terminal.NONE
    syntax: PrefixState = PrefixState()


class FactorEnv:
    """Single-episode token environment.

    Rewards are zero until the episode ends.  The terminal reward comes from
    ``reward_fn`` when given (toy environments), otherwise from admitting the
    finished expression into ``pool``.
    """

    def __init__(self, pool: FactorPool | None = None,
                 reward_fn: Callable[[TokenSequence], float] | None = None,
                 vocab: Vocabulary = DEFAULT_VOCAB, max_len: int = DEFAULT_MAX_LEN):
        if pool is None and reward_fn is None:
            raise ValueError("need a factor pool or a reward function")
        self.pool = pool
        self.reward_fn = reward_fn
        self.vocab = pool.vocab if pool is not None else vocab
        self.max_len = max_len
        self.sep = self.vocab.sep.id
        self.state = EnvState()

    def reset(self) -> EnvState:
        self.state = EnvState()
        return self.state

    def legal_actions(self, state: EnvState | None = None) -> np.ndarray:
        state = self.state if state is None else state
        if state.done:
            raise IllegalAction("episode is over")
        return legal_mask(state.syntax, self.vocab, self.max_len)

    def step(self, action: int) -> tuple[EnvState, float, bool]:
        st = self.state
        action = int(action)
        if st.done:
            raise IllegalAction("step after episode end")
        if not 0 <= action < len(self.vocab) or not self.legal_actions(st)[action]:
            raise IllegalAction(f"token {action} is not legal after {st.prefix}")
        prefix = st.prefix + (action,)
        syntax = st.syntax.push(self.vocab[action])
        t = st.t + 1
        reward = 0.0
        if action == self.sep:
            nxt = EnvState(prefix, t, True, Terminal.SEP, syntax)
            reward = self.terminal_reward(prefix)
        elif t >= self.max_len:
            # unreachable while the mask's length budget holds; kept for the contract
            nxt = EnvState(prefix, t, True, Terminal.LENGTH_CAP, syntax)
            if syntax.depth == 1 and not syntax.pending_span:
                reward = self.terminal_reward(prefix + (self.sep,))
            else:
                reward = INVALID_REWARD
        else:
            nxt = EnvState(prefix, t, False, Terminal.NONE, syntax)
        self.state = nxt
        return nxt, reward, nxt.done

    def terminal_reward(self, seq: TokenSequence) -> float:
        """Pool mean IC after admitting ``seq``; -1 for anything that fails."""
        try:
            tree = parse_rpn(seq, self.vocab)
        except ExprError:
            return INVALID_REWARD
        if self.reward_fn is not None:
            return float(self.reward_fn(seq))
        if max_lookback(tree) > self.pool.days.start:
            return INVALID_REWARD
        try:
            return float(self.pool.admit(tree))
        except (InvalidCandidate, NonFiniteLoss) as exc:
            log.debug("invalid factor: %s", exc)
            return INVALID_REWARD
