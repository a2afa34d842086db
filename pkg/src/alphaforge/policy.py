"""Recurrent token policy with a masked categorical head, trained by PPO."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .centering import AverageTracker, centered_delta
from .mdp_env import FactorEnv
from .shaping import Shaper, shape

log = logging.getLogger(__name__)


class AllMasked(RuntimeError):
    pass


class NonFiniteGradient(ArithmeticError):
    pass


def _mlp(n_in: int, width: int, n_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(n_in, width), nn.Tanh(), nn.Linear(width, width), nn.Tanh(),
                         nn.Linear(width, n_out))


class PolicyModel(nn.Module):
    """Token embedding -> 2-layer LSTM -> policy and value heads.

    The input at position ``t`` is the previous token (a BEG id at t=0), so
    the output there describes state ``a_{1:t}``.
    """

    def __init__(self, n_tokens: int, embed_dim: int = 64, hidden: int = 128, layers: int = 2,
                 dropout: float = 0.1, head_width: int = 64):
        super().__init__()
        self.n_tokens = n_tokens
        self.beg = n_tokens
        self.embed = nn.Embedding(n_tokens + 1, embed_dim)
        self.lstm = nn.LSTM(embed_dim, hidden, layers, dropout=dropout, batch_first=True)
        self.policy_head = _mlp(hidden, head_width, n_tokens)
        self.value_head = _mlp(hidden, head_width, 1)

    def forward(self, inputs: torch.Tensor, state=None):
        """inputs: (B, T) token ids -> logits (B, T, V), values (B, T), state."""
        out, state = self.lstm(self.embed(inputs), state)
        return self.policy_head(out), self.value_head(out).squeeze(-1), state


def masked_logits(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return logits.masked_fill(~mask, float("-inf"))


def masked_log_softmax(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    if not bool(mask.any(dim=-1).all()):
        raise AllMasked("a state has no legal action")
    return F.log_softmax(masked_logits(logits, mask), dim=-1)


def sample_masked(logp: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Gumbel-max draw per row of log-probabilities (-inf rows entries never win)."""
    g = rng.gumbel(size=logp.shape)
    return np.argmax(np.where(np.isfinite(logp), logp + g, -np.inf), axis=-1)


@torch.no_grad()
def act(model: PolicyModel, prefix: Sequence[int], mask: np.ndarray, rng: np.random.Generator,
        greedy: bool = False) -> tuple[int, float, float]:
    """Sample one action for a single state; returns (action, log_prob, value)."""
    was_training = model.training
    model.eval()
    inputs = torch.tensor([[model.beg, *prefix]], dtype=torch.long)
    logits, values, _ = model(inputs)
    model.train(was_training)
    m = torch.as_tensor(np.asarray(mask, dtype=bool))[None]
    logp = masked_log_softmax(logits[:, -1].double(), m)[0].numpy()
    a = int(np.argmax(logp)) if greedy else int(sample_masked(logp[None], rng)[0])
    return a, float(logp[a]), float(values[0, -1])


@dataclass
class Trajectory:
    actions: list[int] = field(default_factory=list)
    masks: list[np.ndarray] = field(default_factory=list)
    log_probs: list[float] = field(default_factory=list)
    values: list[float] = field(default_factory=list)
    base_rewards: list[float] = field(default_factory=list)
    shaped: np.ndarray | None = None
    r_bars: np.ndarray | None = None
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def terminal_reward(self) -> float:
        return self.base_rewards[-1]


@dataclass
class Batch:
    episodes: list[Trajectory]

    @property
    def n_steps(self) -> int:
        return sum(len(e) for e in self.episodes)

    def mean_length(self) -> float:
        return float(np.mean([len(e) for e in self.episodes]))

    def mean_terminal_reward(self) -> float:
        return float(np.mean([e.terminal_reward for e in self.episodes]))


def finish_episode(ep: Trajectory, shaper: Shaper, tracker: AverageTracker | None,
                   gamma: float = 1.0, lam: float = 0.95) -> None:
    """Shaped rewards, per-step r_bar, and centered GAE advantages."""
    T = len(ep)
    f = shaper.episode(ep.actions)
    ep.shaped = np.array([shape(ep.base_rewards[t], f[t], t == T - 1) for t in range(T)])
    r_bars = np.zeros(T)
    if tracker is not None:
        for t in range(T):
            r_bars[t] = tracker.r_bar
            tracker.update(float(ep.shaped[t]))
    ep.r_bars = r_bars
    v = np.asarray(ep.values, dtype=float)
    adv = np.zeros(T)
    running = 0.0
    for t in reversed(range(T)):
        v_next = gamma * v[t + 1] if t + 1 < T else 0.0
        delta = centered_delta(ep.shaped[t], r_bars[t], v_next, v[t])
        running = delta + gamma * lam * running
        adv[t] = running
    ep.advantages = adv
    ep.returns = adv + v


@torch.no_grad()
def rollout(model: PolicyModel, envs: Sequence[FactorEnv], shaper: Shaper,
            tracker: AverageTracker | None, n_steps: int, rng: np.random.Generator,
            gamma: float = 1.0, lam: float = 0.95, greedy: bool = False) -> Batch:
    """Run the envs in lock-step until ``n_steps`` steps are collected.

    No new episode starts once the budget is met, and episodes in flight are
    finished, so every returned trajectory is complete.  Episodes are
    post-processed in the order they end.
    """
    was_training = model.training
    model.eval()
    n = len(envs)
    for env in envs:
        env.reset()
    open_eps = [Trajectory() for _ in range(n)]
    active = np.ones(n, dtype=bool)
    prev = torch.full((n,), model.beg, dtype=torch.long)
    state = None
    taken = 0
    done_eps: list[Trajectory] = []
    while active.any():
        logits, values, state = model(prev[:, None], state)
        masks = np.stack([env.legal_actions() if active[i] else np.ones(model.n_tokens, bool)
                          for i, env in enumerate(envs)])
        logp = masked_log_softmax(logits[:, 0].double(), torch.from_numpy(masks)).numpy()
        actions = np.argmax(logp, axis=-1) if greedy else sample_masked(logp, rng)
        vals = values[:, 0].numpy()
        reset_rows = []
        for i in np.flatnonzero(active):
            a = int(actions[i])
            ep = open_eps[i]
            ep.actions.append(a)
            ep.masks.append(masks[i])
            ep.log_probs.append(float(logp[i, a]))
            ep.values.append(float(vals[i]))
            _, r, done = envs[i].step(a)
            ep.base_rewards.append(float(r))
            taken += 1
            prev[i] = a
            if done:
                finish_episode(ep, shaper, tracker, gamma, lam)
                done_eps.append(ep)
                if taken < n_steps:
                    envs[i].reset()
                    open_eps[i] = Trajectory()
                    reset_rows.append(i)
                else:
                    active[i] = False
        if reset_rows:
            idx = torch.tensor(reset_rows)
            prev[idx] = model.beg
            state = tuple(s.clone() for s in state)
            for s in state:
                s[:, idx] = 0.0
    model.train(was_training)
    return Batch(done_eps)


def _pad_batch(episodes: Sequence[Trajectory], beg: int, n_tokens: int):
    B = len(episodes)
    T = max(len(e) for e in episodes)
    inputs = np.full((B, T), beg, dtype=np.int64)
    actions = np.zeros((B, T), dtype=np.int64)
    masks = np.ones((B, T, n_tokens), dtype=bool)
    valid = np.zeros((B, T), dtype=bool)
    old_logp = np.zeros((B, T))
    adv = np.zeros((B, T))
    ret = np.zeros((B, T))
    for b, e in enumerate(episodes):
        L = len(e)
        inputs[b, 1:L] = e.actions[:-1]
        actions[b, :L] = e.actions
        masks[b, :L] = np.stack(e.masks)
        valid[b, :L] = True
        old_logp[b, :L] = e.log_probs
        adv[b, :L] = e.advantages
        ret[b, :L] = e.returns
    as_t = torch.from_numpy
    return (as_t(inputs), as_t(actions), as_t(masks), as_t(valid),
            as_t(old_logp).float(), as_t(adv).float(), as_t(ret).float())


def ppo_losses(model: PolicyModel, episodes: Sequence[Trajectory], clip: float = 0.2,
               vf_coef: float = 0.5, ent_coef: float = 0.01):
    """Total loss and diagnostics for one minibatch of whole episodes."""
    inputs, actions, masks, valid, old_logp, adv, ret = _pad_batch(episodes, model.beg, model.n_tokens)
    logits, values, _ = model(inputs)
    logp_all = masked_log_softmax(logits, masks)
    logp = logp_all.gather(-1, actions[..., None]).squeeze(-1)
    ratio = torch.exp(logp - old_logp)
    unclipped = ratio * adv
    clipped = torch.clamp(ratio, 1.0 - clip, 1.0 + clip) * adv
    n = valid.sum()
    surrogate = (torch.minimum(unclipped, clipped) * valid).sum() / n
    value_loss = (((values - ret) ** 2) * valid).sum() / n
    # masked entries hold -inf; zero them before the product so 0 * -inf never appears
    plogp = logp_all.exp() * logp_all.masked_fill(~masks, 0.0)
    entropy = (-plogp.sum(-1) * valid).sum() / n
    loss = -surrogate + vf_coef * value_loss - ent_coef * entropy
    with torch.no_grad():
        kl = ((old_logp - logp) * valid).sum() / n
    return loss, {"surrogate": surrogate.item(), "value_loss": value_loss.item(),
                  "entropy": entropy.item(), "kl": kl.item()}


def ppo_update(model: PolicyModel, optimizer: torch.optim.Optimizer, batch: Batch, rng: np.random.Generator,
               clip: float = 0.2, epochs: int = 4, minibatch_steps: int = 512, vf_coef: float = 0.5,
               ent_coef: float = 0.01) -> dict[str, float]:
    """Clipped-surrogate epochs over whole-episode minibatches.

    On a non-finite gradient the parameters and optimizer state are rolled
    back to their values before the call and NonFiniteGradient is raised.
    """
    if not batch.episodes:
        raise ValueError("empty batch")
    saved = (copy.deepcopy(model.state_dict()), copy.deepcopy(optimizer.state_dict()))
    model.train()
    lengths = np.array([len(e) for e in batch.episodes])
    per_mb = max(1, int(round(len(lengths) * minibatch_steps / lengths.sum())))
    stats: dict[str, list[float]] = {}
    for _ in range(epochs):
        order = rng.permutation(len(batch.episodes))
        for lo in range(0, len(order), per_mb):
            mb = [batch.episodes[i] for i in order[lo:lo + per_mb]]
            loss, info = ppo_losses(model, mb, clip, vf_coef, ent_coef)
            optimizer.zero_grad()
            loss.backward()
            grads = [p.grad for p in model.parameters() if p.grad is not None]
            if not all(bool(torch.isfinite(g).all()) for g in grads):
                model.load_state_dict(saved[0])
                optimizer.load_state_dict(saved[1])
                raise NonFiniteGradient("non-finite gradient in PPO update")
            optimizer.step()
            for k, v in info.items():
                stats.setdefault(k, []).append(v)
    return {k: float(np.mean(v)) for k, v in stats.items()}


def check_loss(model: nn.Module, inputs: torch.Tensor, masks: torch.Tensor, actions: torch.Tensor,
               weights: torch.Tensor) -> torch.Tensor:
    """Scalar used by :func:`grad_check`: weighted log-probs plus values."""
    logits, values, _ = model(inputs)
    logp = masked_log_softmax(logits, masks).gather(-1, actions[..., None]).squeeze(-1)
    return (weights * logp).sum() + (weights * values).sum()


def grad_check(model: nn.Module, perturbation: float = 1e-5, directions: int = 4, seed: int = 0,
               batch: int = 3, length: int = 6, tol_skip: float = 1e-10) -> float:
    """Worst relative error between autograd and central differences.

    Runs on a float64 copy in eval mode.  For each parameter tensor a few
    unit directions within that tensor are probed, comparing the projected
    analytic gradient with a central difference along the direction.  Each
    direction is a random unit vector plus the unit gradient, renormalised:
    a purely random direction in a large tensor projects the gradient down
    to the level of float64 rounding in the loss.  Directions along which
    both derivatives vanish are skipped.
    """
    g = torch.Generator().manual_seed(seed)
    m = copy.deepcopy(model).double().eval()
    n_tokens = m.n_tokens
    inputs = torch.randint(0, n_tokens + 1, (batch, length), generator=g)
    masks = torch.rand((batch, length, n_tokens), generator=g) < 0.6
    masks[..., 0] = True
    actions = torch.zeros((batch, length), dtype=torch.long)
    for b in range(batch):
        for t in range(length):
            legal = torch.nonzero(masks[b, t]).flatten()
            actions[b, t] = legal[torch.randint(len(legal), (1,), generator=g)]
    weights = torch.randn((batch, length), generator=g, dtype=torch.float64)

    def loss() -> float:
        return float(check_loss(m, inputs, masks, actions, weights))

    params = [p for p in m.parameters() if p.requires_grad]
    m.zero_grad()
    check_loss(m, inputs, masks, actions, weights).backward()
    # parameters the loss never touches have no .grad; their derivative is 0
    analytic = [torch.zeros_like(p) if p.grad is None else p.grad.detach().clone() for p in params]

    worst = 0.0
    with torch.no_grad():
        for p, grad in zip(params, analytic):
            orig = p.detach().clone()
            for _ in range(directions):
                d = torch.randn(p.shape, generator=g, dtype=torch.float64)
                d /= d.norm()
                gnorm = grad.norm()
                if gnorm > 0:
                    # half along the gradient keeps the projection above float noise
                    d = d + grad / gnorm
                    d /= d.norm()
                p.copy_(orig + perturbation * d)
                up = loss()
                p.copy_(orig - perturbation * d)
                down = loss()
                p.copy_(orig)
                numeric = (up - down) / (2 * perturbation)
                exact = float((grad * d).sum())
                scale = max(abs(numeric), abs(exact))
                if scale < tol_skip:
                    continue
                worst = max(worst, abs(numeric - exact) / scale)
    return worst
