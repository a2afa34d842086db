"""Training loop, data splits, checkpoints and pool evaluation."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import pandas as pd
import torch

from .centering import AverageTracker
from .config import ConfigError, RunConfig, from_dict, to_dict
from .expr import parse_rpn, rpn_text, tokenize
from .factor_pool import FactorPool, write_pool_export
from .market_data import (DegenerateConfig, Panel, TargetMatrix, forward_returns, load_panel,
                          load_targets, synth_panel)
from .mdp_env import FactorEnv
from .metrics import NoValidDays
from .policy import PolicyModel, ppo_update, rollout
from .shaping import DemoIndex, build_demo_index, load_demo_index, make_shaper
from .tokens import Vocabulary, load_vocabulary

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
METRICS_COLUMNS = ("step", "train_ic", "valid_ic", "valid_rank_ic", "mean_episode_length", "r_bar")
REPORT_COLUMNS = ("split", "ic", "rank_ic", "n_factors", "status")


class CheckpointVersionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Splits:
    train: range
    valid: range
    test: range


def builtin_demos_path() -> Path:
    return Path(str(resources.files("alphaforge") / "data" / "alpha101_demos.txt"))


def _bound(panel: Panel, value: str) -> int:
    try:
        frac = float(value)
    except ValueError:
        return int(panel.dates.searchsorted(pd.Timestamp(value), "left"))
    if not 0.0 < frac < 1.0:
        raise ConfigError(f"split fraction must lie in (0, 1), got {value}")
    return int(round(frac * panel.n_days))


def resolve_splits(panel: Panel, cfg: RunConfig) -> Splits:
    """Train/valid/test day ranges.

    The first ``split.warmup`` days only feed lookbacks, and the last
    ``horizon`` days of each segment are purged because their targets reach
    into the next segment.
    """
    h = cfg.data_horizon
    train_end = _bound(panel, cfg.split_train_end)
    valid_end = _bound(panel, cfg.split_valid_end)
    splits = Splits(range(cfg.split_warmup, train_end - h), range(train_end, valid_end - h),
                    range(valid_end, panel.n_days - h))
    for name in ("train", "valid", "test"):
        if len(getattr(splits, name)) < 2:
            raise ConfigError(f"{name} split is empty after warmup and purging")
    return splits


def _as_rpn(text: str) -> str:
    words = text.split()
    return text if words and words[-1] == "SEP" else text + " SEP"


def load_data(cfg: RunConfig, vocab: Vocabulary) -> tuple[Panel, TargetMatrix]:
    if cfg.data_source == "csv":
        panel = load_panel(cfg.data_path, cfg.data_missing)
        if cfg.data_targets_path:
            return panel, load_targets(cfg.data_targets_path, panel, cfg.data_horizon)
        return panel, forward_returns(panel, cfg.data_horizon)
    planted = parse_rpn(tokenize(_as_rpn(cfg.data_planted), vocab), vocab) if cfg.data_planted else None
    try:
        return synth_panel(cfg.data_seed, cfg.data_n_assets, cfg.data_n_days, planted,
                           cfg.data_noise_std, cfg.data_horizon, cfg.data_start)
    except DegenerateConfig as exc:
        raise ConfigError(str(exc)) from None


def load_demos(cfg: RunConfig, vocab: Vocabulary) -> DemoIndex | None:
    if cfg.shaping_kind == "none":
        return None
    path = builtin_demos_path() if cfg.shaping_demos_path == "builtin" else Path(cfg.shaping_demos_path)
    return load_demo_index(path, vocab)


def pool_scores(pool: FactorPool, days: range) -> tuple[float, float]:
    """(mean IC, mean rank IC) of the pool's combination on ``days``; NaN if undefined."""
    if len(pool) == 0:
        return math.nan, math.nan
    try:
        return pool.score(days), pool.score(days, rank=True)
    except NoValidDays:
        return math.nan, math.nan


def _fmt(x: float) -> str:
    return "nan" if not math.isfinite(x) else repr(float(x))


class Trainer:
    """One seeded training run; artifacts go to ``out_dir`` when given."""

    def __init__(self, cfg: RunConfig, seed: int, out_dir: Path | None = None,
                 demos: DemoIndex | None = None):
        self.cfg = cfg
        self.seed = seed
        self.out_dir = out_dir
        self.vocab = load_vocabulary(exclude=cfg.vocab_exclude)
        self.panel, self.targets = load_data(cfg, self.vocab)
        self.splits = resolve_splits(self.panel, cfg)
        self.pool = FactorPool(self.panel, self.targets, self.splits.train, cfg.pool_capacity,
                               cfg.pool_lr, cfg.pool_steps, cfg.pool_nan_tolerance, self.vocab)
        self.envs = [FactorEnv(self.pool, max_len=cfg.vocab_max_len) for _ in range(cfg.policy_n_envs)]
        self.demos = demos if demos is not None else load_demos(cfg, self.vocab)
        self.shaper = make_shaper(cfg.shaping_kind, self.demos, self.vocab, cfg.rl_gamma,
                                  cfg.vocab_max_len, cfg.shaping_encoding)
        self.tracker = AverageTracker(cfg.centering_beta) if cfg.centering_enabled else None
        torch.manual_seed(seed)
        self.model = PolicyModel(len(self.vocab), cfg.policy_embed, cfg.policy_hidden, 2,
                                 cfg.policy_dropout)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=cfg.policy_lr)
        self.rng = np.random.default_rng(seed)
        self.steps = 0
        self.next_eval = cfg.train_eval_interval
        self.rows: list[dict] = []
        self._lengths: list[int] = []

    # -- evaluation ------------------------------------------------------------

    def metrics_row(self) -> dict:
        train_ic, _ = pool_scores(self.pool, self.splits.train)
        valid_ic, valid_rank = pool_scores(self.pool, self.splits.valid)
        return {"step": self.steps, "train_ic": train_ic, "valid_ic": valid_ic, "valid_rank_ic": valid_rank,
                "mean_episode_length": float(np.mean(self._lengths)) if self._lengths else math.nan,
                "r_bar": self.tracker.r_bar if self.tracker is not None else 0.0}

    def _append_metrics(self, row: dict) -> None:
        self.rows.append(row)
        if self.out_dir is None:
            return
        path = self.out_dir / "metrics.csv"
        new = not path.exists()
        with open(path, "a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(METRICS_COLUMNS)
            w.writerow([row["step"]] + [_fmt(row[c]) for c in METRICS_COLUMNS[1:]])

    # -- loop ------------------------------------------------------------------

    def train(self) -> list[dict]:
        cfg = self.cfg
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            metrics = self.out_dir / "metrics.csv"
            if self.steps == 0 and metrics.exists():
                metrics.unlink()
        t0 = time.monotonic()
        while self.steps < cfg.train_steps:
            batch = rollout(self.model, self.envs, self.shaper, self.tracker,
                            min(cfg.policy_batch_steps, cfg.train_steps - self.steps), self.rng,
                            cfg.rl_gamma, cfg.rl_lam)
            self.steps += batch.n_steps
            self._lengths.extend(len(e) for e in batch.episodes)
            stats = ppo_update(self.model, self.optimizer, batch, self.rng, cfg.policy_clip,
                               cfg.policy_epochs, cfg.policy_minibatch_steps, cfg.policy_vf_coef,
                               cfg.policy_ent_coef)
            if self.steps >= self.next_eval or self.steps >= cfg.train_steps:
                while self.next_eval <= self.steps:
                    self.next_eval += cfg.train_eval_interval
                row = self.metrics_row()
                self._lengths = []
                self._append_metrics(row)
                log.info("step %d valid_ic %.4f pool %d kl %.4f (%.0fs)", self.steps, row["valid_ic"],
                         len(self.pool), stats["kl"], time.monotonic() - t0)
                if math.isfinite(row["valid_ic"]) and row["valid_ic"] >= cfg.train_stop_valid_ic:
                    break
        if self.out_dir is not None:
            self.save_checkpoint(self.out_dir / "checkpoint.pt")
            write_pool_export(self.pool.records(), self.out_dir / "pool.csv")
        return self.rows

    def first_crossing(self, threshold: float) -> int | None:
        for row in self.rows:
            if math.isfinite(row["valid_ic"]) and row["valid_ic"] >= threshold:
                return row["step"]
        return None

    # -- checkpoints -----------------------------------------------------------

    def state(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "config": to_dict(self.cfg),
            "seed": self.seed,
            "steps": self.steps,
            "next_eval": self.next_eval,
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "r_bar": self.tracker.r_bar if self.tracker is not None else None,
            "numpy_rng": self.rng.bit_generator.state,
            "torch_rng": torch.get_rng_state(),
            "pool": {"rpn": [rpn_text(e.key, self.vocab) for e in self.pool.entries],
                     "weights": [float(w) for w in self.pool.weights]},
        }

    def save_checkpoint(self, path: Path) -> None:
        tmp = path.with_suffix(".tmp")
        torch.save(self.state(), tmp)
        tmp.replace(path)

    @classmethod
    def from_checkpoint(cls, path: str | Path, out_dir: Path | None = None,
                        cfg: RunConfig | None = None) -> "Trainer":
        """Resume a run; ``cfg`` replaces the saved config (e.g. a larger step budget)."""
        ckpt = read_checkpoint(path)
        trainer = cls(cfg if cfg is not None else from_dict(ckpt["config"]), ckpt["seed"], out_dir)
        trainer.model.load_state_dict(ckpt["model"])
        trainer.optimizer.load_state_dict(ckpt["optimizer"])
        if trainer.tracker is not None and ckpt["r_bar"] is not None:
            trainer.tracker.r_bar = float(ckpt["r_bar"])
        trainer.rng.bit_generator.state = ckpt["numpy_rng"]
        torch.set_rng_state(ckpt["torch_rng"])
        trainer.pool.restore(ckpt["pool"]["rpn"], ckpt["pool"]["weights"])
        trainer.steps = ckpt["steps"]
        trainer.next_eval = ckpt["next_eval"]
        return trainer


def read_checkpoint(path: str | Path) -> dict:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    version = ckpt.get("version") if isinstance(ckpt, dict) else None
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionMismatch(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    return ckpt


def restore_pool(ckpt: dict) -> tuple[FactorPool, Splits]:
    """Rebuild the checkpoint's pool with its saved weights (no refit)."""
    cfg = from_dict(ckpt["config"])
    vocab = load_vocabulary(exclude=cfg.vocab_exclude)
    panel, targets = load_data(cfg, vocab)
    splits = resolve_splits(panel, cfg)
    pool = FactorPool(panel, targets, splits.train, cfg.pool_capacity, cfg.pool_lr, cfg.pool_steps,
                      cfg.pool_nan_tolerance, vocab)
    pool.restore(ckpt["pool"]["rpn"], ckpt["pool"]["weights"])
    return pool, splits


def evaluation_report(ckpt: dict) -> list[dict]:
    """Test-range IC and rank IC of the frozen pool."""
    pool, splits = restore_pool(ckpt)
    ic, rank = pool_scores(pool, splits.test)
    if len(pool) == 0:
        status = "empty-pool"
    elif not math.isfinite(ic):
        status = "no-valid-days"
    else:
        status = "ok"
    return [{"split": "test", "ic": ic, "rank_ic": rank, "n_factors": len(pool), "status": status}]


def write_report(rows: list[dict], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow([r["split"], _fmt(r["ic"]), _fmt(r["rank_ic"]), r["n_factors"], r["status"]])


def seed_demo_index(vocab: Vocabulary, lines: list[str]) -> DemoIndex:
    """Index from in-memory RPN lines (used by tests and benchmarks)."""
    return build_demo_index([tokenize(_as_rpn(l), vocab) for l in lines], vocab)
