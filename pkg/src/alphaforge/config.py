"""Run configuration: a flat ``section.key = value`` text file."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .shaping import SHAPING_KINDS


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data
    data_source: str = "synthetic"  # synthetic | csv
    data_path: str = ""
    data_targets_path: str = ""
    data_missing: str = "reject"
    data_n_assets: int = 20
    data_n_days: int = 750
    data_planted: str = ""  # RPN of a planted factor for synthetic targets
    data_noise_std: float = 1.0
    data_horizon: int = 5
    data_seed: int = 0
    data_start: str = "2016-01-01"
    # splits: fractions of the panel or ISO dates
    split_train_end: str = "0.6"
    split_valid_end: str = "0.8"
    split_warmup: int = 60
    # vocabulary
    vocab_exclude: tuple[str, ...] = ()
    vocab_max_len: int = 20
    # shaping
    shaping_kind: str = "none"
    shaping_demos_path: str = "builtin"
    shaping_encoding: str = "id"
    # centering
    centering_enabled: bool = True
    centering_beta: float = 2e-3
    # reinforcement learning
    rl_gamma: float = 1.0
    rl_lam: float = 0.95
    # factor pool
    pool_capacity: int = 10
    pool_lr: float = 1e-2
    pool_steps: int = 500
    pool_nan_tolerance: float = 0.0
    # policy
    policy_lr: float = 3e-4
    policy_clip: float = 0.2
    policy_epochs: int = 4
    policy_batch_steps: int = 2048
    policy_minibatch_steps: int = 512
    policy_vf_coef: float = 0.5
    policy_ent_coef: float = 0.01
    policy_embed: int = 64
    policy_hidden: int = 128
    policy_dropout: float = 0.1
    policy_n_envs: int = 32
    # training
    train_steps: int = 200_000
    train_eval_interval: int = 2000
    train_stop_valid_ic: float = float("inf")  # stop once valid IC reaches this
    run_seeds: tuple[int, ...] = (0,)
    run_out: str = "runs"

    @property
    def seed(self) -> int:
        return self.run_seeds[0]


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _key_to_field(key: str) -> str:
    name = key.replace(".", "_")
    if key.count(".") != 1 or name not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    return name


def _field_to_key(name: str) -> str:
    section, _, rest = name.partition("_")
    return f"{section}.{rest}"


def _convert(name: str, raw: str) -> Any:
    default = _FIELDS[name].default
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if name == "run_seeds":
                return tuple(int(s) for s in items)
            return tuple(items)
    except ValueError:
        raise ConfigError(f"bad value for {_field_to_key(name)}: {raw!r}") from None
    return raw


def parse_config(text: str) -> RunConfig:
    values: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, value = (s.strip() for s in line.partition("="))
        name = _key_to_field(key)
        if name in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[name] = _convert(name, value)
    cfg = RunConfig(**values)
    validate(cfg)
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
        validate(cfg)
        return cfg
    return parse_config(Path(path).read_text())


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def validate(cfg: RunConfig) -> None:
    _check(cfg.data_source in ("synthetic", "csv"), f"data.source must be synthetic or csv, got {cfg.data_source!r}")
    if cfg.data_source == "csv":
        _check(bool(cfg.data_path), "data.path is required for csv data")
    _check(cfg.data_missing in ("reject", "drop"), "data.missing must be reject or drop")
    _check(cfg.data_horizon >= 1, "data.horizon must be >= 1")
    _check(cfg.shaping_kind in SHAPING_KINDS, f"shaping.kind must be one of {', '.join(SHAPING_KINDS)}")
    _check(cfg.shaping_encoding in ("id", "onehot"), "shaping.encoding must be id or onehot")
    if cfg.shaping_kind != "none" and cfg.shaping_demos_path != "builtin":
        _check(Path(cfg.shaping_demos_path).is_file(),
               f"shaping.demos_path {cfg.shaping_demos_path!r} does not exist")
    _check(0.0 < cfg.centering_beta <= 1.0, "centering.beta must lie in (0, 1]")
    _check(0.0 <= cfg.rl_gamma <= 1.0, "rl.gamma must lie in [0, 1]")
    _check(0.0 <= cfg.rl_lam <= 1.0, "rl.lam must lie in [0, 1]")
    _check(cfg.pool_capacity >= 1, "pool.capacity must be >= 1")
    _check(cfg.vocab_max_len >= 2, "vocab.max_len must be >= 2")
    _check(cfg.split_warmup >= 0, "split.warmup must be >= 0")
    for name in ("policy_epochs", "policy_batch_steps", "policy_minibatch_steps", "policy_n_envs",
                 "train_eval_interval", "policy_hidden", "policy_embed"):
        _check(getattr(cfg, name) >= 1, f"{_field_to_key(name)} must be >= 1")
    _check(cfg.train_steps >= 0, "train.steps must be >= 0")
    _check(len(cfg.run_seeds) >= 1, "run.seeds needs at least one seed")


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{_field_to_key(f.name)} = {_format(getattr(cfg, f.name))}\n"
                   for f in dataclasses.fields(cfg))


def to_dict(cfg: RunConfig) -> dict[str, Any]:
    return dataclasses.asdict(cfg)


def from_dict(values: dict[str, Any]) -> RunConfig:
    unknown = set(values) - set(_FIELDS)
    if unknown:
        raise ConfigError(f"unknown config fields: {', '.join(sorted(unknown))}")
    cfg = RunConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in values.items()})
    validate(cfg)
    return cfg
