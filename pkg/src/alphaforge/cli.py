"""Command line entry point: ``alphaforge {train,eval,synth,export-pool}``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import torch

from .config import ConfigError, RunConfig, dump_config, load_config
from .factor_pool import NonFiniteLoss, write_pool_export
from .market_data import DataError, write_panel_csv, write_targets_csv
from .policy import NonFiniteGradient
from .shaping import EmptyDemoSet, UnparseableDemo
from .tokens import load_vocabulary
from .trainer import (CheckpointVersionMismatch, Trainer, evaluation_report, load_data, load_demos,
                      read_checkpoint, restore_pool, write_report)

log = logging.getLogger("alphaforge")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


def _configure_threads() -> None:
    raw = os.environ.get("ALPHAFORGE_THREADS")
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise ConfigError(f"ALPHAFORGE_THREADS must be an integer, got {raw!r}") from None
        if n < 1:
            raise ConfigError("ALPHAFORGE_THREADS must be >= 1")
        torch.set_num_threads(n)


def _attach_log(out_dir: Path) -> logging.Handler:
    # timestamps live only in this sidecar file so other artifacts stay byte-stable
    handler = logging.FileHandler(out_dir / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(handler)
    return handler


def _resolve(args) -> tuple[RunConfig, Path]:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, run_seeds=(args.seed,))
    out = Path(args.out) if args.out else Path(cfg.run_out)
    return cfg, out


def cmd_train(args) -> int:
    cfg, out = _resolve(args)
    vocab = load_vocabulary(exclude=cfg.vocab_exclude)
    demos = load_demos(cfg, vocab)  # fail on a bad demo file before any compute
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(dump_config(cfg))
    handler = _attach_log(out)
    try:
        if args.checkpoint:
            trainer = Trainer.from_checkpoint(args.checkpoint, out, cfg if args.config else None)
            print(f"resuming at step {trainer.steps}")
            trainer.train()
            return EXIT_OK
        for seed in cfg.run_seeds:
            run_dir = out / f"seed_{seed}"
            trainer = Trainer(cfg, seed, run_dir, demos)
            rows = trainer.train()
            last = rows[-1] if rows else None
            if last is not None:
                print(f"seed {seed}: step {last['step']} valid_ic {last['valid_ic']:.4f} "
                      f"pool {len(trainer.pool)} -> {run_dir}")
    finally:
        logging.getLogger().removeHandler(handler)
        handler.close()
    return EXIT_OK


def _checkpoint_arg(args) -> str:
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    return args.checkpoint


def cmd_eval(args) -> int:
    ckpt = read_checkpoint(_checkpoint_arg(args))
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    rows = evaluation_report(ckpt)
    write_report(rows, out / "report.csv")
    for r in rows:
        print(f"{r['split']}: ic {r['ic']:.4f} rank_ic {r['rank_ic']:.4f} factors {r['n_factors']} ({r['status']})")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg, out = _resolve(args)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, data_seed=args.seed)
    if cfg.data_source != "synthetic":
        raise ConfigError("synth needs data.source = synthetic")
    panel, targets = load_data(cfg, load_vocabulary(exclude=cfg.vocab_exclude))
    out.mkdir(parents=True, exist_ok=True)
    write_panel_csv(panel, out / "panel.csv")
    write_targets_csv(panel, targets, out / "targets.csv")
    print(f"wrote {panel.n_assets} assets x {panel.n_days} days to {out}")
    return EXIT_OK


def cmd_export_pool(args) -> int:
    ckpt = read_checkpoint(_checkpoint_arg(args))
    pool, _ = restore_pool(ckpt)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    write_pool_export(pool.records(), out / "pool.csv")
    print(f"exported {len(pool)} factors to {out / 'pool.csv'}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "synth": cmd_synth, "export-pool": cmd_export_pool}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="alphaforge", description="Formulaic alpha factor mining.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--checkpoint", help="checkpoint file")
        p.add_argument("--seed", type=int, help="overrides run.seeds (data.seed for synth)")
        p.add_argument("--out", help="output directory")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _configure_threads()
        return COMMANDS[args.command](args)
    except (ConfigError, EmptyDemoSet, UnparseableDemo) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointVersionMismatch, DataError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NonFiniteGradient, NonFiniteLoss) as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
