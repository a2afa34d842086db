import csv
import dataclasses
import math

import numpy as np
import pytest
import torch

from alphaforge import cli
from alphaforge.config import ConfigError, RunConfig, dump_config, load_config, parse_config
from alphaforge.factor_pool import read_pool_export
from alphaforge.market_data import load_panel, synth_panel
from alphaforge.policy import NonFiniteGradient
from alphaforge.trainer import (METRICS_COLUMNS, Trainer, evaluation_report, read_checkpoint,
                                resolve_splits)
from conftest import PLANT, tree_of

TINY = """\
data.n_assets = 8
data.n_days = 200
data.planted = close 5 Delta
data.noise_std = 0.5
split.warmup = 30
pool.capacity = 3
policy.batch_steps = 64
policy.minibatch_steps = 32
policy.n_envs = 4
policy.embed = 8
policy.hidden = 16
train.steps = {steps}
train.eval_interval = 64
"""


def write_cfg(tmp_path, name="run.cfg", steps=256, extra=""):
    path = tmp_path / name
    path.write_text(TINY.format(steps=steps) + extra)
    return str(path)


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestConfig:
    def test_defaults(self):
        cfg = load_config(None)
        assert cfg.rl_gamma == 1.0 and cfg.centering_beta == 2e-3 and cfg.policy_clip == 0.2
        assert cfg.policy_batch_steps == 2048 and cfg.policy_epochs == 4 and cfg.train_eval_interval == 2000

    def test_round_trip(self, tmp_path):
        cfg = parse_config(TINY.format(steps=10) + "run.seeds = 0, 1, 2\nshaping.kind = tlrs\n")
        assert cfg.run_seeds == (0, 1, 2)
        assert parse_config(dump_config(cfg)) == cfg

    @pytest.mark.parametrize("text", [
        "data.bogus = 1", "bogus = 1", "data.n_assets = many", "data.n_assets = 3\ndata.n_assets = 4",
        "centering.beta = 0", "rl.gamma = 1.5", "shaping.kind = magic", "centering.enabled = maybe",
        "no equals sign",
    ])
    def test_rejects(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_missing_demo_file(self, tmp_path):
        with pytest.raises(ConfigError):
            parse_config(f"shaping.kind = tlrs\nshaping.demos_path = {tmp_path / 'absent.txt'}\n")

    def test_comments(self):
        assert parse_config("# heading\nrl.gamma = 0.5  # half\n").rl_gamma == 0.5


def test_splits_disjoint_and_purged():
    cfg = RunConfig(data_n_assets=4, data_n_days=300)
    panel, _ = synth_panel(0, 4, 300)
    s = resolve_splits(panel, cfg)
    assert s.train.start == cfg.split_warmup
    # each segment's targets (horizon days ahead) stay inside the segment
    assert s.train.stop + cfg.data_horizon <= s.valid.start
    assert s.valid.stop + cfg.data_horizon <= s.test.start
    assert s.test.stop + cfg.data_horizon <= panel.n_days


class TestTrain:
    def test_artifacts_and_determinism(self, tmp_path):
        cfg = write_cfg(tmp_path)
        assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
        assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
        a, b = tmp_path / "a", tmp_path / "b"
        for name in ("seed_0/metrics.csv", "seed_0/pool.csv", "config.resolved"):
            assert (a / name).read_bytes() == (b / name).read_bytes()
        assert (a / "run.log").exists()
        table = rows(a / "seed_0" / "metrics.csv")
        assert tuple(table[0]) == METRICS_COLUMNS
        steps = [int(r["step"]) for r in table]
        assert steps == sorted(steps) and steps[-1] >= 256
        assert parse_config((a / "config.resolved").read_text()) == load_config(cfg)
        read_pool_export(a / "seed_0" / "pool.csv")

    def test_seed_override_and_sweep(self, tmp_path):
        cfg = write_cfg(tmp_path, steps=64, extra="run.seeds = 0, 1\n")
        cli.main(["train", "--config", cfg, "--out", str(tmp_path / "sweep")])
        assert (tmp_path / "sweep/seed_0/metrics.csv").exists() and (tmp_path / "sweep/seed_1/metrics.csv").exists()
        cli.main(["train", "--config", cfg, "--seed", "7", "--out", str(tmp_path / "one")])
        assert [p.name for p in (tmp_path / "one").glob("seed_*")] == ["seed_7"]

    def test_resume_matches_uninterrupted(self, tmp_path):
        full, half = write_cfg(tmp_path, "full.cfg", 256), write_cfg(tmp_path, "half.cfg", 128)
        cli.main(["train", "--config", full, "--out", str(tmp_path / "full")])
        cli.main(["train", "--config", half, "--out", str(tmp_path / "part")])
        part = tmp_path / "part" / "seed_0"
        assert cli.main(["train", "--config", full, "--checkpoint", str(part / "checkpoint.pt"),
                         "--out", str(part)]) == 0
        for name in ("metrics.csv", "pool.csv"):
            assert (part / name).read_bytes() == (tmp_path / "full/seed_0" / name).read_bytes()

    def test_missing_demos_no_compute(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, extra=f"shaping.kind = tlrs\nshaping.demos_path = {tmp_path / 'nope.txt'}\n")
        assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "x")]) == 2
        assert not (tmp_path / "x").exists()
        assert "config error" in capsys.readouterr().err

    def test_bad_demo_file(self, tmp_path):
        demos = tmp_path / "demos.txt"
        demos.write_text("close SEP\nAdd SEP\n")
        cfg = write_cfg(tmp_path, extra=f"shaping.kind = tlrs\nshaping.demos_path = {demos}\n")
        assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "x")]) == 2

    def test_numeric_abort_exit_code(self, tmp_path, monkeypatch):
        def boom(args):
            raise NonFiniteGradient("nan")
        monkeypatch.setitem(cli.COMMANDS, "train", boom)
        assert cli.main(["train"]) == 4

    def test_thread_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("ALPHAFORGE_THREADS", "zero")
        assert cli.main(["train", "--config", write_cfg(tmp_path)]) == 2
        monkeypatch.setenv("ALPHAFORGE_THREADS", "1")
        threads = torch.get_num_threads()
        try:
            assert cli.main(["synth", "--config", write_cfg(tmp_path), "--out", str(tmp_path / "s")]) == 0
            assert torch.get_num_threads() == 1
        finally:
            torch.set_num_threads(threads)


def planted_checkpoint(tmp_path, admit=True, noise="0.0"):
    cfg = load_config(write_cfg(tmp_path, steps=0))
    cfg = dataclasses.replace(cfg, data_noise_std=float(noise))
    trainer = Trainer(cfg, 0, tmp_path / "run")
    if admit:
        trainer.pool.admit(tree_of(PLANT))
    trainer.train()
    return tmp_path / "run" / "checkpoint.pt"


class TestEvalExport:
    def test_noiseless_plant(self, tmp_path):
        ckpt = planted_checkpoint(tmp_path)
        assert cli.main(["eval", "--checkpoint", str(ckpt)]) == 0
        report = rows(ckpt.parent / "report.csv")
        assert report[0]["status"] == "ok" and float(report[0]["ic"]) >= 0.9
        first = (ckpt.parent / "report.csv").read_bytes()
        cli.main(["eval", "--checkpoint", str(ckpt)])
        assert (ckpt.parent / "report.csv").read_bytes() == first

    def test_empty_pool(self, tmp_path):
        ckpt = planted_checkpoint(tmp_path, admit=False)
        report = evaluation_report(read_checkpoint(ckpt))
        assert report[0]["status"] == "empty-pool" and math.isnan(report[0]["ic"])
        out = tmp_path / "export"
        assert cli.main(["export-pool", "--checkpoint", str(ckpt), "--out", str(out)]) == 0
        assert (out / "pool.csv").read_text().strip() == "formula,rpn,weight,train_ic"

    def test_export_plant(self, tmp_path):
        ckpt = planted_checkpoint(tmp_path)
        cli.main(["export-pool", "--checkpoint", str(ckpt), "--out", str(tmp_path / "e")])
        (rec,) = read_pool_export(tmp_path / "e" / "pool.csv")
        assert rec["formula"] == "Delta(close, 5d)" and rec["rpn"] == "close 5 Delta SEP"

    def test_version_mismatch(self, tmp_path):
        ckpt = planted_checkpoint(tmp_path)
        state = torch.load(ckpt, weights_only=False)
        state["version"] = 99
        torch.save(state, ckpt)
        assert cli.main(["eval", "--checkpoint", str(ckpt)]) == 3
        assert cli.main(["export-pool", "--checkpoint", str(ckpt)]) == 3

    def test_missing_checkpoint(self, tmp_path):
        assert cli.main(["eval"]) == 2
        assert cli.main(["eval", "--checkpoint", str(tmp_path / "none.pt")]) == 3


class TestSynth:
    def test_round_trip(self, tmp_path):
        cfg = write_cfg(tmp_path)
        assert cli.main(["synth", "--config", cfg, "--out", str(tmp_path / "s")]) == 0
        panel, _ = synth_panel(0, 8, 200, tree_of(PLANT), 0.5)
        assert load_panel(tmp_path / "s" / "panel.csv").equals(panel, atol=1e-9)

    def test_seed_changes_panel(self, tmp_path):
        cfg = write_cfg(tmp_path)
        cli.main(["synth", "--config", cfg, "--seed", "1", "--out", str(tmp_path / "a")])
        cli.main(["synth", "--config", cfg, "--seed", "2", "--out", str(tmp_path / "b")])
        a, b = load_panel(tmp_path / "a/panel.csv"), load_panel(tmp_path / "b/panel.csv")
        assert not np.array_equal(a.data, b.data)

    def test_degenerate(self, tmp_path):
        path = tmp_path / "one.cfg"
        path.write_text(TINY.format(steps=1).replace("data.n_assets = 8", "data.n_assets = 1"))
        assert cli.main(["synth", "--config", str(path), "--out", str(tmp_path / "d")]) == 2
