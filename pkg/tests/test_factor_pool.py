import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from alphaforge.evaluator import evaluate
from alphaforge.expr import parse_rpn, tokenize
from alphaforge.factor_pool import (EXPORT_COLUMNS, EmptyPool, FactorPool, InvalidCandidate, NonFiniteLoss,
                                    read_pool_export, write_pool_export)
from alphaforge.market_data import TargetMatrix
from alphaforge.metrics import zscore_daily
from conftest import PLANT, tree_of

DAYS = range(60, 190)
CANDIDATES = ["close 5 Delta", "open 10 Mean", "volume 20 Std", "high low Sub", "vwap 10 Ref",
              "close open Div", "close 20 Max", "volume Log", "high 5 Delta", "close volume 10 Corr"]


def make_pool(planted_panel, capacity=10, targets=None, **kw):
    panel, t = planted_panel
    return FactorPool(panel, targets if targets is not None else t, DAYS, capacity, **kw)


def lstsq_weights(pool):
    """Least squares over the observed cells, solved directly."""
    y = pool.targets.values[DAYS.start:DAYS.stop]
    ok = np.isfinite(y)
    X = np.stack([e.values[ok] for e in pool.entries], axis=1)
    return np.linalg.lstsq(X, y[ok], rcond=None)[0]


def naive_gd(pool, w0, steps, lr):
    y = pool.targets.values[DAYS.start:DAYS.stop]
    ok = np.isfinite(y)
    X = np.stack([e.values[ok] for e in pool.entries], axis=1)
    w = w0.copy()
    for _ in range(steps):
        w = w - lr * 2.0 * X.T @ (X @ w - y[ok]) / ok.sum()
    return w


class TestCombination:
    def test_single_factor(self, planted_panel):
        pool = make_pool(planted_panel)
        pool.restore(["close 5 Delta SEP"], [1.0])
        np.testing.assert_array_equal(pool.combination(), pool.entries[0].values)

    def test_duplicate_halves(self, planted_panel):
        pool = make_pool(planted_panel)
        pool.restore(["close 5 Delta SEP", "close 5 Delta SEP"], [0.5, 0.5])
        np.testing.assert_allclose(pool.combination(), pool.entries[0].values, atol=1e-15)

    def test_naive_weighted_sum(self, planted_panel):
        pool = make_pool(planted_panel)
        rng = np.random.default_rng(0)
        w = rng.normal(size=4)
        pool.restore([c + " SEP" for c in CANDIDATES[:4]], w)
        got = pool.combination()
        vals = [e.values for e in pool.entries]
        for d in range(0, len(DAYS), 13):
            for i in range(got.shape[1]):
                assert got[d, i] == pytest.approx(sum(w[k] * vals[k][d, i] for k in range(4)), abs=1e-12)

    def test_other_days_recomputed(self, planted_panel):
        pool = make_pool(planted_panel)
        pool.restore(["close 5 Delta SEP"], [2.0])
        other = range(20, 40)
        want = 2.0 * zscore_daily(evaluate(tree_of(PLANT), planted_panel[0], other).values)
        np.testing.assert_allclose(pool.combination(other), want, atol=1e-14)

    def test_empty(self, planted_panel):
        with pytest.raises(EmptyPool):
            make_pool(planted_panel).combination()


class TestFit:
    def test_planted_weight_one(self, planted_panel):
        pool = make_pool(planted_panel)
        pool.restore(["close 5 Delta SEP"], [0.0])
        loss = pool.fit_weights()
        assert pool.weights[0] == pytest.approx(1.0, abs=1e-3)
        assert loss == pytest.approx(0.0, abs=1e-6)

    def test_zero_target(self, planted_panel):
        panel, t = planted_panel
        pool = make_pool(planted_panel, targets=TargetMatrix(np.zeros_like(t.values)))
        pool.restore(["close 5 Delta SEP"], [0.7])
        pool.fit_weights()
        assert pool.weights[0] == pytest.approx(0.0, abs=1e-3)

    def test_normal_equations(self, planted_panel):
        pool = make_pool(planted_panel)
        pool.restore(["open 10 Mean SEP", "high low Sub SEP"], [0.0, 0.0])
        pool.fit_weights()
        np.testing.assert_allclose(pool.weights, lstsq_weights(pool), atol=1e-2)
        pool.fit_weights(steps=20_000)
        np.testing.assert_allclose(pool.weights, lstsq_weights(pool), atol=1e-8)

    def test_matches_explicit_loop(self, planted_panel):
        pool = make_pool(planted_panel)
        w0 = np.array([0.3, -0.2, 0.1])
        pool.restore([c + " SEP" for c in CANDIDATES[:3]], w0)
        pool.fit_weights()
        np.testing.assert_allclose(pool.weights, naive_gd(pool, w0, 500, 1e-2), atol=1e-12)

    def test_loss_non_increasing(self, planted_panel):
        pool = make_pool(planted_panel)
        w0 = np.array([1.0, -1.0, 0.5, 0.2])
        pool.restore([c + " SEP" for c in CANDIDATES[:4]], w0)
        losses = []
        for k in range(0, 200, 5):
            pool.weights = w0.copy()
            losses.append(pool.fit_weights(steps=k))
        assert all(b <= a + 1e-15 for a, b in zip(losses, losses[1:]))

    def test_divergence_leaves_pool_unchanged(self, planted_panel):
        pool = make_pool(planted_panel, lr=10.0)
        pool.restore(["open 10 Mean SEP"], [0.0])
        with pytest.raises(NonFiniteLoss):
            pool.admit(tree_of("close 5 Delta SEP"))
        assert len(pool) == 1 and pool.weights.tolist() == [0.0]


class TestAdmit:
    def test_planted_reward_one(self, planted_panel):
        pool = make_pool(planted_panel)
        assert pool.admit(tree_of(PLANT)) == pytest.approx(1.0, abs=1e-6)

    def test_duplicate_unchanged(self, planted_panel):
        pool = make_pool(planted_panel)
        pool.admit(tree_of("open 10 Mean SEP"))
        r = pool.admit(tree_of("high low Sub SEP"))
        assert pool.admit(tree_of("high low Sub SEP")) == pytest.approx(r, abs=1e-6)
        assert len(pool) == 2

    def test_capacity_one_evicts_worse(self, planted_panel):
        pool = make_pool(planted_panel, capacity=1)
        pool.admit(tree_of("open 10 Mean SEP"))
        r = pool.admit(tree_of(PLANT))
        assert [e.tree for e in pool.entries] == [tree_of(PLANT)]
        assert r == pytest.approx(1.0, abs=1e-6)

    def test_invalid(self, planted_panel):
        pool = make_pool(planted_panel)
        with pytest.raises(InvalidCandidate):
            pool.admit(tree_of("close close Sub Log SEP"))
        with pytest.raises(InvalidCandidate):
            pool.admit(tree_of("close close Sub SEP"))  # every day degenerate
        assert len(pool) == 0

    @settings(max_examples=25)
    @given(st.lists(st.sampled_from(CANDIDATES), min_size=1, max_size=6, unique=True),
           st.sampled_from(CANDIDATES))
    def test_monotone_span_and_bounds(self, planted_panel, names, extra):
        pool = make_pool(planted_panel)
        for n in names:
            r = pool.admit(tree_of(n + " SEP"))
            assert -1.0 <= r <= 1.0
        best = pool.loss(lstsq_weights(pool))
        pool.restore([rpn for rpn in ([n + " SEP" for n in names] + [extra + " SEP"])],
                     np.zeros(len(names) + 1))
        assert pool.loss(lstsq_weights(pool)) <= best + 1e-12


class TestEvict:
    def pool_with(self, planted_panel, weights):
        pool = make_pool(planted_panel)
        pool.restore([c + " SEP" for c in CANDIDATES[:len(weights)]], weights)
        return pool

    def test_smallest_magnitude(self, planted_panel):
        pool = self.pool_with(planted_panel, [0.5, -0.01, 0.3])
        gone = pool.evict_weakest()
        assert gone.tree == tree_of(CANDIDATES[1] + " SEP")
        assert pool.weights.tolist() == [0.5, 0.3]

    def test_tie_oldest(self, planted_panel):
        pool = self.pool_with(planted_panel, [0.2, 0.9, -0.2])
        assert pool.evict_weakest().tree == tree_of(CANDIDATES[0] + " SEP")

    def test_single_entry(self, planted_panel):
        pool = self.pool_with(planted_panel, [0.4])
        pool.capacity = 0
        pool.evict_weakest()
        assert len(pool) == 0 and pool.weights.size == 0


class TestExport:
    def test_alpha101_line(self, planted_panel, tmp_path):
        pool = make_pool(planted_panel)
        pool.admit(parse_rpn(tokenize("BEG close open Sub high low Sub 0.001 Add Div SEP")))
        write_pool_export(pool.records(), tmp_path / "pool.csv")
        text = (tmp_path / "pool.csv").read_text()
        assert "Div(Sub(close, open), Add(Sub(high, low), 0.001))" in text

    def test_round_trip_fixpoint(self, planted_panel, tmp_path):
        pool = make_pool(planted_panel)
        for c in CANDIDATES[:5]:
            pool.admit(tree_of(c + " SEP"))
        first = tmp_path / "a.csv"
        write_pool_export(pool.records(), first)
        second = tmp_path / "b.csv"
        write_pool_export(read_pool_export(first), second)
        assert first.read_bytes() == second.read_bytes()

    def test_empty_header_only(self, tmp_path):
        write_pool_export([], tmp_path / "e.csv")
        assert (tmp_path / "e.csv").read_text().strip() == ",".join(EXPORT_COLUMNS)
