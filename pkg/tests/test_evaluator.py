import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from alphaforge.evaluator import InsufficientHistory, evaluate, max_lookback
from alphaforge.expr import random_tree
from alphaforge.market_data import Panel, synth_panel
from conftest import tree_of


def naive_window(name, xs, ys=None):
    """Plain-Python reduction of one window ordered oldest -> today."""
    n = len(xs)
    if name == "Mean":
        return sum(xs) / n
    if name == "Sum":
        return sum(xs)
    if name in ("Var", "Std"):
        m = sum(xs) / n
        v = sum((x - m) ** 2 for x in xs) / n
        return v if name == "Var" else math.sqrt(v)
    if name == "Max":
        return max(xs)
    if name == "Min":
        return min(xs)
    if name == "Med":
        return sorted(xs)[(n - 1) // 2]
    if name == "Mad":
        m = sum(xs) / n
        return sum(abs(x - m) for x in xs) / n
    if name == "WMA":
        w = list(range(1, n + 1))
        return sum(wi * x for wi, x in zip(w, xs)) / sum(w)
    if name == "EMA":
        a = 2.0 / (n + 1)
        e = xs[0]
        for x in xs[1:]:
            e = a * x + (1 - a) * e
        return e
    mx, my = sum(xs) / n, sum(ys) / n
    cov = sum((x - mx) * (y - my) for x, y in zip(xs, ys)) / n
    if name == "Cov":
        return cov
    sx = math.sqrt(sum((x - mx) ** 2 for x in xs) / n)
    sy = math.sqrt(sum((y - my) ** 2 for y in ys) / n)
    if max(xs) == min(xs) or max(ys) == min(ys):
        return math.nan
    return cov / (sx * sy)


@pytest.fixture(scope="module")
def panel():
    return synth_panel(seed=5, n=4, L=90)[0]


def close_open(panel):
    return panel.feature("close"), panel.feature("open")


ROLLING = ["Mean", "Sum", "Std", "Var", "Max", "Min", "Med", "Mad", "WMA", "EMA"]


@pytest.mark.parametrize("name", ROLLING)
@pytest.mark.parametrize("span", [1, 5, 10])
def test_rolling_oracle(panel, name, span):
    days = range(30, 90)
    got = evaluate(tree_of(f"close {span} {name} SEP"), panel, days).values
    c = panel.feature("close")
    for r, l in enumerate(days):
        for i in range(panel.n_assets):
            want = naive_window(name, [c[k, i] for k in range(l - span + 1, l + 1)])
            assert got[r, i] == pytest.approx(want, rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("name", ["Cov", "Corr"])
def test_pair_oracle(panel, name):
    days = range(30, 90)
    got = evaluate(tree_of(f"close open 10 {name} SEP"), panel, days).values
    c, o = close_open(panel)
    for r, l in enumerate(days):
        for i in range(panel.n_assets):
            want = naive_window(name, list(c[l - 9:l + 1, i]), list(o[l - 9:l + 1, i]))
            assert got[r, i] == pytest.approx(want, rel=1e-12, abs=1e-12)


def test_ref_and_delta(panel):
    days = range(20, 90)
    c = panel.feature("close")
    ref = evaluate(tree_of("close 10 Ref SEP"), panel, days).values
    delta = evaluate(tree_of("close 5 Delta SEP"), panel, days).values
    for r, l in enumerate(days):
        np.testing.assert_array_equal(ref[r], c[l - 10])
        np.testing.assert_array_equal(delta[r], c[l] - c[l - 5])


@pytest.mark.parametrize("expr,fn", [
    ("close Abs", lambda c, o: abs(c)),
    ("close Log", lambda c, o: math.log(c)),
    ("close open Add", lambda c, o: c + o),
    ("close open Sub", lambda c, o: c - o),
    ("close open Mul", lambda c, o: c * o),
    ("close open Div", lambda c, o: c / o),
    ("close open Larger", lambda c, o: max(c, o)),
    ("close open Smaller", lambda c, o: min(c, o)),
    ("close open Sub Sign", lambda c, o: int(c > o) - int(c < o)),
    ("close 0.5 Pow", lambda c, o: float(c) ** 0.5),
])
def test_elementwise_oracle(panel, expr, fn):
    days = range(0, 90)
    got = evaluate(tree_of(expr + " SEP"), panel, days).values
    c, o = close_open(panel)
    for l in days:
        for i in range(panel.n_assets):
            assert got[l, i] == pytest.approx(fn(c[l, i], o[l, i]), rel=1e-12, abs=1e-12)


def test_identity_feature(panel):
    days = range(0, 90)
    np.testing.assert_array_equal(evaluate(tree_of("close SEP"), panel, days).values,
                                  panel.feature("close"))


def test_self_difference_is_zero(panel):
    fm = evaluate(tree_of("close close Sub SEP"), panel, range(0, 90))
    assert np.all(fm.values == 0.0)
    assert fm.valid and fm.shape == (90, panel.n_assets)


def test_failures_become_invalid(panel):
    days = range(0, 90)
    log0 = evaluate(tree_of("close close Sub Log SEP"), panel, days)
    assert not log0.valid and log0.nonfinite_fraction == 1.0
    div0 = evaluate(tree_of("close close close Sub Div SEP"), panel, days)
    assert not div0.valid
    tolerant = evaluate(tree_of("close close Sub Log SEP"), panel, days, nan_tolerance=1.0)
    assert tolerant.valid


def test_corr_constant_window_is_nan(panel):
    fm = evaluate(tree_of("close 1.0 10 Corr SEP"), panel, range(20, 30), nan_tolerance=1.0)
    assert np.isnan(fm.values).all()


class TestLookback:
    @pytest.mark.parametrize("expr,want", [
        ("close", 0),
        ("close 10 Ref", 10),
        ("close 10 Ref 5 Mean", 14),
        ("close 5 Delta", 5),
        ("close open 10 Corr", 9),
        ("close 10 Mean 20 Std close 5 Delta Add", 28),
    ])
    def test_values(self, expr, want):
        assert max_lookback(tree_of(expr + " SEP")) == want

    def test_insufficient_history(self, panel):
        with pytest.raises(InsufficientHistory) as info:
            evaluate(tree_of("close 10 Ref 5 Mean SEP"), panel, range(13, 20))
        assert info.value.required == 14
        evaluate(tree_of("close 10 Ref 5 Mean SEP"), panel, range(14, 20))

    def test_brute_force_trace(self, panel):
        # perturb one early day and find the first evaluated day that moves
        tree = tree_of("close 10 Ref 5 Mean SEP")
        base = evaluate(tree, panel, range(14, 90)).values
        data = panel.data.copy()
        data[:, panel.features.index("close"), 0] += 1.0
        bumped = Panel(panel.assets, panel.features, panel.dates, data)
        moved = evaluate(tree, bumped, range(14, 90)).values != base
        assert moved[0].all() and not moved[1:].any()


@given(st.integers(0, 2**32 - 1))
def test_locality_and_determinism(seed):
    panel = synth_panel(seed=7, n=3, L=140)[0]
    tree = random_tree(np.random.default_rng(seed), max_depth=3)
    lb = max_lookback(tree)
    if lb > 100:
        return
    l = 130
    full = evaluate(tree, panel, range(lb, 140), nan_tolerance=1.0).values
    again = evaluate(tree, panel, range(lb, 140), nan_tolerance=1.0).values
    np.testing.assert_array_equal(full, again)
    # the value at day l only reads days [l - lb, l]
    data = panel.data.copy()
    data[..., : l - lb] = 1e6
    data[..., l + 1:] = -1e6
    cut = Panel(panel.assets, panel.features, panel.dates, data)
    one = evaluate(tree, cut, range(l, l + 1), nan_tolerance=1.0).values[0]
    np.testing.assert_array_equal(one, full[l - lb])
