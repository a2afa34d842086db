import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from alphaforge.expr import parse_rpn, tokenize
from alphaforge.market_data import synth_panel

settings.register_profile("default", deadline=None, max_examples=100,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

PLANT = "close 5 Delta SEP"


def tree_of(text, vocab=None):
    if vocab is None:
        return parse_rpn(tokenize(text))
    return parse_rpn(tokenize(text, vocab), vocab)


@pytest.fixture(scope="session")
def small_panel():
    panel, targets = synth_panel(seed=3, n=8, L=120)
    return panel, targets


@pytest.fixture(scope="session")
def planted_panel():
    """Noiseless planted Delta(close, 5) panel."""
    return synth_panel(seed=11, n=12, L=200, planted=tree_of(PLANT), noise_std=0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance verdicts, keyed by criterion, echoed in the terminal summary
ACCEPTANCE: dict[str, str] = {}


def report(criterion: str, ok: bool, detail: str = "") -> None:
    line = f"{criterion} {'PASS' if ok else 'FAIL'}" + (f"  {detail}" if detail else "")
    ACCEPTANCE[criterion] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split("-")[1])):
        terminalreporter.write_line(ACCEPTANCE[key])
