import numpy as np
import pytest
from hypothesis import settings, strategies as st

from hypermerton import discount as d
from hypermerton import market as mk

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

MIX = d.ExpMixture((0.5, 0.5), (0.05, 0.15))
BARRO = d.BarroExp(0.05, 0.05, 1.0)
MKT = mk.MarketModel.single(0.03, 0.08, 0.2)       # M = 0.0625, ratio 1.25
EXP_MKT = mk.MarketModel.single(0.05, 0.10, 0.2)   # same M, mu0 = 0.05


@pytest.fixture
def mix():
    return MIX


@pytest.fixture
def barro():
    return BARRO


@pytest.fixture
def mkt():
    return MKT


@pytest.fixture
def exp_mkt():
    return EXP_MKT


rates = st.floats(0.005, 0.5)


@st.composite
def mixtures(draw):
    k = draw(st.integers(1, 4))
    w = np.array(draw(st.lists(st.floats(0.05, 1.0), min_size=k, max_size=k)))
    r = draw(st.lists(rates, min_size=k, max_size=k))
    return d.ExpMixture(tuple(w / w.sum()), tuple(r))


@st.composite
def barros(draw):
    return d.BarroExp(draw(rates), draw(st.floats(0.0, 0.3)), draw(st.floats(0.1, 3.0)))


@st.composite
def tabulated(draw, nonincreasing=False):
    n = draw(st.integers(2, 6))
    steps = draw(st.lists(st.floats(0.1, 3.0), min_size=n - 1, max_size=n - 1))
    times = np.concatenate([[0.0], np.cumsum(steps)])
    vals = np.array(draw(st.lists(st.floats(0.0, 0.4), min_size=n, max_size=n)))
    if nonincreasing:
        vals = np.sort(vals)[::-1]
    return d.Tabulated(tuple(times), tuple(vals))


nonincreasing_models = st.one_of(st.builds(d.Constant, rates), barros(), mixtures(), tabulated(nonincreasing=True))
any_models = st.one_of(st.builds(d.Constant, rates), barros(), mixtures(), tabulated())


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, note = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {note}")
