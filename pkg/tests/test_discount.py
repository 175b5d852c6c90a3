import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hypermerton import discount as d
from hypermerton.errors import DomainError

from conftest import BARRO, MIX, any_models, nonincreasing_models


def test_rate_examples():
    assert d.Constant(0.1).rate(5.0) == 0.1
    assert BARRO.rate(0.0) == pytest.approx(0.10, abs=1e-15)
    assert abs(MIX.rate(200.0) - 0.05) < 1e-6
    assert MIX.long_run_rate() == 0.05


def test_factor_examples():
    assert d.Constant(0.1).factor(0.0) == 1.0
    assert d.Constant(0.1).factor(2.0) == pytest.approx(math.exp(-0.2), rel=1e-15)
    assert round(d.Constant(0.1).factor(2.0), 6) == 0.818731
    # exp(-0.05 - 0.05 (1 - e^-1)) = 0.92163498561...; the six-digit figure 0.921634 is truncated
    assert BARRO.factor(1.0) == pytest.approx(0.9216349856129563, rel=1e-15)
    assert abs(BARRO.factor(1.0) - 0.921634) < 1e-6
    assert BARRO.factor(1.0) == pytest.approx(BARRO.factor_by_quadrature(1.0), rel=1e-10)


def test_factor_integral_examples():
    assert d.Constant(0.1).factor_integral(0, 10) == pytest.approx((1 - math.exp(-1)) / 0.1, rel=1e-14)
    # 0.5(1-e^-0.5)/0.05 + 0.5(1-e^-1.5)/0.15 = 6.5242595357...
    assert MIX.factor_integral(0, 10) == pytest.approx(6.524259535712233, rel=1e-14)
    assert abs(MIX.factor_integral(0, 10) - 6.524261) < 2e-6
    # frozen: 0.5(1-e^-0.25)/0.05 + 0.5(1-e^-0.75)/0.15
    assert MIX.factor_integral(0, 5) == pytest.approx(3.9707703268, abs=1e-9)
    for m in (d.Constant(0.1), BARRO, MIX):
        assert m.factor_integral(3.0, 3.0) == 0.0
    assert MIX.factor_integral(0, math.inf) == pytest.approx(10 + 10 / 3, rel=1e-13)


def test_factor_integral_against_quadrature():
    assert BARRO.factor_integral(0.5, 7.0) == pytest.approx(d.quad_factor_integral(BARRO, 0.5, 7.0), rel=1e-10)
    assert MIX.factor_integral(0.5, 7.0) == pytest.approx(d.quad_factor_integral(MIX, 0.5, 7.0), rel=1e-10)


@pytest.mark.parametrize("call", [
    lambda: MIX.rate(-1.0),
    lambda: MIX.factor(-0.1),
    lambda: MIX.factor_integral(2.0, 1.0),
    lambda: d.ExpMixture((0.6, 0.6), (0.1, 0.2)),
    lambda: d.ExpMixture((0.5, 0.5), (0.1, -0.2)),
    lambda: d.Constant(-0.1),
])
def test_domain_errors(call):
    with pytest.raises(DomainError):
        call()


def test_tabulated_linear_and_flat_extrapolation():
    m = d.Tabulated((0.0, 1.0, 2.0), (0.2, 0.1, 0.1))
    assert m.rate(0.5) == pytest.approx(0.15)
    assert m.rate(50.0) == pytest.approx(0.1)
    assert m.factor(2.0) == pytest.approx(math.exp(-(0.15 + 0.1)), rel=1e-14)
    assert m.factor(2.0) == pytest.approx(m.factor_by_quadrature(2.0), rel=1e-10)


@given(any_models)
def test_json_round_trip(model):
    again = d.from_json(d.to_json(model))
    for tau in (0.0, 0.7, 4.0):
        assert again.factor(tau) == model.factor(tau)


@given(any_models)
def test_theta_zero_is_one(model):
    assert model.factor(0.0) == 1.0


@given(any_models, st.lists(st.floats(0, 50), min_size=2, max_size=30))
def test_theta_nonincreasing(model, taus):
    taus = np.sort(taus)
    th = np.array([model.factor(x) for x in taus])
    assert np.all(np.diff(th) <= 1e-12)


@given(nonincreasing_models, st.floats(0, 40), st.floats(0, 40))
def test_subadditivity(model, s, t):
    assert model.is_nonincreasing(s + t + 1)
    assert model.factor(s) * model.factor(t) <= model.factor(s + t) + 1e-12


@given(st.one_of(st.builds(d.Constant, st.floats(0.005, 0.5)), st.builds(d.BarroExp, st.floats(0.005, 0.5),
                                                                          st.floats(0, 0.3), st.floats(0.1, 3))),
       st.floats(0, 30))
def test_closed_form_matches_quadrature(model, tau):
    assert model.factor(tau) == pytest.approx(model.factor_by_quadrature(tau), rel=1e-9)


@given(st.floats(0, 30), st.floats(0, 30))
def test_mixture_integral_exact(t0, dt):
    assert MIX.factor_integral(t0, t0 + dt) == pytest.approx(d.quad_factor_integral(MIX, t0, t0 + dt),
                                                             rel=1e-10, abs=1e-13)
