import math

import numpy as np
import pytest

from hypermerton import closed_policies as cp
from hypermerton import discount as d
from hypermerton import market as mk
from hypermerton import mpe_oracle as mo
from hypermerton import soph_solver as ss
from hypermerton.errors import ConfigError, DomainError

from conftest import BARRO, EXP_MKT, MIX, MKT

FLAT = mk.MarketModel.single(0.03, 0.03, 0.2)   # no excess return: riskless problem


def _run(discount, market, utility, T, N, mode="sophisticated", rho=None, **kw):
    pb = mo.Problem(discount, market, utility, T, 1.0)
    return mo.backward_induction(pb, mo.MPEGrid.build(utility, market, 1.0, N, **kw), mode, rho)


@pytest.fixture(scope="module")
def det_run():
    return _run(MIX, FLAT, mk.LogUtility(1.0), 1.0, 16)


def test_grid_defaults():
    g = mo.MPEGrid.build(mk.LogUtility(), MKT, 2.0, 8)
    assert g.wealth_nodes.size == 201
    assert g.wealth_nodes[0] == pytest.approx(2.0 * math.exp(-6), rel=1e-13)
    assert g.wealth_nodes[-1] == pytest.approx(2.0 * math.exp(6), rel=1e-13)
    assert g.wealth_nodes[100] == 2.0
    ge = mo.MPEGrid.build(mk.ExponentialUtility(1.0, 2.0), EXP_MKT, 1.0, 8)
    assert ge.wealth_nodes.size == 401 and ge.wealth_nodes[0] == -10.0 and ge.wealth_nodes[-1] == 10.0
    assert not ge.log_coordinate
    with pytest.raises(ConfigError):
        mo.MPEGrid.build(mk.LogUtility(), MKT, 1.0, 1)
    with pytest.raises(ConfigError):
        mo.MPEGrid.build(mk.LogUtility(), MKT, 1.0, 8, q=2)


def test_hermite_rule_moments():
    x, w = mo.hermite_rule(7, 2)
    assert w.sum() == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_allclose(w @ x, 0.0, atol=1e-14)
    np.testing.assert_allclose((w[:, None, None] * x[:, :, None] * x[:, None, :]).sum(0), np.eye(2), atol=1e-13)
    assert w @ x[:, 0] ** 4 == pytest.approx(3.0, rel=1e-13)


def test_deterministic_sub_oracle(det_run):
    for j in (0, 5, 15):
        ref = mo.deterministic_log_consumption(MIX, 0.03, 1.0, 1.0, 16, j, 1.0)
        assert det_run.consumption_at(j, 1.0) == pytest.approx(ref, rel=1e-6)
    assert np.max(np.abs(det_run.exposure[:, 80:121])) < 1e-6


def test_terminal_condition_and_h_consistency(det_run):
    W = det_run.grid.wealth_nodes
    assert np.array_equal(det_run.V[-1], np.log(W))
    assert np.array_equal(det_run.H, np.log(det_run.c))


def test_constant_rate_degenerates_to_classical_dp():
    s = _run(d.Constant(0.1), MKT, mk.LogUtility(1.0), 1.0, 8)
    c = _run(d.Constant(0.1), MKT, mk.LogUtility(1.0), 1.0, 8, mode="classical", rho=0.1)
    assert np.max(np.abs(s.V - c.V)) < 1e-12
    # the argmax of a flat maximum only resolves to ~sqrt(machine eps)
    assert np.max(np.abs(s.c / c.c - 1)) < 1e-6


def test_constant_rate_convergence_to_merton():
    ref = 1 / cp.log_constant_alpha(0.1, 1.0, 0.0, 1.0)
    pb = mo.Problem(d.Constant(0.1), MKT, mk.LogUtility(1.0), 1.0)
    rows, res = mo.convergence_study(pb, [32, 64], reference=ref)
    assert rows[1]["error"] < 2e-2
    assert 1.6 <= rows[1]["ratio"] <= 2.4
    assert abs(rows[1]["richardson"] / ref - 1) < rows[1]["error"] / 10
    # portfolio share is the Merton ratio up to O(eps)
    w = res[1].weights[0, 100, 0]
    assert w == pytest.approx(1.25, rel=2e-2)
    assert res[1].diagnostics["boundary_contact_fraction"] < 0.01


def test_quadrature_refinement(det_run):
    stage = _run(MIX, MKT, mk.LogUtility(1.0), 1.0, 4)
    W = np.array([0.5, 1.0, 2.0])
    c = np.array([stage.consumption_at(1, x) for x in W])
    w = np.full((3, 1), 1.25)
    f7 = stage.stage_objective(1, W, c, w)
    f9 = stage.stage_objective(1, W, c, w, q=9)
    assert np.max(np.abs(f9 - f7)) < 1e-8


def test_extract_policy_blend_and_hull():
    stage = _run(MIX, MKT, mk.LogUtility(1.0), 1.0, 4)
    c0, w0 = mo.extract_policy(stage, 0.25, 1.0)
    assert c0 == stage.c[1, 100]
    assert w0[0] == stage.exposure[1, 100, 0]
    cm, _ = mo.extract_policy(stage, 0.375, 1.0)
    assert cm == pytest.approx(0.5 * (stage.c[1, 100] + stage.c[2, 100]), rel=1e-14)
    with pytest.raises(DomainError):
        mo.extract_policy(stage, 0.1, 1e4)
    with pytest.raises(DomainError):
        mo.extract_policy(stage, 0.9, 1.0)


def test_csv_and_diagnostics(tmp_path):
    stage = _run(MIX, MKT, mk.LogUtility(1.0), 1.0, 2)
    stage.to_csv(tmp_path / "o.csv")
    lines = (tmp_path / "o.csv").read_text().splitlines()
    assert lines[0] == "j,t,W,c,w_1,V,H"
    assert len(lines) == 1 + 2 * 201
    stage.write_diagnostics(tmp_path / "d.json", {"note": 1})
    assert "boundary_contact_fraction" in (tmp_path / "d.json").read_text()


def test_power_precommit_recursion_matches_closed_form():
    g = mk.PowerUtility(0.5, 1.0)
    pb = mo.Problem(MIX, MKT, g, 10.0)
    ref = cp.power_precommit_consumption(MIX, MKT, 0.5, 1.0, 5.0, 10.0, 1.0)
    vals = []
    for N in (32, 64):
        res = mo.backward_induction(pb, mo.MPEGrid.build(g, MKT, 1.0, N), mode="precommit")
        vals.append(mo.extract_policy(res, 5.0, 1.0)[0])
    assert abs(mo.richardson(*vals) / ref - 1) < 5e-3


def test_exponential_sophisticated_against_solver():
    u = mk.ExponentialUtility(1.0, 2.0)
    pb = mo.Problem(BARRO, EXP_MKT, u, 1.0)
    rows, _ = mo.convergence_study(pb, [16, 32])
    c_star = rows[-1]["richardson"]
    beta0 = mk.beta_exp(EXP_MKT, 0.0, 1.0)
    alpha_oracle = c_star - beta0 * 1.0 + math.log(2.0 * beta0)
    alpha_solver = ss.solve_exp_sophisticated(BARRO, EXP_MKT, 1.0, 2.0, 1.0).alpha(0.0)
    assert abs(alpha_oracle / alpha_solver - 1) < 1e-2
