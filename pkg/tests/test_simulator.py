import math

import numpy as np
import pytest

from hypermerton import closed_policies as cp
from hypermerton import discount as d
from hypermerton import market as mk
from hypermerton import simulator as sim
from hypermerton import soph_solver as ss
from hypermerton.errors import ConfigError

from conftest import BARRO, EXP_MKT, MIX, MKT

LOG_CONST = cp.closed_form_policy(mk.LogUtility(1.0), cp.ConstantRate(0.1), d.Constant(0.1), MKT, 1.0, 1001)


def test_spec_validation():
    with pytest.raises(ConfigError):
        sim.SimulationSpec(0, 10)
    with pytest.raises(ConfigError):
        sim.SimulationSpec(10, 10, antithetic=True, block_size=7)
    with pytest.raises(ConfigError):
        sim.SimulationSpec.from_json({"n_paths": 10, "n_steps": 10, "paths": 3})


def test_zero_rule_grows_at_riskless_rate():
    rule = sim.ProportionalRule(2.0, 0.0, np.zeros(1))
    res = sim.simulate(rule, MKT, sim.SimulationSpec(1000, 64, seed=1, W0=3.0))
    exact = 3.0 * math.exp(0.03 * 2.0)
    assert np.max(np.abs(res.terminal_W / exact - 1)) < 1e-10
    t, m = sim.mean_wealth_ode(rule, MKT, 3.0)
    assert m[-1] == pytest.approx(exact, rel=1e-10)


def test_seed_repeat_is_bitwise_and_thread_independent():
    spec = sim.SimulationSpec(5000, 32, seed=42, block_size=1024)
    a = sim.simulate(LOG_CONST, MKT, spec)
    b = sim.simulate(LOG_CONST, MKT, spec)
    c = sim.simulate(LOG_CONST, MKT, spec, threads=4)
    for x in (b, c):
        assert a.terminal_W.tobytes() == x.terminal_W.tobytes()
        assert a.mean_W.tobytes() == x.mean_W.tobytes()
        assert a.std_c.tobytes() == x.std_c.tobytes()
    other = sim.simulate(LOG_CONST, MKT, sim.SimulationSpec(5000, 32, seed=43, block_size=1024))
    assert other.terminal_W.tobytes() != a.terminal_W.tobytes()


def test_mean_matches_ode_log():
    res = sim.simulate(LOG_CONST, MKT, sim.SimulationSpec(50_000, 128, seed=5))
    _, m = sim.mean_wealth_ode(LOG_CONST, MKT, 1.0)
    mean, se = res.terminal_mean()
    assert abs(mean - m[-1]) < 3 * se


def test_mean_matches_ode_exponential():
    sol = ss.solve_exp_sophisticated(BARRO, EXP_MKT, 1.0, 2.0, 1.0)
    pol = sol.to_policy(EXP_MKT)
    res = sim.simulate(pol, EXP_MKT, sim.SimulationSpec(20_000, 128, seed=9))
    _, m = sim.mean_wealth_ode(pol, EXP_MKT, 1.0)
    mean, se = res.terminal_mean()
    assert abs(mean - m[-1]) < 3 * se
    assert res.bankrupt[-1] == 0 and np.any(res.terminal_W < 0)   # CARA wealth may go negative


def test_constant_propensity_ode_is_exact():
    rule = sim.ProportionalRule(1.5, 0.2, np.array([0.8]))
    _, m = sim.mean_wealth_ode(rule, MKT, 2.0)
    assert m[-1] == pytest.approx(2.0 * math.exp((0.03 + 0.8 * 0.05 - 0.2) * 1.5), rel=1e-10)


def test_zero_bequest_mean_ends_at_zero():
    pol = cp.closed_form_policy(mk.LogUtility(0.0), cp.NAIVE, MIX, MKT, 2.0, 201)
    t, m = sim.mean_wealth_ode(pol, MKT, 1.0, n_points=21)
    assert m[-1] == 0.0 and np.all(m[:-1] > 0)


def test_antithetic_pairs():
    plain = sim.simulate(LOG_CONST, MKT, sim.SimulationSpec(20_000, 64, seed=3))
    anti = sim.simulate(LOG_CONST, MKT, sim.SimulationSpec(20_000, 64, seed=3, antithetic=True))
    m0, s0 = plain.terminal_mean()
    m1, s1 = anti.terminal_mean()
    assert abs(m0 - m1) < 3 * math.hypot(s0, s1)
    assert s1 < s0
    W = anti.terminal_W
    assert np.corrcoef(W[0::2], W[1::2])[0, 1] < -0.9


def test_bankruptcy_is_absorbed_and_counted():
    rule = sim.ProportionalRule(1.0, 0.0, np.array([60.0]))
    res = sim.simulate(rule, MKT, sim.SimulationSpec(2000, 16, seed=2))
    assert res.bankrupt[-1] > 0
    assert np.all(np.diff(res.bankrupt) >= 0)
    assert res.diagnostics["bankrupt_paths"] == res.bankrupt[-1]
    dead = res.terminal_W[res.terminal_W <= 1e-12]
    assert dead.size == res.bankrupt[-1] and np.all(dead > 0)


def test_csv_and_path_dump(tmp_path):
    spec = sim.SimulationSpec(10, 4, seed=0, keep_paths=True)
    res = sim.simulate(LOG_CONST, MKT, spec)
    res.to_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "t,mean_W,std_W,mean_c,std_c,bankrupt_count" and len(lines) == 6
    res.dump_paths(tmp_path / "p.bin")
    rec = sim.read_path_dump(tmp_path / "p.bin")
    assert rec.shape == (50, 4)
    assert rec[7, 0] == 1 and rec[7, 1] == 2 and rec[7, 2] == res.paths_W[1, 2]
    assert np.array_equal(rec[rec[:, 1] == 4, 2], res.terminal_W)


def test_weak_convergence_first_order():
    # EM bias of E[W(T)] is linear in dt; compare against the exact mean ODE
    _, m = sim.mean_wealth_ode(LOG_CONST, MKT, 1.0)
    err, se = [], []
    for n in (64, 128, 256):
        mean, s = sim.simulate(LOG_CONST, MKT, sim.SimulationSpec(1_000_000, n, seed=100 + n)).terminal_mean()
        err.append(mean - m[-1])
        se.append(s)
    dt = np.array([1 / 64, 1 / 128, 1 / 256])
    err, se = np.array(err), np.array(se)
    C = np.sum(err * dt / se**2) / np.sum(dt**2 / se**2)   # weighted fit err = C dt
    assert np.all(np.abs(err - C * dt) < 3 * se)
    assert abs(err[0]) > abs(err[2])


def _realized_consumption(agent, T=10.0, a=1.0):
    pol = cp.closed_form_policy(mk.LogUtility(a), agent, MIX, MKT, T, 1001)
    return sim.simulate(pol, MKT, sim.SimulationSpec(20_000, 100, seed=77))


def test_naive_realized_consumption_exceeds_precommitment_at_all_later_times():
    # stated invariant: equal at t=0, naive mean consumption strictly higher afterwards
    p = _realized_consumption(cp.PRECOMMITMENT)
    n = _realized_consumption(cp.NAIVE)
    assert n.mean_c[0] == pytest.approx(p.mean_c[0], rel=1e-12)
    assert np.all(n.mean_c[1:] > p.mean_c[1:])


def test_naive_realized_consumption_crosses_precommitment():
    # what holds: naive consumes more early, runs wealth down, and falls below before T
    p = _realized_consumption(cp.PRECOMMITMENT)
    n = _realized_consumption(cp.NAIVE)
    diff = n.mean_c - p.mean_c
    assert diff[0] == pytest.approx(0.0, abs=1e-14)
    assert np.all(diff[1:50] > 0)
    assert diff[-1] < 0
    # first step shares the t=0 decision, so wealth separates from step 2
    assert n.mean_W[1] == p.mean_W[1]
    assert np.all(n.mean_W[2:] < p.mean_W[2:])
