"""Comparative statics: propensities, long-horizon limits, equivalence tests, agent reports."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import integrate, optimize

from . import closed_policies as cp
from . import discount as disc
from . import mpe_oracle as mo
from .closed_policies import AgentKind, Policy
from .errors import DomainError, HypermertonError, TransversalityError, UnsupportedPolicyError
from .market import (
    ExponentialUtility,
    LogUtility,
    MarketModel,
    PowerUtility,
    UtilitySpec,
    beta_exp,
    delta_p,
    excess_quadratic,
)
from .soph_solver import SolverConfig, solve_exp_sophisticated, solve_log_sophisticated, solve_power_sophisticated

EQUIVALENCE_THRESHOLD = 1e-9
_QUAD = dict(epsabs=1e-14, epsrel=1e-12, limit=400)


def build_policy(utility: UtilitySpec, agent: AgentKind, discount, market: MarketModel, T: float,
                 config: SolverConfig = SolverConfig()) -> Policy:
    """Closed form where one exists, the fixed-point solver otherwise."""
    n = config.time_nodes
    if agent.name != "sophisticated":
        return cp.closed_form_policy(utility, agent, discount, market, T, n)
    if isinstance(utility, LogUtility):
        return solve_log_sophisticated(discount, utility.a, T, config).to_policy(market)
    if isinstance(utility, PowerUtility):
        return solve_power_sophisticated(discount, market, utility.gamma, utility.a, T, config).to_policy(market)
    return solve_exp_sophisticated(discount, market, utility.gamma, utility.a, T, config).to_policy(market)


def propensity(policy: Policy, t):
    """lambda(t) = c(W, t) / W for CRRA policies."""
    if isinstance(policy.utility, ExponentialUtility):
        raise UnsupportedPolicyError("exponential consumption is affine in W; no propensity")
    return policy.consumption(1.0, t)


# --- infinite horizon ---------------------------------------------------------------

@dataclass
class InfiniteHorizon:
    lambda_N: float
    lambda_S: float                  # equilibrium reading with the Ito growth term
    lambda_S_literal: float          # exponent built literally from mu0 + M/(1-gamma) - lambda
    long_run_rate: float
    delta: float
    gamma: float
    discount: object = field(repr=False)
    lambda_N_dual: float = float("nan")

    def lambda_P(self, t):
        """theta~(t)^{1/(1-gamma)} / int_t^inf theta~^{1/(1-gamma)}."""
        t = float(t)
        g = _tilted(self.discount, self.delta, self.gamma)
        tail, _ = integrate.quad(lambda s: g(s) / g(t), t, np.inf, **_QUAD)
        return 1.0 / tail

    def bounds(self):
        r0 = float(self.discount.rate(0.0))
        return ((self.long_run_rate - self.delta) / (1 - self.gamma), (r0 - self.delta) / (1 - self.gamma))

    def to_json(self):
        lo, hi = self.bounds()
        return {"lambda_N": self.lambda_N, "lambda_N_dual": self.lambda_N_dual,
                "lambda_S": self.lambda_S, "lambda_S_literal": self.lambda_S_literal,
                "long_run_rate": self.long_run_rate, "delta": self.delta, "gamma": self.gamma,
                "bounds": [lo, hi],
                "note": "lambda_S uses the Ito-corrected growth of E[W^gamma]; "
                        "lambda_S_literal uses mu0 + M/(1-gamma) - lambda as the exponent rate"}


def _tilted(discount, delta, gamma):
    """tau -> (theta(tau) e^{delta tau})^{1/(1-gamma)}, evaluated in log space."""
    k = 1.0 / (1.0 - gamma)
    return lambda s: math.exp(k * (delta * s - float(discount.cumulative_rate(s))))


def infinite_horizon_propensities(discount, market: Optional[MarketModel], utility: UtilitySpec) -> InfiniteHorizon:
    rbar = discount.long_run_rate()
    if isinstance(utility, LogUtility):
        gamma, d = 0.0, 0.0
    elif isinstance(utility, PowerUtility):
        if market is None:
            raise DomainError("power propensities need the market")
        gamma, d = utility.gamma, delta_p(market, utility.gamma)
    else:
        raise UnsupportedPolicyError("propensities are defined for log and power utility only")
    if not rbar > d:
        raise TransversalityError(f"long-run discount rate {rbar} must exceed delta_p = {d}")

    g = _tilted(discount, d, gamma)
    area, _ = integrate.quad(g, 0.0, np.inf, **_QUAD)
    if not np.isfinite(area) or area <= 0:
        raise TransversalityError("discount-factor integral diverges")
    lam_N = 1.0 / area
    excess_area, _ = integrate.quad(lambda s: (float(discount.rate(s)) - rbar) * g(s), 0.0, np.inf, **_QUAD)
    lam_N_dual = (rbar - d) / (1.0 - gamma - excess_area)

    if gamma == 0.0:
        lam_S = lam_S_literal = lam_N
    else:
        M = excess_quadratic(market)
        lam_S = _stationary_sophisticated(discount, rbar, d, gamma, d)
        lam_S_literal = _stationary_sophisticated(discount, rbar, d, gamma, gamma * (market.mu0 + M / (1 - gamma)))
    return InfiniteHorizon(lam_N, lam_S, lam_S_literal, rbar, d, gamma, discount, lam_N_dual)


def _stationary_sophisticated(discount, rbar, d, gamma, growth):
    """Root of lambda (1 - gamma - I(lambda)) = rbar - d,

    I(lambda) = int_0^inf theta(u) (r(u) - rbar) exp((growth - gamma lambda) u) du,
    the time-independent form of the sophisticated power equation.
    """
    def I(lam):
        k = growth - gamma * lam

        def f(u):
            return math.exp(k * u - float(discount.cumulative_rate(u))) * (float(discount.rate(u)) - rbar)
        val, _ = integrate.quad(f, 0.0, np.inf, **_QUAD)
        return val

    def F(lam):
        return lam * (1.0 - gamma - I(lam)) - (rbar - d)

    # admissible lambdas keep the integrand decaying: rbar - growth + gamma lambda > 0
    edge = (growth - rbar) / gamma if gamma != 0 else -np.inf
    lo_lim = max(1e-10, edge + 1e-8) if gamma > 0 else 1e-10
    hi_lim = edge - 1e-8 if gamma < 0 else 1e3
    base = (rbar - d) / (1 - gamma)
    grid = np.unique(np.clip(np.concatenate([base * np.geomspace(0.05, 20, 80)]), lo_lim, hi_lim))
    vals = []
    for lam in grid:
        try:
            vals.append(F(lam))
        except (OverflowError, ValueError):
            vals.append(np.nan)
    vals = np.array(vals)
    for k in range(grid.size - 1):
        if np.isfinite(vals[k]) and np.isfinite(vals[k + 1]) and vals[k] * vals[k + 1] <= 0:
            return optimize.brentq(F, grid[k], grid[k + 1], xtol=1e-15, rtol=1e-13)
    raise TransversalityError("no stationary sophisticated propensity found")


# --- observational equivalence (log) -----------------------------------------------

@dataclass
class EquivalenceVerdict:
    equivalent: bool
    max_deviation: float
    rho: float
    a: float


def observational_equivalence_log(discount, a: float, rho_candidate: float, T: float,
                                  n_grid: int = 201) -> EquivalenceVerdict:
    """Does the naive log coefficient equal a constant-rate Merton coefficient?

    Compares a theta(T-t) + int_0^{T-t} theta with (a - 1/rho) e^{-rho (T-t)} + 1/rho.
    """
    if not rho_candidate > 0:
        raise DomainError("candidate rate must be positive")
    if a < 0:
        raise DomainError("bequest weight must be >= 0")
    tau = np.linspace(0.0, T, n_grid)
    lhs = np.array([a * float(discount.factor(x)) + discount.factor_integral(0.0, x) for x in tau])
    rhs = (a - 1.0 / rho_candidate) * np.exp(-rho_candidate * tau) + 1.0 / rho_candidate
    dev = float(np.max(np.abs(lhs - rhs)))
    return EquivalenceVerdict(dev < EQUIVALENCE_THRESHOLD, dev, rho_candidate, a)


def two_exponential(weight: float, rho: float, a: float):
    """theta = w e^{-rho tau} + (1 - w) e^{-tau / a}, collapsing to one term at w in {0, 1}."""
    if weight >= 1.0:
        return disc.ExpMixture((1.0,), (rho,))
    if weight <= 0.0:
        return disc.ExpMixture((1.0,), (1.0 / a,))
    return disc.ExpMixture((weight, 1.0 - weight), (rho, 1.0 / a))


def equivalence_weight_search(rho: float, a: float, T: float, n_weights: int = 1001):
    """Brute-force scan of the mixture weight; returns (best weight, its deviation)."""
    best = (None, math.inf)
    for w in np.linspace(0.0, 1.0, n_weights):
        dev = observational_equivalence_log(two_exponential(w, rho, a), a, rho, T).max_deviation
        if dev < best[1]:
            best = (float(w), dev)
    return best


def effective_rate_power(lam: float, market: MarketModel, gamma: float) -> float:
    """Constant rate whose Merton propensity is lam: rho = (1-gamma) lam + delta_p."""
    return (1.0 - gamma) * lam + delta_p(market, gamma)


# --- agent comparison ----------------------------------------------------------------

@dataclass(frozen=True)
class ComparisonProblem:
    discount: object
    market: MarketModel
    utility: UtilitySpec
    T: float
    W0: float = 1.0
    constant_rho: Optional[float] = None


@dataclass(frozen=True)
class CompareConfig:
    agents: tuple = ("constant", "precommitment", "naive", "sophisticated")
    n_grid: int = 101
    solver: SolverConfig = SolverConfig()
    oracle_steps: Optional[tuple] = None      # (N, 2N) adds a Richardson oracle column
    fd_step: float = 1e-5


@dataclass
class ComparisonReport:
    t: np.ndarray
    consumption: dict          # agent -> c(W0, t) on the grid
    propensity: dict           # agent -> lambda(t) (CRRA only)
    weights: dict              # agent -> weight vector at (W0, 0)
    gaps: dict                 # "a|b" -> sup-norm consumption gap
    flags: dict                # check name -> {"holds": bool, ...}
    omissions: dict            # agent -> error message
    rows: list                 # (agent, rule, t, value)
    oracle: Optional[dict] = None

    @property
    def partial(self) -> bool:
        return bool(self.omissions)

    def to_json(self) -> dict:
        return {
            "t": self.t.tolist(),
            "consumption": {k: v.tolist() for k, v in self.consumption.items()},
            "propensity": {k: v.tolist() for k, v in self.propensity.items()},
            "weights": {k: v.tolist() for k, v in self.weights.items()},
            "gaps": self.gaps,
            "flags": self.flags,
            "omissions": self.omissions,
            "oracle": self.oracle,
            "partial": self.partial,
        }

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["agent", "rule", "t", "formula_value"])
            for agent, rule, t, v in self.rows:
                wr.writerow([agent, rule, f"{t:.17g}", f"{v:.17g}"])


def _agent_kind(name: str, problem: ComparisonProblem) -> AgentKind:
    if name == "constant":
        rho = problem.constant_rho if problem.constant_rho is not None else float(problem.discount.rate(0.0))
        return cp.ConstantRate(rho)
    return AgentKind(name)


def _witness(diff, t):
    k = int(np.argmin(diff))
    return float(t[k]), float(diff[k])


def compare_agents(problem: ComparisonProblem, config: CompareConfig = CompareConfig()) -> ComparisonReport:
    if not config.agents:
        raise DomainError("compare: agent list is empty")
    u = problem.utility
    crra = not isinstance(u, ExponentialUtility)
    T = problem.T
    t = np.linspace(0.0, T, config.n_grid)
    # zero log bequest leaves c undefined at T
    if isinstance(u, LogUtility) and u.a == 0:
        t = t[:-1]

    policies, omissions = {}, {}
    for name in config.agents:
        try:
            policies[name] = build_policy(u, _agent_kind(name, problem), problem.discount, problem.market, T,
                                          config.solver)
        except HypermertonError as exc:
            omissions[name] = f"{type(exc).__name__}: {exc}"

    consumption = {k: np.asarray(p.consumption(problem.W0, t), dtype=float) for k, p in policies.items()}
    prop = {k: np.asarray(propensity(p, t), dtype=float) for k, p in policies.items()} if crra else {}
    weights = {k: np.atleast_1d(p.weights(problem.W0, 0.0)).ravel() for k, p in policies.items()}

    names = list(policies)
    gaps = {}
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            gaps[f"{a}|{b}"] = float(np.max(np.abs(consumption[a] - consumption[b])))

    flags = {}
    if isinstance(u, LogUtility) and {"naive", "sophisticated"} <= set(policies):
        g = gaps.get("naive|sophisticated", gaps.get("sophisticated|naive"))
        flags["log_naive_equals_sophisticated"] = {"holds": g < 1e-10, "gap": g}
    if crra and {"precommitment", "naive"} <= set(policies):
        slack = prop["naive"] - prop["precommitment"]
        wt, ws = _witness(slack, t)
        flags["precommit_not_above_naive"] = {
            "holds": bool(np.all(slack >= -1e-12)),
            "applies": problem.discount.is_nonincreasing(T),
            "witness_t": wt, "min_slack": ws,
            "equal_at_t0": bool(abs(slack[0]) <= 1e-12),
        }
    if crra and policies:
        ref = next(iter(weights.values()))
        flags["portfolio_identical"] = {"holds": all(np.array_equal(w, ref) for w in weights.values())}
    if not crra and policies:
        bt = np.asarray(beta_exp(problem.market, policies[names[0]].alpha.t, T))
        dev = max(float(np.max(np.abs(p.beta.v - bt))) for p in policies.values())
        flags["beta_identical"] = {"holds": dev <= 1e-12, "max_deviation": dev}
        if {"precommitment", "naive"} <= set(policies):
            h = config.fd_step
            P = lambda s: cp.exp_precommit_alpha_at(problem.discount, problem.market, u, s, T)  # noqa: E731
            N = lambda s: cp.exp_naive_alpha_at(problem.discount, problem.market, u, s, T)  # noqa: E731
            p0, n0 = P(0.0), N(0.0)
            dP, dN = (P(h) - p0) / h, (N(h) - n0) / h
            flags["alpha_slope_order"] = {"holds": dP <= dN, "equal_at_t0": p0 == n0,
                                          "alpha_P0": p0, "alpha_N0": n0, "dP": dP, "dN": dN,
                                          "applies": problem.discount.is_nonincreasing(T)}

    rows = []
    for k, p in policies.items():
        for i, ti in enumerate(t):
            if crra:
                rows.append((k, "c/W", float(ti), float(prop[k][i])))
            else:
                rows.append((k, "c", float(ti), float(consumption[k][i])))
                rows.append((k, "alpha", float(ti), float(p.alpha(ti))))
                rows.append((k, "beta", float(ti), float(p.beta(ti))))
        for j, w in enumerate(weights[k]):
            rows.append((k, f"w_{j + 1}", 0.0, float(w)))

    oracle = None
    if config.oracle_steps and "sophisticated" in policies:
        oracle = _oracle_column(problem, config.oracle_steps, consumption["sophisticated"][0])

    return ComparisonReport(t, consumption, prop, weights, gaps, flags, omissions, rows, oracle)


def _oracle_column(problem: ComparisonProblem, steps, c_solver: float) -> dict:
    pb = mo.Problem(problem.discount, problem.market, problem.utility, problem.T, problem.W0)
    rows, _ = mo.convergence_study(pb, list(steps), reference=c_solver)
    extrap = rows[-1]["richardson"]
    return {"steps": list(steps), "c0_oracle": [r["c0"] for r in rows], "c0_richardson": extrap,
            "c0_solver": float(c_solver), "relative_gap": abs(extrap - c_solver) / abs(c_solver)}
