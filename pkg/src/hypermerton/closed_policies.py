"""Closed-form consumption/portfolio rules and the Policy container.

Coefficient conventions (all stored in ``Policy.alpha``):

* log:          c = W / alpha(t)
* power:        c = alpha(t)^(-1/(1-gamma)) W, alpha(T) = a
* exponential:  c = alpha(t) + beta(t) W - ln(a gamma beta(t)) / gamma

For power utility with terminal coefficient alpha(T) = a the Bernoulli
equation linearises in y = alpha^(1/(1-gamma)), whose terminal value is
a^(1/(1-gamma)); that is the quantity that enters every denominator below.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
from scipy import integrate
from scipy.interpolate import CubicSpline

from . import discount as disc
from .errors import BoundarySingularityError, DomainError, UnsupportedPolicyError
from .market import (
    ExponentialUtility,
    LogUtility,
    MarketModel,
    PowerUtility,
    UtilitySpec,
    beta_exp,
    beta_integral,
    delta_e,
    delta_p,
    excess_quadratic,
    merton_ratio,
    utility_from_json,
    utility_to_json,
)

DEFAULT_NODES = 1001
DEGENERATE_RATE = 1e-8
_QUAD = dict(epsabs=1e-13, epsrel=1e-12, limit=200)


# --- agents and grids ---------------------------------------------------------

@dataclass(frozen=True)
class AgentKind:
    name: str
    rho: Optional[float] = None

    def __post_init__(self):
        if self.name not in ("constant", "precommitment", "naive", "sophisticated"):
            raise DomainError(f"unknown agent kind {self.name!r}")
        if self.name == "constant" and (self.rho is None or not self.rho >= 0):
            raise DomainError("constant-rate agent needs rho >= 0")

    def to_json(self):
        return {"kind": self.name, "rho": self.rho} if self.name == "constant" else {"kind": self.name}

    @classmethod
    def from_json(cls, obj):
        return cls(obj["kind"], obj.get("rho"))


def ConstantRate(rho: float) -> AgentKind:
    return AgentKind("constant", float(rho))


PRECOMMITMENT = AgentKind("precommitment")
NAIVE = AgentKind("naive")
SOPHISTICATED = AgentKind("sophisticated")


@dataclass(frozen=True)
class Grid:
    """Values on a time grid, evaluated off-node by cubic interpolation."""

    t: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        v = np.asarray(self.v, dtype=float)
        if t.shape != v.shape or t.ndim != 1 or t.size < 2:
            raise DomainError("grid needs matching 1-d time and value arrays")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "v", v)

    @cached_property
    def _spline(self):
        return CubicSpline(self.t, self.v)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        span = self.t[-1] - self.t[0]
        if np.any(t < self.t[0] - 1e-12 * span) or np.any(t > self.t[-1] + 1e-12 * span):
            raise DomainError(f"t outside policy grid [{self.t[0]}, {self.t[-1]}]")
        t = np.clip(t, self.t[0], self.t[-1])
        # exact on nodes; spline only between them
        idx = np.searchsorted(self.t, t)
        idx = np.clip(idx, 0, self.t.size - 1)
        on_node = self.t[idx] == t
        out = np.where(on_node, self.v[idx], self._spline(t))
        return float(out) if out.ndim == 0 else out

    def to_json(self):
        return {"t": self.t.tolist(), "v": self.v.tolist()}

    @classmethod
    def from_json(cls, obj):
        return cls(np.asarray(obj["t"], dtype=float), np.asarray(obj["v"], dtype=float))


def time_grid(T: float, n_nodes: int = DEFAULT_NODES) -> np.ndarray:
    return np.linspace(0.0, T, n_nodes)


# --- the policy ---------------------------------------------------------------

@dataclass(frozen=True)
class Policy:
    utility: UtilitySpec
    agent: AgentKind
    portfolio_coeff: np.ndarray
    alpha: Grid
    horizon: float
    beta: Optional[Grid] = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "portfolio_coeff", np.asarray(self.portfolio_coeff, dtype=float))
        if isinstance(self.utility, ExponentialUtility) and self.beta is None:
            raise DomainError("exponential policies need a beta grid")

    def _check_t(self, t):
        if np.any(np.asarray(t) < -1e-12) or np.any(np.asarray(t) > self.horizon * (1 + 1e-12)):
            raise DomainError(f"t outside [0, {self.horizon}]")

    def consumption(self, W, t):
        self._check_t(t)
        return consumption_from_coefficients(self.utility, self.alpha(t), W,
                                             None if self.beta is None else self.beta(t))

    def propensity(self, t):
        if isinstance(self.utility, ExponentialUtility):
            raise UnsupportedPolicyError("exponential consumption is affine in W, not proportional")
        return self.consumption(1.0, t)

    def weights(self, W, t):
        """Portfolio shares; shape (..., m)."""
        self._check_t(t)
        W = np.asarray(W, dtype=float)
        if isinstance(self.utility, ExponentialUtility):
            if np.any(W == 0):
                raise ZeroDivisionError("exponential portfolio share undefined at W = 0")
            scale = 1.0 / (self.utility.gamma * np.asarray(self.beta(t)) * W)
            return np.multiply.outer(scale, self.portfolio_coeff)
        return np.broadcast_to(self.portfolio_coeff, W.shape + self.portfolio_coeff.shape).copy()

    def exposure(self, W, t):
        """Wealth held in each risky asset, w * W; regular at W = 0 for CARA."""
        self._check_t(t)
        W = np.asarray(W, dtype=float)
        if isinstance(self.utility, ExponentialUtility):
            amount = 1.0 / (self.utility.gamma * np.asarray(self.beta(t)))
            return np.multiply.outer(np.broadcast_to(amount, W.shape), self.portfolio_coeff)
        return np.multiply.outer(W, self.portfolio_coeff)

    @property
    def linear_in_wealth(self) -> bool:
        return not isinstance(self.utility, ExponentialUtility)

    def to_json(self) -> dict:
        out = {
            "utility": utility_to_json(self.utility),
            "agent": self.agent.to_json(),
            "horizon": self.horizon,
            "alpha": self.alpha.to_json(),
            "portfolio_coeff": self.portfolio_coeff.tolist(),
        }
        if self.beta is not None:
            out["beta"] = self.beta.to_json()
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "Policy":
        beta = Grid.from_json(obj["beta"]) if obj.get("beta") is not None else None
        return cls(utility_from_json(obj["utility"]), AgentKind.from_json(obj["agent"]),
                   np.asarray(obj["portfolio_coeff"], dtype=float), Grid.from_json(obj["alpha"]),
                   float(obj["horizon"]), beta)

    def write_table(self, path, t_values, W_values):
        """CSV with header t,W,c,w_1..w_m."""
        m = self.portfolio_coeff.size
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["t", "W", "c"] + [f"w_{i + 1}" for i in range(m)])
            for t in t_values:
                for W in W_values:
                    c = self.consumption(W, t)
                    w = np.atleast_1d(self.weights(W, t))
                    wr.writerow([f"{x:.17g}" for x in (t, W, c, *w)])


def consumption_from_coefficients(utility: UtilitySpec, alpha, W, beta=None):
    alpha = np.asarray(alpha, dtype=float)
    W = np.asarray(W, dtype=float)
    if isinstance(utility, LogUtility):
        with np.errstate(divide="ignore"):
            out = W / alpha
    elif isinstance(utility, PowerUtility):
        with np.errstate(divide="ignore"):
            out = np.power(alpha, -1.0 / (1.0 - utility.gamma)) * W
    else:
        beta = np.asarray(beta, dtype=float)
        g, a = utility.gamma, utility.a
        out = alpha + beta * W - np.log(a * g * beta) / g
    return float(out) if np.ndim(out) == 0 else out


def consumption_from_policy(policy: Policy, W, t):
    return policy.consumption(W, t)


def portfolio_rule(utility: UtilitySpec, market: MarketModel, t=None, W=1.0, T=None):
    """Risky-asset shares. Log/power ignore t, W and the discount model."""
    ratio = merton_ratio(market)
    if isinstance(utility, LogUtility):
        return ratio
    if isinstance(utility, PowerUtility):
        return ratio / (1.0 - utility.gamma)
    if W == 0:
        raise ZeroDivisionError("exponential portfolio share undefined at W = 0")
    if T is None:
        raise DomainError("exponential portfolio rule needs the horizon T")
    return ratio / (utility.gamma * beta_exp(market, t, T) * W)


# --- log utility --------------------------------------------------------------

def _check_tT(t, T):
    if not (0 <= t <= T):
        raise DomainError(f"need 0 <= t <= T, got t={t}, T={T}")


def log_constant_alpha(rho: float, a: float, t: float, T: float) -> float:
    """[1 - (1 - a rho) e^{-rho (T-t)}] / rho, with the rho -> 0 limit (T-t) + a."""
    _check_tT(t, T)
    tau = T - t
    if abs(rho) < DEGENERATE_RATE:
        return tau + a - rho * tau * (tau / 2 + a)
    return -math.expm1(-rho * tau) / rho + a * math.exp(-rho * tau)


def _log_consumption(denominator, W, a, t, T, numerator=1.0):
    if denominator == 0.0:
        raise BoundarySingularityError("zero bequest with empty remaining horizon")
    return numerator * W / denominator


def log_precommit_alpha(discount, a: float, t: float, T: float) -> float:
    _check_tT(t, T)
    den = a * discount.factor(T) + discount.factor_integral(t, T)
    return den / discount.factor(t)


def log_precommit_consumption(discount, a, t, T, W):
    _check_tT(t, T)
    den = a * discount.factor(T) + discount.factor_integral(t, T)
    return _log_consumption(den, W, a, t, T, numerator=discount.factor(t))


def log_naive_alpha(discount, a: float, t: float, T: float) -> float:
    """a theta(T-t) + int_t^T theta(s-t) ds, integrating in calendar time s."""
    _check_tT(t, T)
    if T == t:
        return a
    integral, _ = integrate.quad(lambda s: discount.factor(s - t), t, T, **_QUAD)
    return a * discount.factor(T - t) + integral


def log_naive_consumption(discount, a, t, T, W):
    return _log_consumption(log_naive_alpha(discount, a, t, T), W, a, t, T)


def log_sophisticated_alpha(discount, a: float, t: float, T: float) -> float:
    """Solution of the sophisticated coefficient ODE, written in elapsed time."""
    _check_tT(t, T)
    return a * discount.factor(T - t) + discount.factor_integral(0.0, T - t)


def log_sophisticated_consumption(discount, a, t, T, W):
    return _log_consumption(log_sophisticated_alpha(discount, a, t, T), W, a, t, T)


def log_precommit_value_intercept(discount, market: MarketModel, a: float, T: float,
                                  n_nodes: int = DEFAULT_NODES) -> Grid:
    """Second coefficient of V^P = alpha ln W + beta; reporting only."""
    if a <= 0:
        raise DomainError("value intercept needs a > 0 (ln alpha(T))")
    M = excess_quadratic(market)

    def rhs(t, y):
        al = log_precommit_alpha(discount, a, t, T)
        return [discount.rate(t) * y[0] - (0.5 * M + market.mu0) * al + math.log(al) + 1.0]

    t = time_grid(T, n_nodes)
    sol = integrate.solve_ivp(rhs, (T, 0.0), [0.0], t_eval=t[::-1], rtol=1e-10, atol=1e-12, method="DOP853")
    return Grid(t, sol.y[0][::-1])


# --- power utility ------------------------------------------------------------

def _terminal_y(a, gamma):
    return a ** (1.0 / (1.0 - gamma))


def power_constant_consumption(rho, market, gamma, a, t, T, W):
    _check_tT(t, T)
    d = delta_p(market, gamma)
    k = (rho - d) / (1.0 - gamma)
    tau = T - t
    yT = _terminal_y(a, gamma)
    if abs(k) < DEGENERATE_RATE:
        growth = tau * (1 + k * tau / 2 + (k * tau) ** 2 / 6)
    else:
        growth = math.expm1(k * tau) / k
    den = yT + growth
    if den == 0.0:
        raise BoundarySingularityError("zero bequest with empty remaining horizon")
    # c/W = e^{k tau} / (yT + (e^{k tau}-1)/k), divided through by e^{k tau}
    return W / (den * math.exp(-k * tau))


def power_constant_alpha(rho, market, gamma, a, t, T):
    lam = power_constant_consumption(rho, market, gamma, a, t, T, 1.0)
    return lam ** -(1.0 - gamma)


def _power_kernel_integral(log_kernel, t, T):
    val, _ = integrate.quad(lambda s: math.exp(log_kernel(s)), t, T, **_QUAD)
    return val


def power_precommit_consumption(discount, market, gamma, a, t, T, W):
    _check_tT(t, T)
    d = delta_p(market, gamma)
    RT = discount.cumulative_rate(T)

    def log_kernel(s):
        return (RT - discount.cumulative_rate(s) - d * (T - s)) / (1.0 - gamma)

    den = _terminal_y(a, gamma) + _power_kernel_integral(log_kernel, t, T)
    if den == 0.0:
        raise BoundarySingularityError("zero bequest with empty remaining horizon")
    return math.exp(log_kernel(t)) * W / den


def power_naive_consumption(discount, market, gamma, a, t, T, W):
    _check_tT(t, T)
    d = delta_p(market, gamma)
    R_end = discount.cumulative_rate(T - t)

    def log_kernel(s):
        return (R_end - discount.cumulative_rate(s - t) - d * (T - s)) / (1.0 - gamma)

    den = _terminal_y(a, gamma) + _power_kernel_integral(log_kernel, t, T)
    if den == 0.0:
        raise BoundarySingularityError("zero bequest with empty remaining horizon")
    return math.exp(log_kernel(t)) * W / den


# --- exponential utility ------------------------------------------------------

def _exp_alpha_at(market, utility, T, t, rate_at, points=None):
    """-(1/gamma) int_t^T exp(-int_t^s beta) [delta_e(s) - rate_at(s)] ds."""
    if t == T:
        return 0.0
    B_t = beta_integral(market, t, T)

    def integrand(s):
        return math.exp(beta_integral(market, s, T) - B_t) * (delta_e(market, utility, s, T) - rate_at(s))

    opts = dict(_QUAD)
    if points:
        opts.update(points=points, limit=max(_QUAD["limit"], 4 * len(points)))
    val, _ = integrate.quad(integrand, t, T, **opts)
    return -val / utility.gamma


def exp_constant_alpha_at(rho, market, utility, t, T):
    _check_tT(t, T)
    return _exp_alpha_at(market, utility, T, t, lambda s: rho)


def exp_precommit_alpha_at(discount, market, utility, t, T):
    _check_tT(t, T)
    return _exp_alpha_at(market, utility, T, t, lambda s: float(discount.rate(s)),
                         discount._breakpoints(t, T))


def exp_naive_alpha_at(discount, market, utility, t, T):
    _check_tT(t, T)
    kinks = discount._breakpoints(0.0, T - t)
    return _exp_alpha_at(market, utility, T, t, lambda s: float(discount.rate(max(s - t, 0.0))),
                         [t + k for k in kinks] if kinks else None)


def exp_constant_coeffs(rho, market, gamma, a, T, n_nodes: int = DEFAULT_NODES):
    """(alpha, beta) grids for a constant discount rate."""
    util = ExponentialUtility(gamma, a)
    t = time_grid(T, n_nodes)
    alpha = np.array([_exp_alpha_at(market, util, T, ti, lambda s: rho) for ti in t])
    return Grid(t, alpha), Grid(t, np.asarray(beta_exp(market, t, T)))


def exp_precommit_alpha(discount, market, gamma, a, T, n_nodes: int = DEFAULT_NODES) -> Grid:
    util = ExponentialUtility(gamma, a)
    t = time_grid(T, n_nodes)
    return Grid(t, np.array([exp_precommit_alpha_at(discount, market, util, ti, T) for ti in t]))


def exp_naive_alpha(discount, market, gamma, a, T, n_nodes: int = DEFAULT_NODES) -> Grid:
    util = ExponentialUtility(gamma, a)
    t = time_grid(T, n_nodes)
    return Grid(t, np.array([exp_naive_alpha_at(discount, market, util, ti, T) for ti in t]))


# --- policy builders ----------------------------------------------------------

def _constant_discount_for(agent: AgentKind, discount):
    return disc.Constant(agent.rho) if agent.name == "constant" else discount


def closed_form_policy(utility: UtilitySpec, agent: AgentKind, discount, market: MarketModel,
                       T: float, n_nodes: int = DEFAULT_NODES) -> Policy:
    """Constant-rate, pre-commitment or naive policy; log sophisticated too.

    Power and exponential sophisticated policies come from the fixed-point
    solvers instead.
    """
    t = time_grid(T, n_nodes)
    name = agent.name
    if isinstance(utility, LogUtility):
        a = utility.a
        if name == "constant":
            alpha = [log_constant_alpha(agent.rho, a, ti, T) for ti in t]
        elif name == "precommitment":
            alpha = [log_precommit_alpha(discount, a, ti, T) for ti in t]
        elif name == "naive":
            alpha = [log_naive_alpha(discount, a, ti, T) for ti in t]
        else:
            alpha = [log_sophisticated_alpha(discount, a, ti, T) for ti in t]
        return Policy(utility, agent, merton_ratio(market), Grid(t, np.array(alpha)), T)

    if isinstance(utility, PowerUtility):
        g, a = utility.gamma, utility.a
        if name == "sophisticated":
            raise UnsupportedPolicyError("power sophisticated policy requires the fixed-point solver")
        if name == "constant":
            fn = lambda ti: power_constant_consumption(agent.rho, market, g, a, ti, T, 1.0)  # noqa: E731
        elif name == "precommitment":
            fn = lambda ti: power_precommit_consumption(discount, market, g, a, ti, T, 1.0)  # noqa: E731
        else:
            fn = lambda ti: power_naive_consumption(discount, market, g, a, ti, T, 1.0)  # noqa: E731
        lam = np.empty_like(t)
        for i, ti in enumerate(t):
            try:
                lam[i] = fn(ti)
            except BoundarySingularityError:
                lam[i] = np.inf
        with np.errstate(divide="ignore"):
            alpha = lam ** -(1.0 - g)
        return Policy(utility, agent, merton_ratio(market) / (1.0 - g), Grid(t, alpha), T)

    if name == "sophisticated":
        raise UnsupportedPolicyError("exponential sophisticated policy requires the fixed-point solver")
    if name == "constant":
        alpha, beta = exp_constant_coeffs(agent.rho, market, utility.gamma, utility.a, T, n_nodes)
    elif name == "precommitment":
        alpha = exp_precommit_alpha(discount, market, utility.gamma, utility.a, T, n_nodes)
        beta = Grid(t, np.asarray(beta_exp(market, t, T)))
    else:
        alpha = exp_naive_alpha(discount, market, utility.gamma, utility.a, T, n_nodes)
        beta = Grid(t, np.asarray(beta_exp(market, t, T)))
    return Policy(utility, agent, merton_ratio(market), alpha, T, beta)
