"""Sophisticated-agent coefficients from the equilibrium (modified) HJB equation.

The equation carries a nonlocal term

    K(x, t) = E[ int_t^T theta(s-t) (r(s-t) - r(T-t)) H(x_s, s) ds ]

that depends on the equilibrium policy itself. For log utility it is
policy-independent and one backward ODE solve suffices. For power and
exponential utility the coefficient is found by damped Picard iteration:
freeze the nonlocal term at the current iterate, integrate the local ODE
backward from the terminal condition, relax, repeat.

On a uniform grid the kernel theta(s-t)(r(s-t) - r(T-t)) depends on the
index difference j - i and on i, so it is tabulated once as an n x n upper
triangular matrix together with per-row Simpson weights; each sweep is then
O(n^2).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import integrate
from scipy.interpolate import CubicSpline

from .closed_policies import SOPHISTICATED, Grid, Policy, time_grid
from .errors import (
    ConfigError,
    DomainError,
    NonConvergenceError,
    PositivityViolationError,
    SolverError,
    UnsupportedTerminalError,
)
from .market import (
    ExponentialUtility,
    LogUtility,
    MarketModel,
    PowerUtility,
    beta_exp,
    beta_exp_derivative,
    beta_integral,
    delta_e,
    delta_p,
    excess_quadratic,
    merton_ratio,
)

DELTA_CONVENTIONS = ("ito", "literal")


@dataclass(frozen=True)
class SolverConfig:
    time_nodes: int = 1001
    fp_tolerance: float = 1e-8
    fp_max_iters: int = 200
    damping: float = 0.5
    ode_tolerance: float = 1e-10
    # "ito": growth of E[W^gamma] includes the quadratic-variation term.
    # "literal": exponent built from mu0 + M/(1-gamma) - lambda as written.
    delta_convention: str = "ito"

    def __post_init__(self):
        if self.time_nodes < 11:
            raise ConfigError("solver.time_nodes must be >= 11")
        if not (self.fp_tolerance > 0 and self.ode_tolerance > 0):
            raise ConfigError("solver tolerances must be > 0")
        if not (0 < self.damping <= 1):
            raise ConfigError("solver.damping must lie in (0, 1]")
        if self.fp_max_iters < 1:
            raise ConfigError("solver.fp_max_iters must be >= 1")
        if self.delta_convention not in DELTA_CONVENTIONS:
            raise ConfigError(f"solver.delta_convention must be one of {DELTA_CONVENTIONS}")

    @classmethod
    def from_json(cls, obj: dict) -> "SolverConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(obj) - known
        if extra:
            raise ConfigError(f"solver: unknown field(s) {sorted(extra)}")
        return cls(**obj)

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class KTerm:
    """Nonlocal term on the solver grid (K-tilde for power, A for exponential)."""

    t: np.ndarray
    values: np.ndarray


@dataclass
class SophisticatedSolution:
    utility: object
    alpha: Grid
    k_term: KTerm
    iterations: int
    residuals: list
    beta: Optional[Grid] = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def t(self):
        return self.alpha.t

    def diagnostics_json(self) -> dict:
        out = {
            "iterations": self.iterations,
            "residuals": list(map(float, self.residuals)),
            "grid": {"t": self.alpha.t.tolist(), "alpha": self.alpha.v.tolist()},
        }
        if self.beta is not None:
            out["grid"]["beta"] = self.beta.v.tolist()
        out.update(self.diagnostics)
        return out

    def write_diagnostics(self, path):
        with open(path, "w") as fh:
            json.dump(self.diagnostics_json(), fh, indent=1)

    def to_policy(self, market: MarketModel) -> Policy:
        u = self.utility
        ratio = merton_ratio(market)
        if isinstance(u, PowerUtility):
            ratio = ratio / (1.0 - u.gamma)
        return Policy(u, SOPHISTICATED, ratio, self.alpha, float(self.alpha.t[-1]), self.beta,
                      meta={"solution": self})


# --- quadrature on the uniform grid --------------------------------------------

def simpson_weights(m: int, h: float) -> np.ndarray:
    """Composite weights for m uniform intervals (m+1 nodes).

    Simpson's rule when m is even; for odd m >= 3 the last three intervals
    use the 3/8 rule; m = 1 falls back to the trapezoid.
    """
    if m == 0:
        return np.zeros(1)
    if m == 1:
        return np.array([0.5, 0.5]) * h
    w = np.zeros(m + 1)
    even = m if m % 2 == 0 else m - 3
    if even > 0:
        s = np.ones(even + 1)
        s[1:-1:2] = 4.0
        s[2:-1:2] = 2.0
        w[:even + 1] += s * h / 3.0
    if m % 2 == 1:
        w[m - 3:] += np.array([1.0, 3.0, 3.0, 1.0]) * 3.0 * h / 8.0
    return w


def _tail_weight_matrix(n: int, h: float) -> np.ndarray:
    """Row i holds quadrature weights for integrating over nodes i..n-1."""
    W = np.zeros((n, n))
    for i in range(n):
        W[i, i:] = simpson_weights(n - 1 - i, h)
    return W


class _Kernel:
    """theta(s-t)(r(s-t) - r(T-t)) tabulated on the grid, times quadrature weights."""

    def __init__(self, discount, t: np.ndarray):
        n = t.size
        h = t[1] - t[0]
        lags = t - t[0]
        theta = np.asarray(discount.factor(lags))
        rate = np.asarray(discount.rate(lags))
        i = np.arange(n)[:, None]
        j = np.arange(n)[None, :]
        lag = np.clip(j - i, 0, n - 1)
        upper = j >= i
        togo = (n - 1 - np.arange(n))[:, None]
        self.theta = theta
        self.rate = rate
        self.lag = lag
        self.upper = upper
        self.matrix = np.where(upper, theta[lag] * (rate[lag] - rate[togo]), 0.0) * _tail_weight_matrix(n, h)
        self.vanishes = not np.any(self.matrix)


def _cumulative(values, t):
    return integrate.cumulative_simpson(values, x=t, initial=0.0)


def _backward_sweep(rhs, terminal, t, rtol, what):
    sol = integrate.solve_ivp(rhs, (t[-1], t[0]), [terminal], method="DOP853", t_eval=t[::-1],
                              rtol=rtol, atol=rtol * 1e-2)
    if sol.status != 0:
        raise SolverError(f"{what}: backward integration failed: {sol.message}",
                          diagnostics={"message": sol.message, "t_reached": float(sol.t[-1]) if sol.t.size else None})
    return sol.y[0][::-1].copy()


def _picard(update, alpha0, config: SolverConfig, what: str):
    """Damped fixed-point loop; returns (alpha, k_values, residuals)."""
    alpha = alpha0
    residuals = []
    for _ in range(config.fp_max_iters):
        new, k_values = update(alpha)
        relaxed = config.damping * new + (1.0 - config.damping) * alpha
        res = float(np.max(np.abs(relaxed - alpha)))
        residuals.append(res)
        alpha = relaxed
        if res < config.fp_tolerance:
            _, k_values = update(alpha)
            return alpha, k_values, residuals
    raise NonConvergenceError(f"{what}: no convergence after {config.fp_max_iters} iterations "
                              f"(last residual {residuals[-1]:.3e})", residuals=residuals,
                              diagnostics={"iterations": len(residuals), "residuals": residuals})


# --- log utility -------------------------------------------------------------------

def solve_log_sophisticated(discount, a: float, T: float, config: SolverConfig = SolverConfig()) -> SophisticatedSolution:
    """alpha' = r(T-t) alpha - 1 + J(t), alpha(T) = a.

    J(t) = int_t^T theta(s-t) (r(s-t) - r(T-t)) ds does not depend on the
    policy, so a single backward solve gives the equilibrium coefficient.
    """
    if T <= 0:
        raise DomainError("horizon T must be positive")
    t = time_grid(T, config.time_nodes)
    J = np.array([evaluate_k_term(discount, None, ti, T) for ti in t])
    J_spline = CubicSpline(t, J)

    def rhs(s, y):
        return [float(discount.rate(max(T - s, 0.0))) * y[0] - 1.0 + float(J_spline(s))]

    alpha = _backward_sweep(rhs, a, t, config.ode_tolerance, "log sophisticated")
    return SophisticatedSolution(LogUtility(a), Grid(t, alpha), KTerm(t, J), iterations=1, residuals=[0.0])


# --- power utility ----------------------------------------------------------------

def _power_naive_grid(discount, market, gamma, a, t):
    """Naive coefficient on the grid by per-row quadrature (warm start)."""
    n = t.size
    h = t[1] - t[0]
    d = delta_p(market, gamma)
    lags = t - t[0]
    R = np.asarray(discount.cumulative_rate(lags))
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    lag = np.clip(j - i, 0, n - 1)
    logk = (R[n - 1 - i] - R[lag] - d * (t[-1] - t[j])) / (1.0 - gamma)
    kern = np.where(j >= i, np.exp(np.where(j >= i, logk, 0.0)), 0.0)
    integral = (kern * _tail_weight_matrix(n, h)).sum(axis=1)
    y = a ** (1.0 / (1.0 - gamma)) + integral
    y /= np.exp(np.diag(logk))
    return y ** (1.0 - gamma)


def solve_power_sophisticated(discount, market: MarketModel, gamma: float, a: float, T: float,
                              config: SolverConfig = SolverConfig()) -> SophisticatedSolution:
    """alpha' = (r(T-t) - delta_p) alpha - (1-gamma) alpha^{-gamma/(1-gamma)} + Kt(t), alpha(T) = a.

    Kt(t) = int_t^T theta(s-t)(r(s-t) - r(T-t)) alpha(s)^{-gamma/(1-gamma)} G(t, s) ds
    where G is the growth of E[W_s^gamma]/W_t^gamma along the equilibrium
    flow: exp(delta_p (s-t) - gamma int_t^s lambda) with lambda = alpha^{-1/(1-gamma)}.
    """
    u = PowerUtility(gamma, a)
    if a == 0:
        raise UnsupportedTerminalError("power sophisticated solver needs a > 0: alpha^{-gamma/(1-gamma)} is singular at T")
    if T <= 0:
        raise DomainError("horizon T must be positive")
    t = time_grid(T, config.time_nodes)
    kernel = _Kernel(discount, t)
    d = delta_p(market, gamma)
    M = excess_quadratic(market)
    if config.delta_convention == "ito":
        drift = d
    else:
        drift = gamma * (market.mu0 + M / (1.0 - gamma))
    expo = -gamma / (1.0 - gamma)

    def k_values(alpha):
        if kernel.vanishes:
            return np.zeros_like(t)
        lam = alpha ** (-1.0 / (1.0 - gamma))
        Lam = _cumulative(lam, t)
        growth = drift * t - gamma * Lam
        log_g = growth[None, :] - growth[:, None]
        log_g = np.where(kernel.upper, log_g, 0.0)
        return (kernel.matrix * (alpha ** expo)[None, :] * np.exp(log_g)).sum(axis=1)

    def update(alpha):
        if np.any(alpha <= 0):
            raise PositivityViolationError("alpha <= 0 in iterate", diagnostics={"min_alpha": float(alpha.min())})
        K = k_values(alpha)
        K_spline = CubicSpline(t, K)

        def rhs(s, y):
            if y[0] <= 0:
                raise PositivityViolationError(f"alpha <= 0 at t = {s:.6g} during backward sweep",
                                               diagnostics={"t": float(s), "alpha": float(y[0])})
            return [(float(discount.rate(max(T - s, 0.0))) - d) * y[0]
                    - (1.0 - gamma) * y[0] ** expo + float(K_spline(s))]

        return _backward_sweep(rhs, a, t, config.ode_tolerance, "power sophisticated"), K

    alpha0 = _power_naive_grid(discount, market, gamma, a, t)
    alpha, K, residuals = _picard(update, alpha0, config, "power sophisticated")
    alpha[-1] = a
    return SophisticatedSolution(u, Grid(t, alpha), KTerm(t, K), len(residuals), residuals,
                                 diagnostics={"delta_convention": config.delta_convention})


# --- exponential utility -----------------------------------------------------------

def gaussian_exposure_moment(market: MarketModel, t: float, s: float) -> float:
    """E[exp(-gamma int_t^s beta C . dz)] in closed form.

    Along the CARA policy gamma beta(tau) C(tau) = sigma_bar' Sigma^{-1}(mu - mu0 1),
    whose squared norm is M; the integral is Gaussian with variance M (s - t).
    """
    return math.exp(0.5 * excess_quadratic(market) * (s - t))


def _exp_naive_grid(discount, market, utility, t):
    n = t.size
    h = t[1] - t[0]
    T = t[-1]
    B = np.asarray(beta_integral(market, t, T))
    de = np.asarray(delta_e(market, utility, t, T))
    rate = np.asarray(discount.rate(t - t[0]))
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    lag = np.clip(j - i, 0, n - 1)
    integrand = np.where(j >= i, np.exp(np.where(j >= i, B[j] - B[i], 0.0)) * (de[j] - rate[lag]), 0.0)
    return -(integrand * _tail_weight_matrix(n, h)).sum(axis=1) / utility.gamma


def solve_exp_sophisticated(discount, market: MarketModel, gamma: float, a: float, T: float,
                            config: SolverConfig = SolverConfig()) -> SophisticatedSolution:
    """alpha' = beta alpha + (delta_e(t) - r(T-t) + A(t)) / gamma, alpha(T) = 0, with beta imposed.

    A(t) = -int_t^T theta(s-t)(r(s-t) - r(T-t)) beta(s)
           exp(-gamma(alpha(s) - alpha(t)) - M(s-t)/2 + gamma int_t^s beta alpha - int_t^s beta ln(a gamma beta)) ds
    comes from K = a A exp(-gamma(alpha(t) + beta(t) W)) after taking the
    Gaussian moment of the equilibrium wealth in closed form.
    """
    u = ExponentialUtility(gamma, a)
    if T <= 0:
        raise DomainError("horizon T must be positive")
    t = time_grid(T, config.time_nodes)
    beta = np.asarray(beta_exp(market, t, T))
    de = np.asarray(delta_e(market, u, t, T))
    M = excess_quadratic(market)
    kernel = _Kernel(discount, t)
    log_term = _cumulative(beta * np.log(a * gamma * beta), t)
    beta_spline = CubicSpline(t, beta)
    de_spline = CubicSpline(t, de)

    def a_values(alpha):
        if kernel.vanishes:
            return np.zeros_like(t)
        BA = _cumulative(beta * alpha, t)
        phi = -gamma * alpha - 0.5 * M * t + gamma * BA - log_term
        expo = np.where(kernel.upper, phi[None, :] - phi[:, None], 0.0)
        return -(kernel.matrix * beta[None, :] * np.exp(expo)).sum(axis=1)

    def update(alpha):
        A = a_values(alpha)
        A_spline = CubicSpline(t, A)

        def rhs(s, y):
            return [float(beta_spline(s)) * y[0]
                    + (float(de_spline(s)) - float(discount.rate(max(T - s, 0.0))) + float(A_spline(s))) / gamma]

        return _backward_sweep(rhs, 0.0, t, config.ode_tolerance, "exponential sophisticated"), A

    alpha0 = _exp_naive_grid(discount, market, u, t)
    alpha, A, residuals = _picard(update, alpha0, config, "exponential sophisticated")
    alpha[-1] = 0.0
    riccati = np.asarray(beta_exp_derivative(market, t, T)) + market.mu0 * beta - beta ** 2
    return SophisticatedSolution(u, Grid(t, alpha), KTerm(t, A), len(residuals), residuals,
                                 beta=Grid(t, beta),
                                 diagnostics={"riccati_residual": float(np.max(np.abs(riccati)))})


# --- nonlocal kernel ------------------------------------------------------------

def evaluate_k_term(discount, H, t: float, T: float, variant: str = "standard") -> float:
    """int_t^T theta(s-t) [r(s-t) - r(T-t)] H(s) ds.

    ``H`` is a Grid covering [t, T] or None for H = 1. ``variant="corollary"``
    drops the r(T-t) subtraction (zero-bequest form).
    """
    if not (0 <= t <= T):
        raise DomainError(f"need 0 <= t <= T, got t={t}, T={T}")
    if variant not in ("standard", "corollary"):
        raise DomainError(f"unknown k-term variant {variant!r}")
    if H is not None:
        if not isinstance(H, Grid):
            raise DomainError("H must be a Grid")
        if H.t[0] > t + 1e-12 or abs(H.t[-1] - T) > 1e-12 * max(1.0, T):
            raise DomainError(f"H grid [{H.t[0]}, {H.t[-1]}] does not cover [{t}, {T}]")
    if t == T:
        return 0.0
    r_end = 0.0 if variant == "corollary" else float(discount.rate(T - t))

    def integrand(s):
        h = 1.0 if H is None else float(H(s))
        return float(discount.factor(s - t)) * (float(discount.rate(s - t)) - r_end) * h

    val, _ = integrate.quad(integrand, t, T, epsabs=1e-13, epsrel=1e-12, limit=200)
    return val


def simulate_exposure_moment(market: MarketModel, gamma: float, T: float, t: float, s: float,
                             n_samples: int, rng: np.random.Generator, n_sub: int = 64):
    """Monte Carlo estimate of E[exp(-gamma int_t^s beta(tau) C(tau) . dz)].

    C(tau) = sigma_bar' Sigma^{-1}(mu - mu0 1) / (gamma beta(tau)) is built from
    its definition on a sub-grid; no simplification of gamma beta C is used.
    Returns (mean, standard error).
    """
    tau = np.linspace(t, s, n_sub + 1)[:-1]
    dt = (s - t) / n_sub
    beta = np.asarray(beta_exp(market, tau, T))
    direction = market.sigma_bar.T @ merton_ratio(market)
    C = direction[None, :] / (gamma * beta[:, None])
    integrand = -gamma * beta[:, None] * C
    total = np.zeros(n_samples)
    for k in range(n_sub):
        dz = rng.standard_normal((n_samples, market.n_noise)) * math.sqrt(dt)
        total += dz @ integrand[k]
    vals = np.exp(total)
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n_samples))
