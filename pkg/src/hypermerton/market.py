"""Market primitives and utility families.

The market is one risk-free asset paying ``mu0`` and ``m`` risky assets with
drift ``mu`` and loadings ``sigma_bar`` (m x L) on L independent Brownian
motions. Everything downstream needs the excess-return direction
Sigma^{-1}(mu - mu0 1) and the quadratic form M = (mu - mu0 1)' Sigma^{-1} (mu - mu0 1).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Union

import numpy as np
from scipy import linalg

from .errors import DomainError, IllConditionedMarketError, SingularBetaError

MAX_CONDITION = 1e12


@dataclass(frozen=True)
class MarketModel:
    mu0: float
    mu: np.ndarray
    sigma_bar: np.ndarray
    _chol: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        sb = np.asarray(self.sigma_bar, dtype=float)
        if sb.ndim == 1:
            sb = sb.reshape(mu.size, -1)
        if mu.ndim != 1 or sb.ndim != 2 or sb.shape[0] != mu.size or sb.shape[1] < 1:
            raise DomainError(f"sigma_bar must be m x L with m = len(mu) = {mu.size}")
        mu.setflags(write=False)
        sb.setflags(write=False)
        object.__setattr__(self, "mu0", float(self.mu0))
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma_bar", sb)
        sigma = sb @ sb.T
        if np.any(np.diag(sigma) <= 0):
            raise DomainError("every risky asset needs positive variance")
        try:
            chol = linalg.cho_factor(sigma, lower=True)
        except linalg.LinAlgError as exc:
            raise DomainError("covariance matrix is not positive definite") from exc
        object.__setattr__(self, "_chol", chol)

    def __hash__(self):
        return hash((self.mu0, self.mu.tobytes(), self.sigma_bar.tobytes()))

    def __eq__(self, other):
        return (isinstance(other, MarketModel) and self.mu0 == other.mu0
                and np.array_equal(self.mu, other.mu)
                and np.array_equal(self.sigma_bar, other.sigma_bar))

    @property
    def m(self) -> int:
        return self.mu.size

    @property
    def n_noise(self) -> int:
        return self.sigma_bar.shape[1]

    @cached_property
    def sigma(self) -> np.ndarray:
        s = self.sigma_bar @ self.sigma_bar.T
        s.setflags(write=False)
        return s

    @property
    def excess(self) -> np.ndarray:
        return self.mu - self.mu0

    @cached_property
    def _ratio(self) -> np.ndarray:
        cond = np.linalg.cond(self.sigma)
        if not np.isfinite(cond) or cond > MAX_CONDITION:
            raise IllConditionedMarketError(f"covariance condition number {cond:.3g} exceeds {MAX_CONDITION:g}")
        x = linalg.cho_solve(self._chol, self.excess)
        x.setflags(write=False)
        return x

    @classmethod
    def single(cls, mu0: float, mu: float, sigma: float) -> "MarketModel":
        """One risky asset with volatility ``sigma``."""
        return cls(mu0, np.array([mu]), np.array([[sigma]]))


def merton_ratio(market: MarketModel) -> np.ndarray:
    """Sigma^{-1}(mu - mu0 1)."""
    return market._ratio.copy()


def excess_quadratic(market: MarketModel) -> float:
    return max(float(market.excess @ market._ratio), 0.0)


def from_json(obj: dict) -> MarketModel:
    try:
        return MarketModel(float(obj["mu0"]), np.asarray(obj["mu"], dtype=float),
                           np.asarray(obj["sigma_bar"], dtype=float))
    except KeyError as exc:
        raise DomainError(f"market: missing field {exc}") from exc


def to_json(market: MarketModel) -> dict:
    return {"mu0": market.mu0, "mu": market.mu.tolist(), "sigma_bar": market.sigma_bar.tolist()}


# --- utilities -------------------------------------------------------------

@dataclass(frozen=True)
class LogUtility:
    a: float = 0.0
    kind = "log"

    def __post_init__(self):
        if not self.a >= 0:
            raise DomainError(f"utility.a: bequest weight must be >= 0, got {self.a}")

    def u(self, c):
        return np.log(c)

    def bequest(self, W):
        return self.a * np.log(W)


@dataclass(frozen=True)
class PowerUtility:
    gamma: float
    a: float = 1.0
    kind = "power"

    def __post_init__(self):
        if not (self.gamma < 1 and self.gamma != 0):
            raise DomainError(f"utility.gamma: power exponent needs gamma < 1 and gamma != 0, got {self.gamma}")
        if not self.a >= 0:
            raise DomainError(f"utility.a: bequest weight must be >= 0, got {self.a}")

    def u(self, c):
        return np.power(c, self.gamma) / self.gamma

    def bequest(self, W):
        return self.a * np.power(W, self.gamma) / self.gamma


@dataclass(frozen=True)
class ExponentialUtility:
    gamma: float
    a: float = 1.0
    kind = "exponential"

    def __post_init__(self):
        if not self.gamma > 0:
            raise DomainError(f"utility.gamma: absolute risk aversion must be > 0, got {self.gamma}")
        if not self.a > 0:
            raise DomainError(f"utility.a: bequest weight must be > 0, got {self.a}")

    def u(self, c):
        return -np.exp(-self.gamma * np.asarray(c)) / self.gamma

    def bequest(self, W):
        return -self.a * np.exp(-self.gamma * np.asarray(W))


UtilitySpec = Union[LogUtility, PowerUtility, ExponentialUtility]


def utility_from_json(obj: dict) -> UtilitySpec:
    kind = obj.get("kind")
    try:
        if kind == "log":
            return LogUtility(float(obj.get("a", 0.0)))
        if kind == "power":
            return PowerUtility(float(obj["gamma"]), float(obj.get("a", 1.0)))
        if kind == "exponential":
            return ExponentialUtility(float(obj["gamma"]), float(obj.get("a", 1.0)))
    except KeyError as exc:
        raise DomainError(f"utility: missing field {exc}") from exc
    raise DomainError(f"utility.kind: unknown kind {kind!r}")


def utility_to_json(utility: UtilitySpec) -> dict:
    if isinstance(utility, LogUtility):
        return {"kind": "log", "a": utility.a}
    return {"kind": utility.kind, "gamma": utility.gamma, "a": utility.a}


# --- utility-specific constants ---------------------------------------------

def delta_p(market: MarketModel, gamma: float) -> float:
    """mu0 gamma + gamma M / (2 (1 - gamma)) for power utility."""
    if not (gamma < 1 and gamma != 0):
        raise DomainError(f"gamma must satisfy gamma < 1, gamma != 0; got {gamma}")
    return market.mu0 * gamma + 0.5 * gamma / (1 - gamma) * excess_quadratic(market)


def _horizon(t, T):
    t = np.asarray(t, dtype=float)
    if np.any(t < -1e-12) or np.any(t > T + 1e-12):
        raise DomainError(f"t must lie in [0, {T}]")
    return np.clip(T - t, 0.0, None)


def _rel_expm1(x, tau):
    """expm1(x tau)/x with its x -> 0 limit tau."""
    x = float(x)
    if abs(x) < 1e-12:
        return tau * (1 + x * tau / 2)
    return np.expm1(x * tau) / x


def beta_exp(market: MarketModel, t, T: float):
    """Slope of the CARA value exponent: mu0 / (1 + (mu0 - 1) exp(-mu0 (T - t)))."""
    tau = _horizon(t, T)
    mu0 = market.mu0
    # denominator / mu0 rewritten so that mu0 -> 0 is regular
    den = np.asarray(_rel_expm1(-mu0, tau)) + np.exp(-mu0 * tau)
    if np.any(~np.isfinite(den)) or np.any(den <= 0):
        bad = np.atleast_1d(tau)[np.atleast_1d(~(np.isfinite(den) & (den > 0)))]
        raise SingularBetaError("beta(t) is singular on the horizon", blowup_time=float(T - bad.min()))
    out = 1.0 / den
    return float(out) if np.ndim(out) == 0 else out


def beta_integral(market: MarketModel, t, T: float):
    """int_t^T beta(s) ds = log1p(expm1(mu0 (T - t)) / mu0)."""
    tau = _horizon(t, T)
    out = np.log1p(_rel_expm1(market.mu0, tau))
    return float(out) if np.ndim(out) == 0 else out


def delta_e(market: MarketModel, utility: ExponentialUtility, t, T: float):
    """beta - M/2 - beta ln(a gamma beta) for exponential utility."""
    beta = np.asarray(beta_exp(market, t, T))
    arg = utility.a * utility.gamma * beta
    if np.any(arg <= 0):
        raise DomainError("a * gamma * beta(t) must be positive")
    out = beta - 0.5 * excess_quadratic(market) - beta * np.log(arg)
    return float(out) if np.ndim(out) == 0 else out


def beta_exp_derivative(market: MarketModel, t, T: float):
    """Analytic d beta / dt from differentiating the closed form in t."""
    tau = _horizon(t, T)
    mu0 = market.mu0
    den = 1 + (mu0 - 1) * np.exp(-mu0 * tau)
    if abs(mu0) < 1e-12:
        out = 1.0 / (1.0 + tau) ** 2
    else:
        out = -mu0 * (mu0 - 1) * mu0 * np.exp(-mu0 * tau) / den ** 2
    return float(out) if np.ndim(out) == 0 else out

