"""Instantaneous discount rates r(s) and discount factors theta(tau).

Every model exposes

    rate(s)              r(s) >= 0
    cumulative_rate(tau) int_0^tau r(s) ds
    factor(tau)          theta(tau) = exp(-cumulative_rate(tau))
    factor_integral(a,b) int_a^b theta(u) du

Closed forms are used wherever they exist; the remaining integrals go
through adaptive Gauss-Kronrod quadrature (QUADPACK via scipy).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy import integrate

from .errors import DomainError

QUAD_EPSABS = 1e-10
QUAD_EPSREL = 1e-9
MONOTONE_PROBE_NODES = 1000


def _check_time(x, name="s"):
    arr = np.asarray(x, dtype=float)
    if np.any(arr < 0) or np.any(np.isnan(arr)):
        raise DomainError(f"{name} must be nonnegative, got {x!r}")
    return arr


def _out(arr):
    return float(arr) if np.ndim(arr) == 0 else arr


class _Base:
    """Shared quadrature-backed operations."""

    def cumulative_rate(self, tau):
        raise NotImplementedError

    def rate(self, s):
        raise NotImplementedError

    def factor(self, tau):
        tau = _check_time(tau, "tau")
        return _out(np.exp(-np.asarray(self.cumulative_rate(tau))))

    def factor_by_quadrature(self, tau: float) -> float:
        """theta(tau) from adaptive quadrature of r, ignoring any closed form."""
        tau = float(_check_time(tau, "tau"))
        if tau == 0.0:
            return 1.0
        val, _ = integrate.quad(self.rate, 0.0, tau, epsabs=1e-13, epsrel=1e-12,
                                limit=200, points=self._breakpoints(0.0, tau))
        return math.exp(-val)

    def factor_integral(self, tau0: float, tau1: float) -> float:
        _check_time(tau0, "tau0")
        if tau1 < tau0:
            raise DomainError(f"reversed bounds [{tau0}, {tau1}]")
        if tau1 == tau0:
            return 0.0
        return self._factor_integral(float(tau0), float(tau1))

    def _factor_integral(self, tau0, tau1):
        return quad_factor_integral(self, tau0, tau1)

    def _breakpoints(self, lo, hi):
        return None

    def long_run_rate(self) -> float:
        raise NotImplementedError

    def is_nonincreasing(self, horizon: float, nodes: int = MONOTONE_PROBE_NODES) -> bool:
        s = np.linspace(0.0, horizon, nodes + 1)
        r = np.asarray(self.rate(s))
        return bool(np.all(np.diff(r) <= 1e-14))


def quad_factor_integral(model, tau0, tau1):
    if math.isinf(tau1):
        val, _ = integrate.quad(model.factor, tau0, np.inf, epsabs=1e-13, epsrel=1e-12, limit=400)
        return val
    val, _ = integrate.quad(model.factor, tau0, tau1, epsabs=1e-13, epsrel=1e-12, limit=200,
                            points=model._breakpoints(tau0, tau1))
    return val


@dataclass(frozen=True)
class Constant(_Base):
    rho: float

    def __post_init__(self):
        if not self.rho >= 0:
            raise DomainError(f"constant rate must be >= 0, got {self.rho}")

    def rate(self, s):
        s = _check_time(s)
        return _out(np.full_like(s, self.rho, dtype=float))

    def cumulative_rate(self, tau):
        tau = _check_time(tau, "tau")
        return _out(self.rho * tau)

    def _factor_integral(self, tau0, tau1):
        if self.rho == 0.0:
            return tau1 - tau0
        if math.isinf(tau1):
            return math.exp(-self.rho * tau0) / self.rho
        return math.exp(-self.rho * tau0) * -math.expm1(-self.rho * (tau1 - tau0)) / self.rho

    def long_run_rate(self):
        return self.rho


@dataclass(frozen=True)
class BarroExp(_Base):
    """r(s) = rho + b exp(-decay s)."""

    rho: float
    b: float
    decay: float

    def __post_init__(self):
        if self.rho < 0 or self.b < 0 or not self.decay > 0:
            raise DomainError("BarroExp requires rho >= 0, b >= 0, decay > 0")

    def rate(self, s):
        s = _check_time(s)
        return _out(self.rho + self.b * np.exp(-self.decay * s))

    def cumulative_rate(self, tau):
        tau = _check_time(tau, "tau")
        return _out(self.rho * tau - self.b * np.expm1(-self.decay * tau) / self.decay)

    def long_run_rate(self):
        return self.rho


@dataclass(frozen=True)
class ExpMixture(_Base):
    """theta(tau) = sum_i w_i exp(-rate_i tau)."""

    weights: tuple
    rates: tuple

    def __post_init__(self):
        w = tuple(float(x) for x in self.weights)
        r = tuple(float(x) for x in self.rates)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "rates", r)
        if len(w) != len(r) or not w:
            raise DomainError("weights and rates must be nonempty and of equal length")
        if any(x <= 0 for x in w) or any(x <= 0 for x in r):
            raise DomainError("mixture weights and rates must be positive")
        if abs(sum(w) - 1.0) > 1e-12:
            raise DomainError(f"mixture weights must sum to 1, got {sum(w)}")

    def _terms(self, s):
        # shifted by the smallest rate so large s never underflows to 0/0
        w = np.asarray(self.weights)
        r = np.asarray(self.rates)
        rmin = r.min()
        s = np.asarray(s, dtype=float)
        e = w * np.exp(-np.multiply.outer(s, r - rmin))
        return e, r, rmin

    def rate(self, s):
        s = _check_time(s)
        e, r, _ = self._terms(s)
        return _out((e * r).sum(axis=-1) / e.sum(axis=-1))

    def cumulative_rate(self, tau):
        tau = _check_time(tau, "tau")
        e, _, rmin = self._terms(tau)
        # normalised by the stored weight sum so theta(0) = 1 exactly despite rounding
        return _out(rmin * tau - np.log(e.sum(axis=-1) / np.sum(self.weights)))

    def _factor_integral(self, tau0, tau1):
        total = 0.0
        for w, r in zip(self.weights, self.rates):
            if math.isinf(tau1):
                total += w * math.exp(-r * tau0) / r
            else:
                total += w * math.exp(-r * tau0) * -math.expm1(-r * (tau1 - tau0)) / r
        return total / math.fsum(self.weights)

    def long_run_rate(self):
        return min(self.rates)


@dataclass(frozen=True)
class Tabulated(_Base):
    """Piecewise-linear r through (times, values); constant beyond the end nodes."""

    times: tuple
    values: tuple
    _cum: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if t.ndim != 1 or t.shape != v.shape or t.size < 1:
            raise DomainError("times and values must be 1-d arrays of equal length")
        if t[0] < 0 or np.any(np.diff(t) <= 0):
            raise DomainError("tabulated times must be nonnegative and strictly increasing")
        if np.any(v < 0):
            raise DomainError("tabulated rates must be nonnegative")
        object.__setattr__(self, "times", tuple(t))
        object.__setattr__(self, "values", tuple(v))
        cum = np.concatenate([[t[0] * v[0]], t[0] * v[0] + np.cumsum(np.diff(t) * (v[1:] + v[:-1]) / 2)])
        object.__setattr__(self, "_cum", cum)

    def rate(self, s):
        s = _check_time(s)
        return _out(np.interp(s, self.times, self.values))

    def cumulative_rate(self, tau):
        tau = _check_time(tau, "tau")
        t = np.asarray(self.times)
        v = np.asarray(self.values)
        k = np.clip(np.searchsorted(t, tau, side="right") - 1, 0, t.size - 1)
        r_tau = np.interp(tau, t, v)
        inside = self._cum[k] + (tau - t[k]) * (v[k] + r_tau) / 2
        out = np.where(tau <= t[0], tau * v[0], inside)
        return _out(out)

    def _breakpoints(self, lo, hi):
        pts = [x for x in self.times if lo < x < hi]
        return pts or None

    def _factor_integral(self, tau0, tau1):
        if math.isinf(tau1):
            last = self.times[-1]
            head = quad_factor_integral(self, tau0, max(tau0, last)) if tau0 < last else 0.0
            start = max(tau0, last)
            rbar = self.values[-1]
            if rbar <= 0:
                return math.inf
            return head + self.factor(start) / rbar
        return quad_factor_integral(self, tau0, tau1)

    def long_run_rate(self):
        return self.values[-1]


DiscountModel = Union[Constant, BarroExp, ExpMixture, Tabulated]


def rate(model: DiscountModel, s):
    return model.rate(s)


def factor(model: DiscountModel, tau):
    return model.factor(tau)


def factor_integral(model: DiscountModel, tau0: float, tau1: float) -> float:
    return model.factor_integral(tau0, tau1)


def from_json(obj: dict) -> DiscountModel:
    """Build a discount model from its JSON object form."""
    try:
        kind = obj["kind"]
        if kind == "constant":
            return Constant(float(obj["rho"]))
        if kind == "barro":
            return BarroExp(float(obj["rho"]), float(obj["b"]), float(obj.get("decay", obj.get("gamma"))))
        if kind == "mixture":
            return ExpMixture(tuple(obj["weights"]), tuple(obj["rates"]))
        if kind == "tabulated":
            return Tabulated(tuple(obj["times"]), tuple(obj["values"]))
    except (KeyError, TypeError) as exc:
        raise DomainError(f"discount: missing or malformed field {exc}") from exc
    raise DomainError(f"discount.kind: unknown kind {kind!r}")


def to_json(model: DiscountModel) -> dict:
    if isinstance(model, Constant):
        return {"kind": "constant", "rho": model.rho}
    if isinstance(model, BarroExp):
        return {"kind": "barro", "rho": model.rho, "b": model.b, "decay": model.decay}
    if isinstance(model, ExpMixture):
        return {"kind": "mixture", "weights": list(model.weights), "rates": list(model.rates)}
    if isinstance(model, Tabulated):
        return {"kind": "tabulated", "times": list(model.times), "values": list(model.values)}
    raise TypeError(type(model))
