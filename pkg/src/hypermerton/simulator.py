"""Monte Carlo wealth paths under a consumption/portfolio rule.

The budget equation is stepped with Euler-Maruyama on discounted wealth
X = e^{-mu0 t} W, so the riskless growth factor is applied exactly:

    W_{k+1} = e^{mu0 dt} (W_k + (pi . (mu - mu0) - c) dt + pi' sigma_bar dZ)

Paths are split into fixed-size blocks; block b draws from its own
Philox stream spawned from the configured seed, and per-step statistics are merged
block by block in index order, so results do not depend on thread count.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import integrate

from .closed_policies import Policy
from .errors import ConfigError, UnsupportedPolicyError
from .market import ExponentialUtility, MarketModel, beta_exp, excess_quadratic

BANKRUPTCY_FLOOR = 1e-12


@dataclass(frozen=True)
class SimulationSpec:
    n_paths: int
    n_steps: int
    seed: int = 0
    W0: float = 1.0
    antithetic: bool = False
    block_size: int = 8192
    keep_paths: bool = False

    def __post_init__(self):
        if self.n_paths < 1 or self.n_steps < 1:
            raise ConfigError("simulation.n_paths and simulation.n_steps must be >= 1")
        if self.block_size < 2:
            raise ConfigError("simulation.block_size must be >= 2")
        if self.antithetic and self.block_size % 2:
            raise ConfigError("simulation.block_size must be even with antithetic sampling")

    @classmethod
    def from_json(cls, obj: dict) -> "SimulationSpec":
        extra = set(obj) - set(cls.__dataclass_fields__)
        if extra:
            raise ConfigError(f"simulation: unknown field(s) {sorted(extra)}")
        return cls(**obj)


@dataclass(frozen=True)
class ProportionalRule:
    """c = propensity * W with constant weights; handy for sanity runs."""

    horizon: float
    propensity: float
    weights_vec: np.ndarray

    def consumption(self, W, t):
        return self.propensity * np.asarray(W, dtype=float)

    def exposure(self, W, t):
        return np.multiply.outer(np.asarray(W, dtype=float), np.asarray(self.weights_vec, dtype=float))

    @property
    def linear_in_wealth(self):
        return True


@dataclass
class SimulationResult:
    t: np.ndarray
    mean_W: np.ndarray
    std_W: np.ndarray
    mean_c: np.ndarray
    std_c: np.ndarray
    bankrupt: np.ndarray          # cumulative count of absorbed paths at each time
    terminal_W: np.ndarray
    antithetic: bool
    paths_W: Optional[np.ndarray] = None
    paths_c: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.terminal_W.size

    def terminal_mean(self):
        """(mean W(T), standard error); antithetic pairs are averaged first."""
        x = self.terminal_W
        if self.antithetic:
            n = x.size - x.size % 2
            blocks = x[:n].reshape(-1, 2).mean(axis=1)
            return float(x.mean()), float(blocks.std(ddof=1) / math.sqrt(blocks.size))
        return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["t", "mean_W", "std_W", "mean_c", "std_c", "bankrupt_count"])
            for k in range(self.t.size):
                wr.writerow([f"{v:.17g}" for v in (self.t[k], self.mean_W[k], self.std_W[k],
                                                   self.mean_c[k], self.std_c[k])] + [int(self.bankrupt[k])])

    def dump_paths(self, path):
        """Little-endian float64 records [path, step, W, c]."""
        if self.paths_W is None:
            raise ConfigError("paths were not retained; set keep_paths")
        n, s = self.paths_W.shape
        rec = np.empty((n, s, 4), dtype="<f8")
        rec[..., 0] = np.arange(n)[:, None]
        rec[..., 1] = np.arange(s)[None, :]
        rec[..., 2] = self.paths_W
        rec[..., 3] = self.paths_c
        rec.tofile(path)


def read_path_dump(path) -> np.ndarray:
    return np.fromfile(path, dtype="<f8").reshape(-1, 4)


def _floors_wealth(policy) -> bool:
    utility = getattr(policy, "utility", None)
    return not isinstance(utility, ExponentialUtility)


def _run_block(policy, market: MarketModel, spec: SimulationSpec, t, n, seed_seq):
    rng = np.random.Generator(np.random.Philox(seed_seq))
    dt = t[1] - t[0]
    growth = math.exp(market.mu0 * dt)
    sqdt = math.sqrt(dt)
    L = market.n_noise
    floor_on = _floors_wealth(policy)
    floor = BANKRUPTCY_FLOOR * abs(spec.W0)
    W = np.full(n, float(spec.W0))
    dead = np.zeros(n, dtype=bool)
    steps = t.size
    stats = np.zeros((steps, 5))      # count, mean W, M2 W, mean c, M2 c (per block)
    bankrupt = np.zeros(steps, dtype=np.int64)
    keep_W = np.empty((n, steps)) if spec.keep_paths else None
    keep_c = np.empty((n, steps)) if spec.keep_paths else None
    for k in range(steps):
        with np.errstate(divide="ignore", invalid="ignore"):
            c = np.asarray(policy.consumption(W, t[k]), dtype=float)
        c = np.where(dead, 0.0, c)
        c_fin = np.where(np.isfinite(c), c, np.nan)
        stats[k] = (n, W.mean(), ((W - W.mean()) ** 2).sum(), c_fin.mean(), ((c_fin - c_fin.mean()) ** 2).sum())
        bankrupt[k] = int(dead.sum())
        if keep_W is not None:
            keep_W[:, k] = W
            keep_c[:, k] = c_fin
        if k == steps - 1:
            break
        pi = np.asarray(policy.exposure(W, t[k]), dtype=float).reshape(n, -1)
        if spec.antithetic:
            half = rng.standard_normal(((n + 1) // 2, L))
            Z = np.stack([half, -half], axis=1).reshape(-1, L)[:n]   # pairs on adjacent rows
        else:
            Z = rng.standard_normal((n, L))
        dW = (pi @ market.excess - c) * dt + np.einsum("pm,ml,pl->p", pi, market.sigma_bar, Z) * sqdt
        W_new = growth * (W + dW)
        if floor_on:
            newly = (W_new <= 0) & ~dead
            dead |= newly
            W_new = np.where(dead, floor, W_new)
        W = W_new
    return stats, bankrupt, W, keep_W, keep_c


def _merge(stats_list):
    """Chan et al. pairwise merge of (count, mean, M2), in block order."""
    total = stats_list[0].copy()
    for s in stats_list[1:]:
        n_a, n_b = total[:, 0], s[:, 0]
        n = n_a + n_b
        for mi, m2 in ((1, 2), (3, 4)):
            delta = s[:, mi] - total[:, mi]
            total[:, m2] = total[:, m2] + s[:, m2] + delta ** 2 * n_a * n_b / n
            total[:, mi] = total[:, mi] + delta * n_b / n
        total[:, 0] = n
    return total


def simulate(policy, market: MarketModel, spec: SimulationSpec, threads: int = 1) -> SimulationResult:
    T = float(policy.horizon)
    t = np.linspace(0.0, T, spec.n_steps + 1)
    sizes = [spec.block_size] * (spec.n_paths // spec.block_size)
    if spec.n_paths % spec.block_size:
        sizes.append(spec.n_paths % spec.block_size)
    children = np.random.SeedSequence(spec.seed).spawn(len(sizes))

    def job(b):
        return _run_block(policy, market, spec, t, sizes[b], children[b])

    if threads > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(job, range(len(sizes))))
    else:
        parts = [job(b) for b in range(len(sizes))]

    merged = _merge([p[0] for p in parts])
    n = merged[:, 0]
    std = lambda m2: np.sqrt(m2 / np.maximum(n - 1, 1))  # noqa: E731
    return SimulationResult(
        t=t,
        mean_W=merged[:, 1],
        std_W=std(merged[:, 2]),
        mean_c=merged[:, 3],
        std_c=std(merged[:, 4]),
        bankrupt=sum(p[1] for p in parts),
        terminal_W=np.concatenate([p[2] for p in parts]),
        antithetic=spec.antithetic,
        paths_W=np.concatenate([p[3] for p in parts]) if spec.keep_paths else None,
        paths_c=np.concatenate([p[4] for p in parts]) if spec.keep_paths else None,
        diagnostics={"blocks": len(sizes), "bankrupt_paths": int(sum(p[1] for p in parts)[-1])},
    )


def mean_wealth_ode(policy, market: MarketModel, W0: float, T: Optional[float] = None,
                    n_points: int = 1001, rtol: float = 1e-10):
    """E[W](t) for rules whose consumption is linear (CRRA) or affine (CARA) in W.

    CRRA: dE/dt = (mu0 + w.(mu - mu0) - lambda(t)) E.
    CARA: dE/dt = (mu0 - beta) E + M / (gamma beta) - alpha + ln(a gamma beta) / gamma.
    """
    T = float(policy.horizon if T is None else T)
    t = np.linspace(0.0, T, n_points)
    utility = getattr(policy, "utility", None)
    if isinstance(utility, ExponentialUtility):
        g, a = utility.gamma, utility.a
        M = excess_quadratic(market)

        def rhs(s, y):
            b = beta_exp(market, s, T)
            return [(market.mu0 - b) * y[0] + M / (g * b) - float(policy.alpha(s)) + math.log(a * g * b) / g]
    elif isinstance(policy, Policy) or getattr(policy, "linear_in_wealth", False):
        return t, _crra_mean(policy, market, float(W0), t, rtol)
    else:
        raise UnsupportedPolicyError("mean-wealth ODE needs consumption linear or affine in wealth")
    sol = integrate.solve_ivp(rhs, (0.0, T), [float(W0)], t_eval=t, method="DOP853", rtol=rtol, atol=rtol * 1e-2)
    if sol.status != 0:
        raise UnsupportedPolicyError(f"mean-wealth ODE failed: {sol.message}")
    return t, sol.y[0]


def _crra_mean(policy, market, W0, t, rtol):
    """Integrate ln E[W]; an infinite terminal propensity (zero bequest) sends E[W](T) to 0."""
    def rate(s):
        lam = float(np.asarray(policy.consumption(1.0, s)))
        w = np.asarray(policy.exposure(1.0, s), dtype=float).ravel()
        return market.mu0 + w @ market.excess - lam

    singular_end = not np.isfinite(float(np.asarray(policy.consumption(1.0, t[-1]))))
    span = t[:-1] if singular_end else t
    out = np.zeros_like(t)
    if span.size > 1:
        sol = integrate.solve_ivp(lambda s, y: [rate(s)], (0.0, span[-1]), [0.0], t_eval=span,
                                  method="DOP853", rtol=rtol, atol=rtol * 1e-2)
        if sol.status != 0:
            raise UnsupportedPolicyError(f"mean-wealth ODE failed: {sol.message}")
        out[:span.size] = W0 * np.exp(sol.y[0])
    else:
        out[0] = W0
    return out
