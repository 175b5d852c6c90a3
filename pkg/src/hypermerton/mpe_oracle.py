"""Discrete-time equilibrium recursion on a wealth grid.

Time is cut into N steps of length eps = T/N with theta_k = theta(k eps).
Self j chooses (c, pi) to maximise

    eps u(c) + eps sum_{k=1}^{N-j-1} (theta_k - theta_{N-j} theta_{k-1} / theta_{N-j-1}) E[h_{j+1,k-1}(x')]
             + theta_{N-j} / theta_{N-j-1} E[V_{j+1}(x')]

where h_{i,m}(x) = E[H_{i+m} | x_i = x] is the expected instantaneous
utility m steps ahead under the equilibrium flow and V_N is the bequest.
h is carried as a stack of grid vectors and propagated with the transition
matrix P_j built from the stage-j maximisers: h_{j,m} = P_j h_{j+1,m-1}.

Wealth moves by one Euler step,
    W' = W + (mu0 W + pi.(mu - mu0) - c) eps + sqrt(eps) pi' sigma_bar xi,
with xi on a tensor Gauss-Hermite rule. Functions on the grid are cubic
splines in x = ln W (log, power) or x = W (exponential).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.interpolate import CubicSpline

from .errors import ConfigError, DomainError
from .market import ExponentialUtility, LogUtility, MarketModel, PowerUtility, UtilitySpec, merton_ratio

MODES = ("sophisticated", "precommit", "classical")
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class Problem:
    discount: object
    market: MarketModel
    utility: UtilitySpec
    T: float
    W0: float = 1.0

    def __post_init__(self):
        if not self.T > 0:
            raise DomainError("horizon T must be positive")
        if not isinstance(self.utility, ExponentialUtility) and not self.W0 > 0:
            raise DomainError("W0 must be positive for log/power utility")
        if isinstance(self.utility, ExponentialUtility) and self.W0 == 0:
            raise DomainError("W0 sets the wealth-grid scale and must be nonzero")


@dataclass(frozen=True)
class MPEGrid:
    n_steps: int
    wealth_nodes: np.ndarray
    noise_nodes: np.ndarray      # (Q, L) standard normal abscissae
    noise_weights: np.ndarray    # (Q,), sums to 1
    log_coordinate: bool = True

    def __post_init__(self):
        if self.n_steps < 2:
            raise ConfigError("oracle.n_steps must be >= 2")
        w = np.asarray(self.wealth_nodes, dtype=float)
        if w.ndim != 1 or w.size < 4 or np.any(np.diff(w) <= 0):
            raise ConfigError("oracle wealth grid must be strictly increasing with >= 4 nodes")
        if self.log_coordinate and w[0] <= 0:
            raise ConfigError("log-spaced wealth grid needs positive nodes")
        if abs(float(np.sum(self.noise_weights)) - 1.0) > 1e-12:
            raise ConfigError("Hermite weights must sum to 1")
        object.__setattr__(self, "wealth_nodes", w)

    @classmethod
    def build(cls, utility: UtilitySpec, market: MarketModel, W0: float, n_steps: int,
              n_nodes: Optional[int] = None, q: int = 7, span: Optional[float] = None) -> "MPEGrid":
        """Default hulls: W0 e^{+-6} log-spaced (201 nodes) or +-10 W0 linear (401 nodes)."""
        if q < 3:
            raise ConfigError("oracle.q must be >= 3")
        xi, wq = hermite_rule(q, market.n_noise)
        if isinstance(utility, ExponentialUtility):
            n = n_nodes or 401
            span = 10.0 if span is None else span
            k = np.arange(n)
            nodes = abs(W0) * ((2 * k - (n - 1)) * span / (n - 1))
            return cls(n_steps, nodes, xi, wq, log_coordinate=False)
        n = n_nodes or 201
        span = 6.0 if span is None else span
        k = np.arange(n)
        z = math.log(W0) + (2 * k - (n - 1)) * span / (n - 1)
        nodes = np.exp(z)
        if n % 2 == 1:
            nodes[(n - 1) // 2] = W0
        return cls(n_steps, nodes, xi, wq, log_coordinate=True)

    @property
    def x(self) -> np.ndarray:
        return np.log(self.wealth_nodes) if self.log_coordinate else self.wealth_nodes


def hermite_rule(q: int, dim: int):
    """Tensor Gauss-Hermite rule for E[f(xi)], xi ~ N(0, I_dim)."""
    x, w = hermegauss(q)
    w = w / w.sum()
    grids = np.meshgrid(*([x] * dim), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1)
    weights = np.ones(nodes.shape[0])
    for g in np.meshgrid(*([w] * dim), indexing="ij"):
        weights = weights * g.ravel()
    return nodes, weights


def extrapolated(S, x, lo, hi, nu=0):
    """Spline inside [lo, hi], continued linearly (value and slope) outside."""
    xc = np.clip(x, lo, hi)
    out = S(xc, nu)
    below = x < lo
    above = x > hi
    if not (np.any(below) or np.any(above)):
        return out
    if out.ndim > np.ndim(x):
        sel = lambda m: m[..., None]  # noqa: E731
    else:
        sel = lambda m: m  # noqa: E731
    dx = np.where(below, x - lo, np.where(above, x - hi, 0.0))
    if nu == 0:
        return out + sel(below | above) * S(xc, 1) * sel(dx)
    if nu == 1:
        return out
    return np.where(sel(below | above), 0.0, out)


def _utility(utility, c):
    if isinstance(utility, LogUtility):
        return np.log(c)
    if isinstance(utility, PowerUtility):
        return np.power(c, utility.gamma) / utility.gamma
    return -np.exp(-utility.gamma * c) / utility.gamma


def _bequest(utility, W):
    if isinstance(utility, LogUtility):
        return utility.a * np.log(W) if utility.a else np.zeros_like(W)
    return utility.bequest(W)


class _Stepper:
    """Next-state geometry and continuation-function evaluation for one problem/grid."""

    def __init__(self, problem: Problem, grid: MPEGrid):
        self.problem = problem
        self.grid = grid
        self.eps = problem.T / grid.n_steps
        m = problem.market
        self.x = grid.x
        self.lo, self.hi = self.x[0], self.x[-1]
        # v_q = eps (mu - mu0) + sqrt(eps) sigma_bar xi_q ; shape (Q, m)
        self.v = self.eps * m.excess[None, :] + math.sqrt(self.eps) * grid.noise_nodes @ m.sigma_bar.T
        self.w = grid.noise_weights
        self.growth = 1.0 + m.mu0 * self.eps
        self.log = grid.log_coordinate
        self.ratio = merton_ratio(m)

    def coords(self, Wn):
        """(x, inside, dx/dW, d2x/dW2, valid).

        Nonpositive CRRA wealth is clamped to the lowest node (``valid`` False);
        positive states beyond the hull are left for linear extrapolation.
        """
        if self.log:
            valid = Wn > 0
            safe = np.where(valid, Wn, 1.0)
            x = np.where(valid, np.log(safe), self.lo)
            g1 = np.where(valid, 1.0 / safe, 0.0)
            g2 = -g1 * g1
        else:
            valid = np.ones(Wn.shape, dtype=bool)
            x = Wn
            g1 = np.ones_like(Wn)
            g2 = np.zeros_like(Wn)
        inside = (x >= self.lo) & (x <= self.hi)
        return x, inside, g1, g2, valid

    def evaluate(self, S, x, nu=0):
        return extrapolated(S, x, self.lo, self.hi, nu)

    def next_wealth(self, W, c, pi):
        base = W * self.growth - c * self.eps
        return base[:, None] + pi @ self.v.T

    def value(self, S, W, c, pi):
        x, _, _, _, _ = self.coords(self.next_wealth(W, c, pi))
        return self.evaluate(S, x) @ self.w

    def best_exposure(self, S, W, c, pi0, max_iter=30):
        """Newton ascent in pi for fixed c; steps that lose value are halved."""
        pi = pi0.copy()
        m = pi.shape[1]
        f = self.value(S, W, c, pi)
        scale = 1e-11 * (np.abs(W) + abs(self.problem.W0))
        for _ in range(max_iter):
            x, _, g1, g2, _ = self.coords(self.next_wealth(W, c, pi))
            S1 = self.evaluate(S, x, 1)
            S2 = self.evaluate(S, x, 2)
            d1 = S1 * g1 * self.w
            d2 = (S2 * g1 * g1 + S1 * g2) * self.w
            grad = d1 @ self.v
            hess = np.einsum("nq,qa,qb->nab", d2, self.v, self.v)
            if m == 1:
                h = hess[:, 0, 0]
                ok = h < 0
                step = np.where(ok, -grad[:, 0] / np.where(ok, h, -1.0), 0.0)[:, None]
            else:
                ok = np.linalg.eigvalsh(hess)[:, -1] < 0
                safe = np.where(ok[:, None, None], hess, -np.eye(m)[None])
                step = np.where(ok[:, None], -np.linalg.solve(safe, grad[..., None])[..., 0], 0.0)
            size = np.abs(step).max(axis=1)
            if np.all(size <= scale):
                break
            slack = 1e-14 * (np.abs(f) + 1.0)
            trial = pi + step
            ft = self.value(S, W, c, trial)
            for _ in range(6):
                worse = ft < f - slack
                if not np.any(worse):
                    break
                step = np.where(worse[:, None], 0.5 * step, step)
                trial = pi + step
                ft = np.where(worse, self.value(S, W, c, trial), ft)
            accept = ft >= f - slack
            pi = np.where(accept[:, None], trial, pi)
            f = np.where(accept, ft, f)
        return pi, f

    def merton_guess(self, S, W, c):
        """pi = -S_W / S_WW * Sigma^{-1}(mu - mu0) at the riskless next state."""
        base = W * self.growth - c * self.eps
        x, inside, g1, g2, valid = (a[:, 0] for a in self.coords(base[:, None]))
        d1 = self.evaluate(S, x, 1)
        S1 = d1 * g1
        S2 = self.evaluate(S, x, 2) * g1 * g1 + d1 * g2
        ok = inside & valid & (S2 < 0)
        tol = np.where(ok, -S1 / np.where(ok, S2, -1.0), 0.0)
        return tol[:, None] * self.ratio[None, :]


@dataclass
class StageFunctions:
    """Backward-induction output: values, instantaneous utilities and maximisers per stage."""

    problem: Problem
    grid: MPEGrid
    mode: str
    V: np.ndarray          # (N+1, n)
    H: np.ndarray          # (N, n)
    c: np.ndarray          # (N, n)
    exposure: np.ndarray   # (N, n, m)
    S: np.ndarray          # (N, n) continuation function used at each stage
    diagnostics: dict = field(default_factory=dict)

    @property
    def eps(self):
        return self.problem.T / self.grid.n_steps

    @property
    def t(self):
        return np.arange(self.grid.n_steps + 1) * self.eps

    @property
    def weights(self):
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.exposure / self.grid.wealth_nodes[None, :, None]

    def consumption_at(self, j: int, W: float) -> float:
        return float(_node_or_spline(self.grid, self.c[j], W))

    def stage_objective(self, j: int, W, c, w, q: Optional[int] = None):
        """Bracketed stage-j expectation for candidate (c, w) at wealth W.

        ``q`` swaps in a different Hermite order for quadrature-refinement checks.
        """
        if not 0 <= j < self.grid.n_steps:
            raise DomainError(f"stage index {j} outside [0, {self.grid.n_steps - 1}]")
        W = np.atleast_1d(np.asarray(W, dtype=float))
        c = np.broadcast_to(np.asarray(c, dtype=float), W.shape)
        w = np.atleast_2d(np.asarray(w, dtype=float))
        grid = self.grid
        if q is not None:
            xi, wq = hermite_rule(q, self.problem.market.n_noise)
            grid = MPEGrid(grid.n_steps, grid.wealth_nodes, xi, wq, grid.log_coordinate)
        step = _Stepper(self.problem, grid)
        S = CubicSpline(grid.x, self.S[j])
        pi = w * W[:, None]
        out = self.eps * _utility(self.problem.utility, c) + step.value(S, W, c, pi)
        return float(out[0]) if out.size == 1 else out

    def to_csv(self, path):
        m = self.exposure.shape[2]
        W = self.grid.wealth_nodes
        wts = self.weights
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["j", "t", "W", "c"] + [f"w_{i + 1}" for i in range(m)] + ["V", "H"])
            for j in range(self.grid.n_steps):
                tj = j * self.eps
                for i in range(W.size):
                    wr.writerow([j] + [f"{x:.17g}" for x in (tj, W[i], self.c[j, i], *wts[j, i],
                                                            self.V[j, i], self.H[j, i])])

    def diagnostics_json(self) -> dict:
        return dict(self.diagnostics)

    def write_diagnostics(self, path, extra: Optional[dict] = None):
        out = self.diagnostics_json()
        if extra:
            out.update(extra)
        with open(path, "w") as fh:
            json.dump(out, fh, indent=1)


def _node_or_spline(grid: MPEGrid, values, W):
    nodes = grid.wealth_nodes
    if W < nodes[0] or W > nodes[-1]:
        raise DomainError(f"W = {W} outside oracle wealth hull [{nodes[0]}, {nodes[-1]}]")
    k = int(np.searchsorted(nodes, W))
    if k < nodes.size and nodes[k] == W:
        return values[k]
    x = math.log(W) if grid.log_coordinate else W
    return CubicSpline(grid.x, values)(x)


def _terminal_guess(problem: Problem, eps, theta1, W):
    u = problem.utility
    if isinstance(u, LogUtility):
        return W * (1 + problem.market.mu0 * eps) / (u.a * theta1 + eps)
    if isinstance(u, PowerUtility):
        return W / (eps + u.a ** (1.0 / (1.0 - u.gamma)))
    return W - math.log(u.a * u.gamma) / u.gamma


def _maximise(step: _Stepper, S, W, guess, utility, tol=1e-11, max_expand=8):
    """Golden-section search over c (in ln c for CRRA) with Newton in pi inside."""
    crra = not isinstance(utility, ExponentialUtility)
    if crra:
        # riskless solvency W(1 + mu0 eps) - c eps > 0 bounds consumption
        cap = np.log(W * step.growth / step.eps) - 1e-9
        centre = np.minimum(np.log(guess), cap - 1e-3)
        half = np.full(W.size, 1.5)
        to_c = np.exp
    else:
        cap = np.full(W.size, np.inf)
        centre = guess.astype(float)
        half = np.maximum(1.0, np.abs(guess))
        to_c = lambda y: y  # noqa: E731
    pi_seed = step.merton_guess(S, W, to_c(centre))
    contacts = np.zeros(W.size, dtype=bool)

    todo = np.arange(W.size)
    y_best = centre.copy()
    pi_best = pi_seed.copy()
    f_best = np.empty(W.size)
    for attempt in range(max_expand):
        sub = todo
        Wsub = W[sub]
        lo = centre[sub] - half[sub]
        hi = np.minimum(centre[sub] + half[sub], cap[sub])
        step_sub = _SubStepper(step, Wsub)
        x1 = hi - GOLDEN * (hi - lo)
        x2 = lo + GOLDEN * (hi - lo)
        f1, p1 = step_sub.score(S, x1, pi_seed[sub], utility, to_c)
        f2, p2 = step_sub.score(S, x2, pi_seed[sub], utility, to_c)
        width_tol = tol * np.maximum(1.0, np.abs(centre[sub]))
        while np.any(hi - lo > width_tol):
            left = f1 >= f2        # ties toward smaller c
            hi = np.where(left, x2, hi)
            lo = np.where(left, lo, x1)
            nx = np.where(left, hi - GOLDEN * (hi - lo), lo + GOLDEN * (hi - lo))
            seed = np.where(left[:, None], p1, p2)
            fn, pn = step_sub.score(S, nx, seed, utility, to_c)
            x2n = np.where(left, x1, nx)
            x1n = np.where(left, nx, x2)
            f2n = np.where(left, f1, fn)
            f1n = np.where(left, fn, f2)
            p2n = np.where(left[:, None], p1, pn)
            p1n = np.where(left[:, None], pn, p2)
            x1, x2, f1, f2, p1, p2 = x1n, x2n, f1n, f2n, p1n, p2n
        ymid = 0.5 * (lo + hi)
        fm, pm = step_sub.score(S, ymid, np.where((f1 >= f2)[:, None], p1, p2), utility, to_c)
        y_best[sub], pi_best[sub], f_best[sub] = ymid, pm, fm
        lo0 = centre[sub] - half[sub]
        hi0 = np.minimum(centre[sub] + half[sub], cap[sub])
        at_cap = hi0 >= cap[sub]
        edge = (ymid - lo0 < 1e-6 * (hi0 - lo0)) | ((hi0 - ymid < 1e-6 * (hi0 - lo0)) & ~at_cap)
        contacts[sub] |= (hi0 - ymid < 1e-6 * (hi0 - lo0)) & at_cap
        if not np.any(edge):
            break
        todo = sub[edge]
        centre[todo] = y_best[todo]
        half[todo] *= 4.0
        pi_seed[todo] = pi_best[todo]
    else:
        contacts[todo] = True
    return to_c(y_best), pi_best, f_best, contacts


class _SubStepper:
    def __init__(self, step: _Stepper, W):
        self.step = step
        self.W = W

    def score(self, S, y, pi0, utility, to_c):
        c = to_c(y)
        pi, f = self.step.best_exposure(S, self.W, c, pi0)
        return self.step.eps * _utility(utility, c) + f, pi


def _basis(x_nodes):
    return CubicSpline(x_nodes, np.eye(x_nodes.size))


def backward_induction(problem: Problem, grid: MPEGrid, mode: str = "sophisticated",
                       rho: Optional[float] = None) -> StageFunctions:
    """Solve the discrete recursion from j = N-1 down to 0.

    ``mode`` is "sophisticated" (equilibrium), "precommit" (time-0 self,
    discount theta_{j+1}/theta_j) or "classical" (constant rate ``rho``).
    """
    if mode not in MODES:
        raise ConfigError(f"oracle mode must be one of {MODES}")
    if mode == "classical" and (rho is None or rho < 0):
        raise ConfigError("classical mode needs rho >= 0")
    N = grid.n_steps
    eps = problem.T / N
    step = _Stepper(problem, grid)
    W = grid.wealth_nodes
    n = W.size
    m = problem.market.m
    theta = np.asarray(problem.discount.factor(np.arange(N + 1) * eps))
    basis = _basis(grid.x)
    u = problem.utility

    V = np.empty((N + 1, n))
    H = np.empty((N, n))
    C = np.empty((N, n))
    PI = np.empty((N, n, m))
    S_all = np.empty((N, n))
    V[N] = _bequest(u, W)
    h_stack = np.zeros((n, 0))     # columns h_{j+1, 0..N-j-2}
    contacts = 0
    hull_contacts = 0
    negative_wealth = 0
    guess = _terminal_guess(problem, eps, theta[1], W)

    for j in range(N - 1, -1, -1):
        if mode == "sophisticated":
            k = np.arange(1, N - j)
            coef = theta[k] - theta[N - j] * theta[k - 1] / theta[N - j - 1]
            S_vals = theta[N - j] / theta[N - j - 1] * V[j + 1]
            if k.size:
                S_vals = S_vals + eps * (h_stack @ coef)
        elif mode == "precommit":
            S_vals = theta[j + 1] / theta[j] * V[j + 1]
        else:
            S_vals = math.exp(-rho * eps) * V[j + 1]
        S = CubicSpline(grid.x, S_vals)
        c, pi, f, hit = _maximise(step, S, W, np.asarray(guess, dtype=float), u)
        contacts += int(hit.sum())
        C[j], PI[j], V[j], S_all[j] = c, pi, f, S_vals
        H[j] = _utility(u, c)
        guess = c
        x, _, _, _, valid = step.coords(step.next_wealth(W, c, pi))
        negative_wealth += int((~valid).sum())
        mean_next = W * step.growth - c * eps + pi @ (eps * problem.market.excess)
        hull_contacts += int((~step.coords(mean_next[:, None])[1][:, 0]).sum())
        if mode == "sophisticated" and j > 0:
            B = extrapolated(basis, x.ravel(), step.lo, step.hi).reshape(n, -1, n)
            P = np.einsum("iqk,q->ik", B, step.w)
            h_stack = np.concatenate([H[j][:, None], P @ h_stack], axis=1)

    total = N * n
    diag = {
        "mode": mode,
        "n_steps": N,
        "n_nodes": n,
        "q": int(round(grid.noise_weights.size ** (1.0 / problem.market.n_noise))),
        "control_boundary_contacts": contacts,
        "hull_boundary_contacts": hull_contacts,
        "negative_wealth_clamps": negative_wealth,
        "boundary_contact_fraction": (contacts + hull_contacts) / total,
    }
    return StageFunctions(problem, grid, mode, V, H, C, PI, S_all, diag)


def extract_policy(stage: StageFunctions, t: float, W: float):
    """(c, w) at (t, W); linear blend between stages, spline in wealth."""
    N = stage.grid.n_steps
    eps = stage.eps
    if not (0 <= t <= stage.problem.T - eps + 1e-12 * stage.problem.T):
        raise DomainError(f"t = {t} outside stored stages [0, {stage.problem.T - eps}]")
    pos = t / eps
    j0 = min(int(math.floor(pos + 1e-12)), N - 1)
    frac = pos - j0
    if frac < 1e-12 or j0 == N - 1:
        frac = 0.0
    if W == 0:
        raise ZeroDivisionError("portfolio share undefined at W = 0")

    def at(j):
        c = float(_node_or_spline(stage.grid, stage.c[j], W))
        pi = np.array([float(_node_or_spline(stage.grid, stage.exposure[j, :, a], W))
                       for a in range(stage.exposure.shape[2])])
        return c, pi / W

    c0, w0 = at(j0)
    if frac == 0.0:
        return c0, w0
    c1, w1 = at(j0 + 1)
    return (1 - frac) * c0 + frac * c1, (1 - frac) * w0 + frac * w1


def deterministic_log_consumption(discount, mu0: float, a: float, T: float, N: int, j: int, W: float) -> float:
    """Stage-j equilibrium consumption of the riskless discrete log problem.

    Future selves consume in proportion to wealth, so self j maximises
    eps ln c + D_j ln W' with D_j = eps sum_{k=1}^{N-j-1} theta_k + a theta_{N-j}.
    """
    eps = T / N
    k = np.arange(1, N - j)
    D = eps * float(np.sum(discount.factor(k * eps))) + a * float(discount.factor((N - j) * eps))
    return W * (1 + mu0 * eps) / (D + eps)


def richardson(coarse: float, fine: float) -> float:
    """First-order extrapolation 2 f(eps/2) - f(eps)."""
    return 2.0 * fine - coarse


def convergence_study(problem: Problem, steps, reference: Optional[float] = None, mode="sophisticated",
                      grid_kwargs: Optional[dict] = None):
    """c(W0, 0) for each N in ``steps``; rows carry errors and successive ratios."""
    grid_kwargs = grid_kwargs or {}
    rows = []
    results = []
    for N in steps:
        grid = MPEGrid.build(problem.utility, problem.market, problem.W0, N, **grid_kwargs)
        res = backward_induction(problem, grid, mode)
        results.append(res)
        c0 = res.consumption_at(0, problem.W0)
        row = {"N": N, "c0": c0}
        if reference is not None:
            row["error"] = abs(c0 - reference) / abs(reference)
        if rows:
            row["richardson"] = richardson(rows[-1]["c0"], c0)
            if reference is not None and row["error"] > 0:
                row["ratio"] = rows[-1]["error"] / row["error"]
        rows.append(row)
    return rows, results
