"""Numerical solution of the one-dimensional workload game.

The stationary equation on the continuation region is

    varrho V = h(x) + m V' + (sigma^2/2) V'' + (eps sigma^2 / 2) (V')^2,

with V'(0) = 0 and the gradient constraint V' <= r. The quadratic term is
the adversary's best response psi = eps*sigma*V' to drift sigma*psi and
running penalty psi^2/(2 eps). The scheme is a monotone finite-difference
discretization treated as a two-player Markov chain on the grid: at each
node the minimizer either continues or rejects (jump to the left neighbour
at cost r*dx), and the maximizer picks psi. For each rejection set the
maximizer's problem is solved by Howard iteration, then the rejection set is
improved; every policy evaluation is one tridiagonal solve.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
from numba import njit
from scipy.linalg import solve_banded

from .errors import DomainError, NoConvergence, StepTooLarge
from .model import DerivedModel
from .reduction import h_breakpoints, holding_h
from .rng import replication_seeds

GRAD_TOL = 1e-6


@dataclass(frozen=True)
class ValueFunction:
    grid: np.ndarray
    V: np.ndarray
    dV: np.ndarray
    beta_eps: float
    epsilon: float
    residual_max: float
    r: float
    sigma: float
    iterations: int = 0

    @property
    def N(self) -> int:
        return len(self.grid)

    @property
    def b(self) -> float:
        return float(self.grid[-1])

    @property
    def dx(self) -> float:
        return float(self.grid[1] - self.grid[0])

    def value(self, x):
        return np.interp(x, self.grid, self.V)

    def derivative(self, x):
        """V'(x) by linear interpolation of dV, clamped to [0, r]."""
        x = np.asarray(x, dtype=float)
        if np.any(x < -1e-12) or np.any(x > self.b + 1e-12):
            raise DomainError(f"workload outside [0, {self.b}]")
        return np.clip(np.interp(x, self.grid, self.dV), 0.0, self.r)

    # --- serialization: CSV body plus JSON header -----------------------
    def header(self) -> dict:
        return dict(epsilon=self.epsilon, beta_eps=self.beta_eps, residual_max=self.residual_max,
                    N=self.N, r=self.r, sigma=self.sigma, iterations=self.iterations)

    def save(self, csv_path, json_path=None):
        csv_path = str(csv_path)
        if json_path is None:
            json_path = csv_path.rsplit(".", 1)[0] + ".json"
        np.savetxt(csv_path, np.column_stack([self.grid, self.V, self.dV]), delimiter=",",
                   header="x,V,dV", comments="", fmt="%.17g")
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(self.header(), fh, indent=2)
        return csv_path, json_path

    @classmethod
    def load(cls, csv_path, json_path=None) -> "ValueFunction":
        csv_path = str(csv_path)
        if json_path is None:
            json_path = csv_path.rsplit(".", 1)[0] + ".json"
        data = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
        with open(json_path, encoding="utf-8") as fh:
            head = json.load(fh)
        return cls(grid=data[:, 0], V=data[:, 1], dV=data[:, 2], beta_eps=head["beta_eps"],
                   epsilon=head["epsilon"], residual_max=head["residual_max"], r=head["r"],
                   sigma=head["sigma"], iterations=head.get("iterations", 0))


@dataclass(frozen=True)
class GameEstimate:
    mean: float
    half_width: float
    replications: int
    horizon: float
    tail_bound: float
    std: float = 0.0
    dt: float = 0.0

    def as_dict(self):
        return asdict(self)


# --- finite-difference game ---------------------------------------------

def _coefficients(drift, D, dx, sig2):
    """Off-diagonal weights (lower, upper); centered where monotone, upwind otherwise."""
    centered = np.abs(drift) * dx <= sig2
    lo = np.where(centered, D - drift / (2 * dx), D + np.maximum(-drift, 0.0) / dx)
    up = np.where(centered, D + drift / (2 * dx), D + np.maximum(drift, 0.0) / dx)
    return lo, up


def _gradient(V, dx, r):
    p = np.empty_like(V)
    p[0] = 0.0
    p[1:-1] = (V[2:] - V[:-2]) / (2 * dx)
    p[-1] = r
    return p


class _Scheme:
    def __init__(self, x, hv, m, sigma, eps, r, varrho):
        self.x, self.h = x, hv
        self.m, self.sigma, self.eps, self.r, self.varrho = m, sigma, eps, r, varrho
        self.dx = x[1] - x[0]
        self.sig2 = sigma * sigma
        self.D = self.sig2 / (2 * self.dx ** 2)

    def continuation(self, psi):
        """Tridiagonal rows (lo, diag, up, rhs) of the continuation equation."""
        N, dx, D = len(self.x), self.dx, self.D
        drift = self.m + self.sigma * psi
        lo, up = _coefficients(drift, D, dx, self.sig2)
        rhs = self.h - psi ** 2 / (2 * self.eps)
        # reflecting at 0: ghost node V_{-1} = V_1
        lo[0], up[0] = 0.0, 2 * D
        # forced rejection at b: ghost node V_N = V_{N-2} + 2 r dx
        lo[-1], up[-1] = 2 * D, 0.0
        rhs = rhs.copy()
        rhs[-1] += drift[-1] * self.r + 2 * D * self.r * dx
        diag = self.varrho + lo + up
        if N > 1:
            diag[-1] = self.varrho + 2 * D
        return lo, diag, up, rhs

    def evaluate(self, psi, reject):
        lo, diag, up, rhs = self.continuation(psi)
        lo, diag, up, rhs = lo.copy(), diag.copy(), up.copy(), rhs.copy()
        lo[reject], diag[reject], up[reject], rhs[reject] = 1.0, 1.0, 0.0, self.r * self.dx
        ab = np.zeros((3, len(diag)))
        ab[0, 1:] = -up[:-1]
        ab[1] = diag
        ab[2, :-1] = -lo[1:]
        return solve_banded((1, 1), ab, rhs)

    def best_psi(self, V):
        """Maximizer's response eps*sigma*V', with V' kept in [0, r]."""
        return self.eps * self.sigma * np.clip(_gradient(V, self.dx, self.r), 0.0, self.r)

    def solve_psi(self, psi, reject, tol, max_iter):
        """Howard iteration for the maximizer against a fixed rejection set."""
        V = self.evaluate(psi, reject)
        for _ in range(max_iter):
            psi = self.best_psi(V)
            V_new = self.evaluate(psi, reject)
            change = float(np.max(np.abs(V_new - V)))
            V = V_new
            if change <= tol * max(1.0, float(np.max(np.abs(V)))):
                return V, psi
        raise NoConvergence("adversary iteration did not settle", residual=self.residual(V, reject))

    def improve(self, V, psi, reject):
        """Minimizer's response: reject wherever jumping left is cheaper."""
        psi_new = self.best_psi(V)
        lo, diag, up, rhs = self.continuation(psi_new)
        Vm = np.concatenate([[V[0]], V[:-1]])
        Vp = np.concatenate([V[1:], [V[-1]]])
        cont = (rhs + lo * Vm + up * Vp) / diag
        jump = Vm + self.r * self.dx
        scale = max(1.0, float(np.max(np.abs(V))))
        new_reject = reject.copy()
        new_reject[jump < cont - 1e-13 * scale] = True
        new_reject[jump > cont + 1e-13 * scale] = False
        new_reject[0] = False
        return psi_new, new_reject

    def residual(self, V, reject):
        dx = self.dx
        p = (V[2:] - V[:-2]) / (2 * dx)
        vxx = (V[2:] - 2 * V[1:-1] + V[:-2]) / dx ** 2
        res = (self.varrho * V[1:-1] - self.h[1:-1] - self.m * p - 0.5 * self.sig2 * vxx
               - 0.5 * self.eps * self.sig2 * p ** 2)
        inactive = ~reject[1:-1]
        # nodes next to a rejecting node see the constraint through their stencil
        inactive &= ~reject[2:]
        return float(np.max(np.abs(res[inactive]))) if np.any(inactive) else 0.0


def solve_value(derived: DerivedModel, epsilon: float | None = None, N: int = 4001,
                tol: float = 1e-12, max_iter: int = 500) -> ValueFunction:
    """Solve the workload game on a uniform grid of N points over [0, b]."""
    if epsilon is None:
        epsilon = derived.epsilon
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if N < 200:
        raise ValueError("N must be at least 200")
    x = np.linspace(0.0, derived.b, N)
    hv = holding_h(derived, x)
    sch = _Scheme(x, hv, derived.m, derived.sigma, float(epsilon), derived.r, derived.varrho)
    psi = np.zeros(N)
    reject = np.zeros(N, dtype=bool)
    V, psi = sch.solve_psi(psi, reject, tol, max_iter)
    for it in range(1, max_iter + 1):
        _, rej_new = sch.improve(V, psi, reject)
        if np.array_equal(rej_new, reject):
            break
        reject = rej_new
        V, psi = sch.solve_psi(psi, reject, tol, max_iter)
    else:
        raise NoConvergence(f"policy iteration did not settle in {max_iter} sweeps",
                            residual=sch.residual(V, reject))

    dx = sch.dx
    r = derived.r
    # centered differences; at 0 the reflecting ghost node makes the difference vanish
    dV = _gradient(V, dx, r)
    back = np.diff(V) / dx
    dV[1:][reject[1:]] = back[reject[1:]]
    hits = np.nonzero(dV >= r * (1 - GRAD_TOL))[0]
    hits = hits[hits > 0]
    beta = float(x[hits[0]]) if hits.size else float(x[-1])
    return ValueFunction(grid=x, V=V, dV=dV, beta_eps=min(beta, float(x[-1])), epsilon=float(epsilon),
                         residual_max=sch.residual(V, reject), r=r, sigma=derived.sigma,
                         iterations=it)


def beta_epsilon(vf: ValueFunction) -> float:
    """inf{x in (0, b] : V'(x) = r} ^ b on the grid, with relative tolerance 1e-6."""
    hits = np.nonzero(vf.dV[1:] >= vf.r * (1 - GRAD_TOL))[0]
    return float(vf.grid[hits[0] + 1]) if hits.size else vf.b


def psi_v(vf: ValueFunction, x):
    """Equilibrium adversary feedback eps*sigma*V'(x)."""
    return vf.epsilon * vf.sigma * vf.derivative(x)


# --- Monte-Carlo oracle -------------------------------------------------

@njit(cache=True)
def _interp_uniform(x, x0, dx, vals):
    s = (x - x0) / dx
    if s <= 0.0:
        return vals[0]
    k = int(s)
    if k >= vals.shape[0] - 1:
        return vals[vals.shape[0] - 1]
    w = s - k
    return vals[k] * (1.0 - w) + vals[k + 1] * w


@njit(cache=True)
def _interp_sorted(x, xs, ys):
    n = xs.shape[0]
    if x <= xs[0]:
        return ys[0]
    if x >= xs[n - 1]:
        return ys[n - 1]
    lo = 0
    hi = n - 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if xs[mid] <= x:
            lo = mid
        else:
            hi = mid
    w = (x - xs[lo]) / (xs[hi] - xs[lo])
    return ys[lo] * (1.0 - w) + ys[hi] * w


@njit(cache=True)
def _psi_at(x, mode, psi_const, g0, gdx, dV, eps, sigma, r):
    if mode == 0:
        d = _interp_uniform(x, g0, gdx, dV)
        if d < 0.0:
            d = 0.0
        elif d > r:
            d = r
        return eps * sigma * d
    return psi_const


@njit(cache=True, nogil=True)
def _mc_paths(seeds, x0, beta, m, sigma, eps, r, varrho, dt, nsteps, hx, hy,
              mode, psi_const, g0, gdx, dV, bridge, out):
    sq = math.sqrt(dt)
    sig2dt = sigma * sigma * dt
    decay = math.exp(-varrho * dt)
    half_decay = math.exp(-0.5 * varrho * dt)
    wstep = (1.0 - decay) / varrho
    for p in range(seeds.shape[0]):
        for side in range(2):
            sign = 1.0 if side == 0 else -1.0
            np.random.seed(seeds[p])
            x = x0
            disc = 1.0
            cost = 0.0
            psi_x = _psi_at(x, mode, psi_const, g0, gdx, dV, eps, sigma, r)
            run_x = _interp_sorted(x, hx, hy) - psi_x * psi_x / (2.0 * eps)
            for k in range(nsteps):
                z = np.random.standard_normal() * sign
                u = np.random.random()
                y = x + (m + sigma * psi_x) * dt + sigma * sq * z
                push_up = 0.0
                if bridge:
                    # extremum of the Brownian bridge between x and y
                    spread = math.sqrt((y - x) * (y - x) - 2.0 * sig2dt * math.log(1.0 - u))
                    if x < 0.5 * beta:
                        lo = 0.5 * (x + y - spread)
                        if lo < 0.0:
                            y -= lo
                    else:
                        hi = 0.5 * (x + y + spread)
                        if hi > beta:
                            push_up = hi - beta
                            y -= push_up
                if y < 0.0:
                    y = 0.0
                elif y > beta:
                    push_up += y - beta
                    y = beta
                psi_y = _psi_at(y, mode, psi_const, g0, gdx, dV, eps, sigma, r)
                run_y = _interp_sorted(y, hx, hy) - psi_y * psi_y / (2.0 * eps)
                cost += disc * wstep * 0.5 * (run_x + run_y)
                # pushing happens inside the step; discount it at the midpoint
                cost += disc * half_decay * r * push_up
                disc *= decay
                x = y
                psi_x = psi_y
                run_x = run_y
            out[p, side] = cost


def mc_game_value(derived: DerivedModel, vf: ValueFunction, x0: float, dt: float | None = None,
                  horizon: float | None = None, replications: int = 4000, seed: int = 0,
                  beta: float | None = None, psi: str | float = "equilibrium",
                  bridge: bool = True, workers: int = 1) -> GameEstimate:
    """Monte-Carlo cost of the reflecting strategy against a given adversary.

    ``replications`` counts antithetic pairs; each pair contributes one
    averaged sample. ``beta`` overrides the reflection barrier and ``psi``
    may be a constant instead of the equilibrium feedback. With ``bridge``
    the boundary pushing within a step uses the exact Brownian-bridge
    extremum; otherwise the plain per-step clamp is used.
    """
    beta = vf.beta_eps if beta is None else float(beta)
    if not (0.0 <= x0 <= beta + 1e-12):
        raise DomainError(f"x0={x0} outside [0, {beta}]")
    eps = vf.epsilon
    if dt is None:
        dt = min(2e-3, 1e-3 * (derived.b / derived.sigma) ** 2)
    if horizon is None:
        horizon = math.log(1e6) / derived.varrho
    nsteps = int(math.ceil(horizon / dt))
    horizon = nsteps * dt
    sigma, m, r = derived.sigma, derived.m, derived.r
    psi_max = eps * sigma * r if psi == "equilibrium" else abs(float(psi))
    if abs(m) * dt + sigma * psi_max * dt + 4 * sigma * math.sqrt(dt) >= beta:
        raise StepTooLarge(f"dt={dt} too coarse for barrier {beta}")
    mode = 0 if psi == "equilibrium" else 1
    psi_const = 0.0 if mode == 0 else float(psi)
    hx = h_breakpoints(derived)
    hy = holding_h(derived, hx)
    seeds = replication_seeds(seed, replications)
    out = np.zeros((replications, 2))
    chunks = np.array_split(np.arange(replications), max(1, workers))

    def run(idx):
        if idx.size:
            sub = np.zeros((idx.size, 2))
            _mc_paths(seeds[idx], float(min(x0, beta)), beta, m, sigma, eps, r, derived.varrho, dt,
                      nsteps, hx, hy, mode, psi_const, float(vf.grid[0]), vf.dx, vf.dV,
                      bridge, sub)
            out[idx] = sub

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            list(ex.map(run, chunks))
    else:
        run(chunks[0])
    samples = out.mean(axis=1)
    std = float(samples.std(ddof=1))
    mean = float(samples.mean())
    sup_rate = float(np.max(hy)) + psi_max ** 2 / (2 * eps)
    tail = math.exp(-derived.varrho * horizon) * max(sup_rate / derived.varrho,
                                                    float(np.max(np.abs(vf.V))))
    return GameEstimate(mean=mean, half_width=1.96 * std / math.sqrt(replications),
                        replications=replications, horizon=horizon, tail_bound=tail, std=std, dt=dt)
