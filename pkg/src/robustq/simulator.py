"""Exact event-by-event simulation of the n-th queueing system.

Policies and adversaries only change their decisions at event epochs, so
between events every intensity is constant and competing exponential
clocks give an exact simulation. Discounted costs are integrated in closed
form over each inter-event interval while the path is generated; the
optional event log lets ``metrics.accumulate`` recompute them independently.

Random streams: replication ``k`` of a batch with seed ``s`` reseeds the
kernel generator with ``replication_seed(s, k)``, so results do not depend
on how replications are spread over worker threads.
"""
from __future__ import annotations

import csv
import gzip
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .adversary import Adversary, _hats, _intensities
from .errors import (IntensityNonpositive, NonFiniteIntensity, PolicyInfeasible, RobustQError)
from .model import ScaledModel
from .policy import _Policy, _allocate, _reject
from .rng import replication_seed, replication_seeds
from .rsdg import _interp_uniform

# event kinds in the log
START, ARRIVAL, SERVICE, FORCED_REJECTION, OVERLOAD_REJECTION, END = 0, 1, 2, 3, 4, 5
KIND_NAMES = {START: "start", ARRIVAL: "arrival", SERVICE: "service",
              FORCED_REJECTION: "forced_rejection", OVERLOAD_REJECTION: "overload_rejection",
              END: "end"}

# kernel status codes
ST_OK, ST_LOG_FULL, ST_NONFINITE, ST_NONPOSITIVE, ST_INFEASIBLE, ST_UNCOVERED = 0, 1, 2, 3, 4, 5

# layout of the per-replication statistics vector
HOLDING, REJECTION, EVENTS, FORCED, OVERLOAD, TAU, WORKLOAD_END, MARTINGALE = range(8)
_NSCALAR = 8
_BLOCKS = ("kl1", "kl2", "m1_arr", "m1_srv", "m2_arr", "m2_srv", "avg_hat1")


def stats_width(I: int) -> int:
    return _NSCALAR + len(_BLOCKS) * I


def _block(stats, name, I):
    k = _BLOCKS.index(name)
    return stats[..., _NSCALAR + k * I:_NSCALAR + (k + 1) * I]


@njit(cache=True)
def _kl(psi, base):
    return psi * math.log(psi / base) - psi + base


@njit(cache=True)
def _check_alloc(X, U):
    s = 0.0
    for i in range(X.shape[0]):
        u = U[i]
        if u < 0.0 or u > 1.0 + 1e-12:
            return False
        if X[i] == 0 and u > 0.0:
            return False
        s += u
    return s <= 1.0 + 1e-12


@njit(cache=True)
def _dynkin_rate(X, inv_sqrt_n, theta_n, p1, p2, U, varrho, p_kind, cap, i_star, a,
                 g0, dx, V):
    """(varrho - generator) applied to V(workload) at the current state."""
    w = 0.0
    for i in range(X.shape[0]):
        w += theta_n[i] * X[i]
    w *= inv_sqrt_n
    v = _interp_uniform(w, g0, dx, V)
    gen = 0.0
    for i in range(X.shape[0]):
        step = theta_n[i] * inv_sqrt_n
        if _reject(p_kind, X, i, cap, i_star, w, a) == 0:
            gen += p1[i] * (_interp_uniform(w + step, g0, dx, V) - v)
        if U[i] > 0.0:
            gen += p2[i] * U[i] * (_interp_uniform(w - step, g0, dx, V) - v)
    return varrho * v - gen


@njit(cache=True, nogil=True)
def _simulate(seed, X0, horizon, inv_sqrt_n, lam_n, mu_n, lam_s, mu_s, theta_n, theta,
              h_hat, r_hat, varrho,
              p_kind, a_hat, rho, cap, i_star, a, order,
              a_kind, coef1, coef2, trunc, g0, gdx, dV, r,
              cv_on, cv_g0, cv_dx, cv_V,
              stats, log_cap, lt, lk, lc, lX, lU, lp1, lp2):
    np.random.seed(seed)
    I = X0.shape[0]
    X = X0.copy()
    x_hat = np.empty(I)
    U = np.zeros(I)
    h1 = np.zeros(I)
    h2 = np.zeros(I)
    p1 = np.zeros(I)
    p2 = np.zeros(I)
    for j in range(stats.shape[0]):
        stats[j] = 0.0
    stats[TAU] = np.inf
    o_kl1 = _NSCALAR
    o_kl2 = o_kl1 + I
    o_m1a = o_kl2 + I
    o_m1s = o_m1a + I
    o_m2a = o_m1s + I
    o_m2s = o_m2a + I
    o_avg = o_m2s + I

    t = 0.0
    disc = 1.0
    if cv_on:
        wl = 0.0
        for i in range(I):
            wl += theta_n[i] * X[i]
        stats[MARTINGALE] = -_interp_uniform(wl * inv_sqrt_n, cv_g0, cv_dx, cv_V)
    kind = START
    cls = -1
    nlog = 0
    while True:
        # decisions for the interval starting at t
        for i in range(I):
            x_hat[i] = X[i] * inv_sqrt_n
        st = _allocate(p_kind, x_hat, a_hat, rho, order, U)
        if st != 0:
            return ST_UNCOVERED, nlog
        if not _check_alloc(X, U):
            return ST_INFEASIBLE, nlog
        _hats(a_kind, x_hat, theta, coef1, coef2, trunc, g0, gdx, dV, r, h1, h2)
        st = _intensities(h1, h2, lam_n, mu_n, lam_s, mu_s, p1, p2)
        if st == 2:
            return ST_NONFINITE, nlog
        if st == 3:
            return ST_NONPOSITIVE, nlog
        if log_cap > 0:
            if nlog >= log_cap - 1:
                return ST_LOG_FULL, nlog
            lt[nlog] = t
            lk[nlog] = kind
            lc[nlog] = cls
            for i in range(I):
                lX[nlog, i] = X[i]
                lU[nlog, i] = U[i]
                lp1[nlog, i] = p1[i]
                lp2[nlog, i] = p2[i]
            nlog += 1

        total = 0.0
        for i in range(I):
            total += p1[i] + p2[i] * U[i]
        gap = -math.log(1.0 - np.random.random()) / total
        t_next = t + gap
        end = t_next if t_next < horizon else horizon
        disc_next = math.exp(-varrho * end)
        w = (disc - disc_next) / varrho
        span = end - t
        hold = 0.0
        for i in range(I):
            hold += h_hat[i] * X[i]
            stats[o_kl1 + i] += _kl(p1[i], lam_n[i]) * w
            stats[o_kl2 + i] += _kl(p2[i], mu_n[i]) * U[i] * w
            stats[o_m1a + i] += abs(h1[i]) * w
            stats[o_m1s + i] += abs(h2[i]) * U[i] * w
            stats[o_m2a + i] += h1[i] * h1[i] * w
            stats[o_m2s + i] += h2[i] * h2[i] * U[i] * w
            stats[o_avg + i] += h1[i] * span
        stats[HOLDING] += hold * inv_sqrt_n * w
        if cv_on:
            stats[MARTINGALE] += _dynkin_rate(X, inv_sqrt_n, theta_n, p1, p2, U, varrho,
                                              p_kind, cap, i_star, a, cv_g0, cv_dx, cv_V) * w
        if t_next >= horizon:
            break
        t = t_next
        disc = disc_next

        # which clock fired
        u = np.random.random() * total
        cls = -1
        is_arrival = True
        acc = 0.0
        for i in range(I):
            acc += p1[i]
            if u < acc:
                cls = i
                break
        if cls < 0:
            is_arrival = False
            for i in range(I):
                acc += p2[i] * U[i]
                if u < acc and U[i] > 0.0:
                    cls = i
                    break
            if cls < 0:
                # rounding at the top end of the cumulative sum
                for i in range(I - 1, -1, -1):
                    if U[i] > 0.0:
                        cls = i
                        break
        stats[EVENTS] += 1.0
        if is_arrival:
            wl = 0.0
            for i in range(I):
                wl += theta_n[i] * X[i]
            dec = _reject(p_kind, X, cls, cap, i_star, wl * inv_sqrt_n, a)
            if dec == 0:
                X[cls] += 1
                kind = ARRIVAL
            else:
                stats[REJECTION] += r_hat[cls] * inv_sqrt_n * disc
                if dec == 1:
                    kind = FORCED_REJECTION
                    stats[FORCED] += 1.0
                    if stats[TAU] == np.inf:
                        stats[TAU] = t
                else:
                    kind = OVERLOAD_REJECTION
                    stats[OVERLOAD] += 1.0
        else:
            X[cls] -= 1
            kind = SERVICE

    wl = 0.0
    for i in range(I):
        wl += theta_n[i] * X[i]
        stats[o_avg + i] /= horizon
    stats[WORKLOAD_END] = wl * inv_sqrt_n
    if cv_on:
        stats[MARTINGALE] += math.exp(-varrho * horizon) * _interp_uniform(
            wl * inv_sqrt_n, cv_g0, cv_dx, cv_V)
    if log_cap > 0:
        lt[nlog] = horizon
        lk[nlog] = END
        lc[nlog] = -1
        for i in range(I):
            lX[nlog, i] = X[i]
            lU[nlog, i] = U[i]
            lp1[nlog, i] = p1[i]
            lp2[nlog, i] = p2[i]
        nlog += 1
    return ST_OK, nlog


@dataclass(frozen=True)
class CostSample:
    holding: float
    rejection: float
    kl1: np.ndarray
    kl2: np.ndarray
    total: float
    horizon_tail: float = 0.0

    @classmethod
    def build(cls, holding, rejection, kl1, kl2, kappa1, kappa2, horizon_tail=0.0):
        kl1 = np.asarray(kl1, dtype=float)
        kl2 = np.asarray(kl2, dtype=float)
        total = holding + rejection - float(np.sum(kl1 / kappa1)) - float(np.sum(kl2 / kappa2))
        return cls(float(holding), float(rejection), kl1, kl2, float(total), float(horizon_tail))

    @property
    def kl_total(self) -> float:
        return float(np.sum(self.kl1) + np.sum(self.kl2))


@dataclass(frozen=True)
class Trajectory:
    """Event log. Row k holds the state right after event k together with the
    allocation and intensities in force until the next row; the first row is
    the initial state and the last row marks the horizon."""

    times: np.ndarray
    kinds: np.ndarray
    classes: np.ndarray
    X: np.ndarray
    U: np.ndarray
    psi1: np.ndarray
    psi2: np.ndarray
    n: int
    horizon: float
    seed: int
    X0: np.ndarray = field(default=None)

    @property
    def I(self):
        return self.X.shape[1]

    def _count(self, kinds):
        onehot = np.zeros_like(self.X)
        sel = np.isin(self.kinds, kinds)
        onehot[np.nonzero(sel)[0], self.classes[sel]] = 1
        return np.cumsum(onehot, axis=0)

    @property
    def A(self):
        """Cumulative arrivals, admitted or not."""
        return self._count([ARRIVAL, FORCED_REJECTION, OVERLOAD_REJECTION])

    @property
    def S(self):
        return self._count([SERVICE])

    @property
    def R(self):
        return self._count([FORCED_REJECTION, OVERLOAD_REJECTION])

    @property
    def T(self):
        """Cumulative effort at the event epochs."""
        dt = np.diff(self.times)
        return np.vstack([np.zeros(self.I), np.cumsum(self.U[:-1] * dt[:, None], axis=0)])

    def first_forced_rejection(self) -> float:
        idx = np.nonzero(self.kinds == FORCED_REJECTION)[0]
        return float(self.times[idx[0]]) if idx.size else math.inf

    def state_at(self, t):
        """Piecewise-constant state X at times t (right-continuous)."""
        k = np.searchsorted(self.times, np.asarray(t, dtype=float), side="right") - 1
        return self.X[np.clip(k, 0, len(self.times) - 1)]

    def dump_csv(self, path):
        """gzip CSV: time, event kind, class (1-based, 0 if none), X_1..X_I."""
        with gzip.open(path, "wt", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "kind", "class"] + [f"X{i + 1}" for i in range(self.I)])
            for k in range(len(self.times)):
                w.writerow([repr(float(self.times[k])), KIND_NAMES[int(self.kinds[k])],
                            int(self.classes[k]) + 1] + self.X[k].tolist())


@dataclass(frozen=True)
class ScaledView:
    times: np.ndarray
    X_hat: np.ndarray
    R_hat: np.ndarray
    Y_hat: np.ndarray
    workload: np.ndarray
    rejected_workload: np.ndarray


def scaled_view(traj: Trajectory, scaled: ScaledModel, grid=None) -> ScaledView:
    """Diffusion-scaled processes at the event epochs, or on ``grid`` if given."""
    rn = scaled.sqrt_n
    rho = scaled.lam / scaled.mu
    times = traj.times
    X = traj.X.astype(float)
    R = traj.R.astype(float)
    T = traj.T
    if grid is not None:
        grid = np.asarray(grid, dtype=float)
        k = np.clip(np.searchsorted(times, grid, side="right") - 1, 0, len(times) - 1)
        # effort grows linearly with the allocation in force since the last event
        T = T[k] + traj.U[k] * (grid - times[k])[:, None]
        X, R, times = X[k], R[k], grid
    X_hat = X / rn
    R_hat = R / rn
    Y_hat = scaled.mu_n / rn * (rho * times[:, None] - T)
    return ScaledView(times=times, X_hat=X_hat, R_hat=R_hat, Y_hat=Y_hat,
                      workload=X_hat @ scaled.theta_n, rejected_workload=R_hat @ scaled.theta_n)


# --- driver ---------------------------------------------------------------

def _raise_status(status, adversary, scaled, seed):
    if status == ST_NONFINITE:
        raise NonFiniteIntensity(f"non-finite intensity (seed {seed})")
    if status == ST_NONPOSITIVE:
        raise IntensityNonpositive(f"nonpositive intensity at n={scaled.n} (seed {seed})",
                                   min_n=adversary.min_admissible_n(scaled))
    if status == ST_INFEASIBLE:
        raise PolicyInfeasible(f"allocation outside the admissible set (seed {seed})")
    if status == ST_UNCOVERED:
        raise PolicyInfeasible(f"allocation case not covered (seed {seed})")
    if status != ST_OK:
        raise RobustQError(f"simulation failed with status {status}")


def _kernel_args(scaled: ScaledModel, policy: _Policy, adversary: Adversary, control=None):
    p = policy.params
    q = adversary.params
    if len(q.coef1) != scaled.I:
        raise ValueError("adversary coefficients do not match the number of classes")
    return (
        1.0 / scaled.sqrt_n, scaled.lam_n, scaled.mu_n,
        np.sqrt(scaled.lam * scaled.n), np.sqrt(scaled.mu * scaled.n),
        scaled.theta_n, np.ascontiguousarray(1.0 / scaled.mu),
        np.ascontiguousarray(scaled.h_hat, dtype=float),
        np.ascontiguousarray(scaled.r_hat, dtype=float), float(scaled.varrho),
        p.kind, p.a_hat, p.rho, p.cap, p.i_star, p.a, p.order,
        q.kind, q.coef1, q.coef2, q.trunc, q.g0, q.gdx, q.dV, q.r,
        *_control_args(control),
    )


def _control_args(control):
    if control is None:
        return False, 0.0, 1.0, _EMPTY_F
    return True, float(control.grid[0]), control.dx, np.ascontiguousarray(control.V, dtype=float)


def _initial(scaled, x0):
    if x0 is None:
        return np.zeros(scaled.I, dtype=np.int64)
    X0 = np.ascontiguousarray(x0, dtype=np.int64)
    if X0.shape != (scaled.I,) or np.any(X0 < 0) or np.any(X0 > scaled.b_n):
        raise ValueError(f"initial state {X0.tolist()} outside the buffer box {scaled.b_n.tolist()}")
    return X0


_EMPTY_F = np.zeros(1)
_EMPTY_F2 = np.zeros((1, 1))
_EMPTY_I8 = np.zeros(1, dtype=np.int8)
_EMPTY_I4 = np.zeros(1, dtype=np.int32)
_EMPTY_I2 = np.zeros((1, 1), dtype=np.int64)


def _stats_to_sample(stats, scaled, tail):
    I = scaled.I
    return CostSample.build(stats[HOLDING], stats[REJECTION], _block(stats, "kl1", I).copy(),
                            _block(stats, "kl2", I).copy(), scaled.kappa1, scaled.kappa2, tail)


def run_path(scaled: ScaledModel, policy: _Policy, adversary: Adversary, horizon: float, seed: int,
             x0=None, log: bool = True, control=None):
    """Simulate one path with kernel seed ``seed``. Returns (Trajectory or None, CostSample).

    ``control`` (a ValueFunction) switches on the martingale control variate;
    it does not affect the path or the CostSample.
    """
    from .metrics import horizon_tail

    if not horizon > 0:
        raise ValueError("horizon must be positive")
    X0 = _initial(scaled, x0)
    args = _kernel_args(scaled, policy, adversary, control)
    I = scaled.I
    stats = np.zeros(stats_width(I))
    if not log:
        status, _ = _simulate(int(seed), X0, float(horizon), *args, stats, 0, _EMPTY_F, _EMPTY_I8,
                              _EMPTY_I4, _EMPTY_I2, _EMPTY_F2, _EMPTY_F2, _EMPTY_F2)
        _raise_status(status, adversary, scaled, seed)
        return None, _stats_to_sample(stats, scaled, horizon_tail(scaled, adversary, horizon))
    rate = float(np.sum(scaled.lam_n) + np.sum(scaled.mu_n))
    cap = int(1.3 * rate * horizon + 10 * math.sqrt(rate * horizon) + 64)
    while True:
        lt = np.empty(cap)
        lk = np.empty(cap, dtype=np.int8)
        lc = np.empty(cap, dtype=np.int32)
        lX = np.empty((cap, I), dtype=np.int64)
        lU = np.empty((cap, I))
        lp1 = np.empty((cap, I))
        lp2 = np.empty((cap, I))
        status, nlog = _simulate(int(seed), X0, float(horizon), *args, stats, cap, lt, lk, lc, lX,
                                 lU, lp1, lp2)
        if status != ST_LOG_FULL:
            break
        cap *= 2
    _raise_status(status, adversary, scaled, seed)
    traj = Trajectory(times=lt[:nlog].copy(), kinds=lk[:nlog].copy(), classes=lc[:nlog].copy(),
                      X=lX[:nlog].copy(), U=lU[:nlog].copy(), psi1=lp1[:nlog].copy(),
                      psi2=lp2[:nlog].copy(), n=scaled.n, horizon=float(horizon), seed=int(seed),
                      X0=X0)
    return traj, _stats_to_sample(stats, scaled, horizon_tail(scaled, adversary, horizon))


@dataclass(frozen=True)
class BatchResult:
    """Per-replication statistics in replication order."""

    seeds: np.ndarray
    stats: np.ndarray
    I: int
    horizon: float
    tail: float
    kappa1: np.ndarray
    kappa2: np.ndarray
    controlled_run: bool = False

    def __len__(self):
        return len(self.seeds)

    @property
    def holding(self):
        return self.stats[:, HOLDING]

    @property
    def rejection(self):
        return self.stats[:, REJECTION]

    def block(self, name):
        return _block(self.stats, name, self.I)

    @property
    def kl1(self):
        return self.block("kl1")

    @property
    def kl2(self):
        return self.block("kl2")

    @property
    def total(self):
        return (self.holding + self.rejection - np.sum(self.kl1 / self.kappa1, axis=1)
                - np.sum(self.kl2 / self.kappa2, axis=1))

    @property
    def martingale(self):
        return self.stats[:, MARTINGALE]

    @property
    def controlled(self):
        """total minus the Dynkin martingale of the control function: same mean, less noise."""
        if not self.controlled_run:
            raise ValueError("batch was run without a control function")
        return self.total - self.martingale

    @property
    def tau(self):
        return self.stats[:, TAU]

    def sample(self, k) -> CostSample:
        return CostSample.build(self.holding[k], self.rejection[k], self.kl1[k], self.kl2[k],
                                self.kappa1, self.kappa2, self.tail)

    def mean_ci(self, values=None, z=1.96):
        v = self.total if values is None else np.asarray(values)
        half = z * float(np.std(v, ddof=1)) / math.sqrt(len(v)) if len(v) > 1 else math.inf
        return float(np.mean(v)), half


def run_batch(scaled: ScaledModel, policy: _Policy, adversary: Adversary, horizon: float,
              replications: int, seed: int, x0=None, workers: int = 1, start: int = 0,
              control=None) -> BatchResult:
    """Run replications ``start .. start+replications-1`` of stream ``seed`` without logs.

    With ``control`` (a ValueFunction) each replication also records the
    mean-zero martingale built from that function, see ``BatchResult.controlled``.
    """
    from .metrics import horizon_tail

    if replications < 1:
        raise ValueError("replications must be positive")
    X0 = _initial(scaled, x0)
    args = _kernel_args(scaled, policy, adversary, control)
    seeds = replication_seeds(seed, replications, start=start)
    stats = np.zeros((replications, stats_width(scaled.I)))
    status = np.zeros(replications, dtype=np.int64)

    def one(k):
        st, _ = _simulate(int(seeds[k]), X0, float(horizon), *args, stats[k], 0, _EMPTY_F,
                          _EMPTY_I8, _EMPTY_I4, _EMPTY_I2, _EMPTY_F2, _EMPTY_F2, _EMPTY_F2)
        status[k] = st

    if workers <= 1:
        for k in range(replications):
            one(k)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(one, range(replications)))
    for k in range(replications):
        _raise_status(int(status[k]), adversary, scaled, int(seeds[k]))
    return BatchResult(seeds=seeds, stats=stats, I=scaled.I, horizon=float(horizon),
                       tail=horizon_tail(scaled, adversary, horizon),
                       kappa1=np.asarray(scaled.kappa1, dtype=float),
                       kappa2=np.asarray(scaled.kappa2, dtype=float), controlled_run=control is not None)


def run_replication(scaled, policy, adversary, horizon, seed, index, x0=None, log=True):
    """Replication ``index`` of batch stream ``seed``, reproducing its batch statistics."""
    return run_path(scaled, policy, adversary, horizon, replication_seed(seed, index), x0=x0, log=log)


__all__ = ["CostSample", "Trajectory", "ScaledView", "BatchResult", "run_path", "run_batch",
           "run_replication", "scaled_view"]
