"""Discounted cost accounting, penalty bounds and collapse diagnostics."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from statsmodels.stats.proportion import proportion_confint

from .adversary import Adversary
from .errors import MissingIntensityLog
from .model import ScaledModel
from .reduction import MinimizingCurve, gamma_a
from .simulator import (FORCED_REJECTION, OVERLOAD_REJECTION, BatchResult, CostSample,
                        Trajectory)

__all__ = ["CostSample", "accumulate", "horizon_tail", "horizon_for", "collapse_distance",
           "moment_diagnostics", "wilson_interval", "kl_integrand", "shift_kl_closed_form",
           "quadratic_kl_bound", "cost_csv"]


def _entropy_gap(y):
    """(1+y)*log(1+y) - y, with a series near 0 where the direct form cancels."""
    y = np.asarray(y, dtype=float)
    small = np.abs(y) < 1e-3
    ys = np.where(small, y, 0.0)
    series = ys ** 2 * (0.5 - ys / 6 + ys ** 2 / 12 - ys ** 3 / 20)
    yl = np.where(small, 0.0, y)
    return np.where(small, series, (1 + yl) * np.log1p(yl) - yl)


def kl_integrand(psi, base):
    """psi*log(psi/base) - psi + base, the running relative-entropy rate."""
    psi = np.asarray(psi, dtype=float)
    return base * _entropy_gap(psi / base - 1.0)


def accumulate(traj: Trajectory, scaled: ScaledModel, spec=None,
               adversary: Adversary | None = None) -> CostSample:
    """Discounted costs recomputed from an event log.

    Every integrand is constant between consecutive log rows, so each piece
    integrates exactly against the discount factor.
    """
    if traj.psi1 is None or traj.psi2 is None or traj.U is None:
        raise MissingIntensityLog("trajectory was recorded without intensities")
    src = scaled if spec is None else spec
    varrho = float(src.varrho)
    h_hat = np.asarray(src.h_hat, dtype=float)
    r_hat = np.asarray(src.r_hat, dtype=float)
    rn = scaled.sqrt_n
    disc = np.exp(-varrho * traj.times)
    w = (disc[:-1] - disc[1:]) / varrho
    X = traj.X[:-1].astype(float)
    holding = float(np.sum((X @ h_hat) / rn * w))
    rej = np.isin(traj.kinds, [FORCED_REJECTION, OVERLOAD_REJECTION])
    rejection = float(np.sum(r_hat[traj.classes[rej]] / rn * disc[rej]))
    kl1 = np.sum(kl_integrand(traj.psi1[:-1], scaled.lam_n) * w[:, None], axis=0)
    kl2 = np.sum(kl_integrand(traj.psi2[:-1], scaled.mu_n) * traj.U[:-1] * w[:, None], axis=0)
    return CostSample.build(holding, rejection, kl1, kl2, np.asarray(src.kappa1, dtype=float),
                            np.asarray(src.kappa2, dtype=float),
                            horizon_tail_bound(scaled, adversary, traj.horizon))


# --- horizon ---------------------------------------------------------------

def _tail_rate(scaled: ScaledModel, adversary: Adversary | None) -> float:
    """Bound on the absolute running cost rate beyond the horizon."""
    c = 0.0 if adversary is None else adversary.hat_bound()
    ls = np.sqrt(scaled.lam * scaled.n)
    ms = np.sqrt(scaled.mu * scaled.n)
    hold = float(np.asarray(scaled.h_hat) @ np.asarray(scaled.b_hat))
    arr_max = scaled.lam_n + c * ls
    rej = float(np.max(scaled.r_hat)) * float(np.sum(arr_max)) / scaled.sqrt_n
    kl = 0.0
    if c > 0:
        for base, s, kap in ((scaled.lam_n, ls, scaled.kappa1), (scaled.mu_n, ms, scaled.kappa2)):
            vals = []
            for sign in (1.0, -1.0):
                psi = base + sign * c * s
                vals.append(np.where(psi > 0, kl_integrand(np.maximum(psi, 1e-300), base), 0.0))
            kl += float(np.sum(np.maximum(*vals) / kap))
    return max(hold + rej, kl)


def horizon_tail_bound(scaled: ScaledModel, adversary: Adversary | None, horizon: float) -> float:
    return math.exp(-scaled.varrho * horizon) * _tail_rate(scaled, adversary) / scaled.varrho


def horizon_tail(scaled: ScaledModel, adversary: Adversary | None, horizon: float) -> float:
    """Bound on |cost accrued after the horizon| for any path."""
    return horizon_tail_bound(scaled, adversary, horizon)


def horizon_for(scaled: ScaledModel, adversary: Adversary | None, tol: float) -> float:
    """Smallest horizon whose tail bound is at most ``tol``."""
    rate = _tail_rate(scaled, adversary)
    return max(0.0, math.log(rate / (scaled.varrho * tol)) / scaled.varrho)


# --- closed forms for constant perturbations ------------------------------

def shift_kl_closed_form(base, y, varrho, horizon):
    """Discounted penalty of the constant intensity base*(1+y) over [0, horizon]."""
    y = np.asarray(y, dtype=float)
    return base * _entropy_gap(y) * (1 - math.exp(-varrho * horizon)) / varrho


def quadratic_kl_bound(base, y, varrho, horizon):
    """base*y^2*(1 - e^{-varrho T})/(2 varrho), which dominates the closed form for y >= 0."""
    y = np.asarray(y, dtype=float)
    return base * y ** 2 * (1 - math.exp(-varrho * horizon)) / (2 * varrho)


# --- state-space collapse ----------------------------------------------------

def collapse_distance(traj: Trajectory, curve: MinimizingCurve, scaled: ScaledModel,
                      horizon: float | None = None, grid=None) -> float:
    """sup_t max_i |X_hat_i(t) - gamma^a_i(workload(t))| over t <= horizon ^ tau.

    tau is the first forced rejection. Without ``grid`` the supremum runs over
    all event epochs, which is exact for the piecewise-constant state.
    """
    T = traj.horizon if horizon is None else float(horizon)
    T = min(T, traj.first_forced_rejection())
    if grid is None:
        keep = traj.times <= T
        X = traj.X[keep]
    else:
        grid = np.asarray(grid, dtype=float)
        X = traj.state_at(grid[grid <= T])
    if len(X) == 0:
        return 0.0
    xh = X / scaled.sqrt_n
    w = np.clip(xh @ scaled.theta_n, 0.0, curve.b)
    return float(np.max(np.abs(xh - gamma_a(curve, w))))


def wilson_interval(successes: int, trials: int, alpha: float = 0.05):
    lo, hi = proportion_confint(int(successes), int(trials), alpha=alpha, method="wilson")
    return float(lo), float(hi)


# --- moments -------------------------------------------------------------------

@dataclass(frozen=True)
class MomentReport:
    first_arr: np.ndarray
    first_srv: np.ndarray
    second_arr: np.ndarray
    second_srv: np.ndarray
    avg_hat1: np.ndarray
    replications: int

    @property
    def first(self):
        return self.first_arr + self.first_srv

    @property
    def second(self):
        return self.second_arr + self.second_srv

    def as_dict(self):
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}


def moment_diagnostics(batch: BatchResult) -> MomentReport:
    """Batch means of the discounted first and second moments of the hats."""
    return MomentReport(
        first_arr=batch.block("m1_arr").mean(axis=0), first_srv=batch.block("m1_srv").mean(axis=0),
        second_arr=batch.block("m2_arr").mean(axis=0), second_srv=batch.block("m2_srv").mean(axis=0),
        avg_hat1=batch.block("avg_hat1").mean(axis=0), replications=len(batch),
    )


def moments_bounded(reports, factor: float = 2.0) -> bool:
    """No growth across a ladder: each report within ``factor`` of the first nonzero one."""
    ref = None
    for rep in reports:
        v = float(np.max(rep.first)) + float(np.max(rep.second))
        if ref is None:
            ref = v
            continue
        if v > factor * max(ref, 1e-12):
            return False
    return True


# --- output ------------------------------------------------------------------------

COST_COLUMNS = ("seed", "n", "policy", "adversary", "holding", "rejection", "kl_total", "total", "tail")


def cost_csv(batch: BatchResult, n: int, policy: str, adversary: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COST_COLUMNS)
    kl = np.sum(batch.kl1, axis=1) + np.sum(batch.kl2, axis=1)
    tot = batch.total
    for k in range(len(batch)):
        w.writerow([int(batch.seeds[k]), n, policy, adversary, repr(float(batch.holding[k])),
                    repr(float(batch.rejection[k])), repr(float(kl[k])), repr(float(tot[k])),
                    repr(batch.tail)])
    return buf.getvalue()
