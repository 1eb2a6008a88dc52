"""Two-sided Skorokhod map on [0, beta] for discretely sampled paths."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import StepTooLarge

COMPLEMENTARITY_TOL = 1e-9


@dataclass(frozen=True)
class ReflectedPath:
    times: np.ndarray
    chi: np.ndarray
    zeta1: np.ndarray
    zeta2: np.ndarray
    beta: float

    def check(self, eta, tol=COMPLEMENTARITY_TOL):
        """Raise AssertionError if the defining properties fail on the samples."""
        eta = np.asarray(eta, dtype=float)
        assert np.all(np.abs(self.chi - (eta + self.zeta1 - self.zeta2)) <= tol * (1 + np.abs(eta)))
        assert np.all(self.chi >= -tol) and np.all(self.chi <= self.beta + tol)
        d1 = np.diff(self.zeta1, prepend=0.0)
        d2 = np.diff(self.zeta2, prepend=0.0)
        assert np.all(d1 >= -tol) and np.all(d2 >= -tol)
        assert np.all(np.abs(self.chi[d1 > tol]) <= tol)
        assert np.all(np.abs(self.chi[d2 > tol] - self.beta) <= tol)


@njit(cache=True)
def _step(x, inc, beta):
    y = x + inc
    if y < 0.0:
        return 0.0, -y, 0.0
    if y > beta:
        return beta, 0.0, y - beta
    return y, 0.0, 0.0


def reflect_step(x: float, increment: float, beta: float):
    """One step of the discrete regulator: returns (x', dzeta1, dzeta2)."""
    if not abs(increment) < beta:
        raise StepTooLarge(f"|increment|={abs(increment)} >= beta={beta}")
    return _step(float(x), float(increment), float(beta))


@njit(cache=True)
def _fold(eta, beta, chi, z1, z2):
    x = eta[0]
    l1 = 0.0
    l2 = 0.0
    if x < 0.0:
        l1 = -x
        x = 0.0
    elif x > beta:
        l2 = x - beta
        x = beta
    chi[0] = x
    z1[0] = l1
    z2[0] = l2
    for k in range(1, eta.shape[0]):
        x, d1, d2 = _step(x, eta[k] - eta[k - 1], beta)
        l1 += d1
        l2 += d2
        chi[k] = x
        z1[k] = l1
        z2[k] = l2


def _subdivide(times, eta, beta):
    inc = np.abs(np.diff(eta))
    pieces = np.maximum(1, np.ceil(inc / (0.5 * beta)).astype(int))
    if np.all(pieces == 1):
        return times, eta, np.arange(len(eta))
    new_t = [times[:1]]
    new_e = [eta[:1]]
    keep = [0]
    for k, p in enumerate(pieces):
        s = np.arange(1, p + 1) / p
        new_t.append(times[k] + s * (times[k + 1] - times[k]))
        new_e.append(eta[k] + s * (eta[k + 1] - eta[k]))
        keep.append(keep[-1] + p)
    return np.concatenate(new_t), np.concatenate(new_e), np.array(keep)


def reflect_path(eta, beta: float, times=None, subdivide: bool = True) -> ReflectedPath:
    """Apply the regulator to a sampled path, folding ``reflect_step`` over increments.

    Increments too large for a single clamp are split linearly when
    ``subdivide`` is set; the returned path then lives on the refined times.
    """
    eta = np.ascontiguousarray(eta, dtype=float)
    if times is None:
        times = np.arange(eta.shape[0], dtype=float)
    times = np.asarray(times, dtype=float)
    if not np.all(np.isfinite(eta)):
        raise ValueError("path samples must be finite")
    if eta.size > 1 and np.max(np.abs(np.diff(eta))) >= beta:
        if not subdivide:
            raise StepTooLarge("path increment exceeds beta; enable subdivision")
        times, eta, _ = _subdivide(times, eta, beta)
    chi = np.empty_like(eta)
    z1 = np.empty_like(eta)
    z2 = np.empty_like(eta)
    _fold(eta, float(beta), chi, z1, z2)
    return ReflectedPath(times=times, chi=chi, zeta1=z1, zeta2=z2, beta=float(beta))
