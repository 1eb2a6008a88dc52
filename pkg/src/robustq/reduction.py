"""Workload-level reduction: the minimizing curve and the induced holding costs.

Classes are in canonical order, so the cheapest buffer to hold work in is the
last one. Both curves used here fill buffers from the last class backwards;
they differ only in the fill levels (``a_hat`` versus ``b_hat``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .model import DerivedModel

_EDGE_TOL = 1e-12


@dataclass(frozen=True)
class MinimizingCurve:
    a_hat: np.ndarray
    theta: np.ndarray
    b_hat: np.ndarray

    @property
    def I(self):
        return len(self.a_hat)

    @property
    def a_upper(self) -> float:
        return float(self.theta @ self.a_hat)

    @property
    def b(self) -> float:
        return float(self.theta @ self.b_hat)

    @property
    def breakpoints(self) -> np.ndarray:
        """Workload levels sum_{i>j} theta_i a_hat_i for j = I, ..., 0 (ascending)."""
        w = self.theta * self.a_hat
        return np.concatenate([[0.0], np.cumsum(w[::-1])])

    def locate(self, x: float) -> tuple[int, float]:
        """The pair (j, upsilon) with 1-based j for x in [0, theta.a_hat).

        On a breakpoint the representation with upsilon = 0 is returned.
        """
        x = float(x)
        if not (0.0 <= x < self.a_upper):
            raise DomainError(f"x={x} outside [0, {self.a_upper})")
        bp = self.breakpoints
        # bp[I - j] = sum_{i>j} theta_i a_hat_i
        k = int(np.searchsorted(bp, x, side="right")) - 1
        j = self.I - k
        ups = (x - bp[k]) / self.theta[j - 1]
        return j, float(ups)

    def __call__(self, x):
        return gamma_a(self, x)


def curve_for(derived: DerivedModel) -> MinimizingCurve:
    return MinimizingCurve(a_hat=derived.a_hat, theta=derived.theta, b_hat=derived.b_hat)


def _fill(levels, theta, x):
    """Greedy fill of buffers I, I-1, ... up to ``levels``; x has shape (K,)."""
    w = theta * levels
    cum = np.concatenate([[0.0], np.cumsum(w[::-1])])  # workload held by the last k buffers
    I = len(levels)
    out = np.zeros((x.shape[0], I))
    for k in range(I):
        i = I - 1 - k
        part = np.clip(x - cum[k], 0.0, w[i])
        out[:, i] = part / theta[i]
    # keep exact fill levels where the buffer is saturated
    for i in range(I):
        full = out[:, i] >= levels[i]
        out[full, i] = levels[i]
    return out


def _as_points(x, lo, hi, what):
    arr = np.asarray(x, dtype=float)
    flat = np.atleast_1d(arr)
    if np.any(~np.isfinite(flat)) or np.any(flat < lo - _EDGE_TOL) or np.any(flat > hi + _EDGE_TOL):
        raise DomainError(f"{what}: workload outside [{lo}, {hi}]")
    return arr, np.clip(flat, lo, hi)


def gamma_a(curve: MinimizingCurve, x):
    """Buffer contents on the minimizing curve at workload x in [0, b].

    Scalar input returns a vector of length I; array input of shape (K,)
    returns shape (K, I).
    """
    arr, flat = _as_points(x, 0.0, curve.b, "gamma_a")
    out = _fill(curve.a_hat, curve.theta, np.minimum(flat, curve.a_upper))
    hi = flat > curve.a_upper
    if np.any(hi):
        span = curve.b - curve.a_upper
        lam = (flat[hi] - curve.a_upper) / span
        out[hi] = curve.a_hat + lam[:, None] * (curve.b_hat - curve.a_hat)
    return out[0] if arr.ndim == 0 else out


def cheapest_fill(derived: DerivedModel, x):
    """argmin of h_hat.xi over the box with theta.xi = x (greedy in h_hat*mu order)."""
    arr, flat = _as_points(x, 0.0, derived.b, "holding_h")
    out = _fill(np.asarray(derived.b_hat), np.asarray(derived.theta), flat)
    return out[0] if arr.ndim == 0 else out


def holding_h(derived: DerivedModel, x):
    """h(x) = min{h_hat . xi : xi in the buffer box, theta . xi = x}."""
    return cheapest_fill(derived, x) @ derived.h_hat


def h_a(curve: MinimizingCurve, h_hat, x):
    """Holding cost along the minimizing curve, defined on [0, theta.a_hat]."""
    _as_points(x, 0.0, curve.a_upper, "h_a")
    return gamma_a(curve, x) @ np.asarray(h_hat)


def h_breakpoints(derived: DerivedModel) -> np.ndarray:
    w = derived.theta * derived.b_hat
    return np.concatenate([[0.0], np.cumsum(w[::-1])])


def omega1(curve: MinimizingCurve, derived: DerivedModel, grid_step: float) -> float:
    """sup over [0, theta.a_hat] of |h_a - h|.

    Both functions are piecewise linear, so evaluating on the union of their
    kinks and a uniform grid gives the exact supremum.
    """
    if grid_step <= 0:
        raise DomainError("grid_step must be positive")
    top = curve.a_upper
    pts = np.concatenate([
        np.arange(0.0, top, grid_step), [top],
        curve.breakpoints, h_breakpoints(derived),
    ])
    pts = np.unique(pts[(pts >= 0) & (pts <= top)])
    diff = h_a(curve, derived.h_hat, pts) - holding_h(derived, pts)
    return float(np.max(np.abs(diff)))


def curve_table(curve: MinimizingCurve, derived: DerivedModel, num: int = 201):
    """Rows (x, gamma_1..gamma_I, h, h_a) on [0, b]; h_a is NaN above theta.a_hat."""
    xs = np.linspace(0.0, curve.b, num)
    g = gamma_a(curve, xs)
    hv = holding_h(derived, xs)
    ha = np.full_like(xs, np.nan)
    inside = xs <= curve.a_upper
    ha[inside] = h_a(curve, derived.h_hat, xs[inside])
    return np.column_stack([xs, g, hv, ha])
