"""Maximizer strategies acting on the arrival and service intensities.

Every adversary is described to the simulation kernel by ``AdversaryParams``:
a kind code, two coefficient vectors and a truncation level. The scaled
perturbations are

    null          psi1_hat = psi2_hat = 0
    equilibrium   psi_hat_j = coef_j * V'(theta . x_hat)
    shift         psi_hat_j = coef_j

and intensities follow from ``psi1 = lam_n + psi1_hat*sqrt(lam*n)`` and
``psi2 = mu_n + psi2_hat*sqrt(mu*n)``. Truncation zeroes any hat whose
absolute value exceeds ``k``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from numba import njit

from .errors import IntensityNonpositive, NonFiniteIntensity
from .model import DerivedModel, ScaledModel
from .rsdg import ValueFunction, _interp_uniform

NULL, EQUILIBRIUM, SHIFT = 0, 1, 2

# kernel status codes
OK, NONFINITE, NONPOSITIVE = 0, 2, 3


@njit(cache=True)
def _hats(kind, x_hat, theta, coef1, coef2, trunc, g0, gdx, dV, r, h1, h2):
    I = x_hat.shape[0]
    if kind == NULL:
        for i in range(I):
            h1[i] = 0.0
            h2[i] = 0.0
        return
    d = 1.0
    if kind == EQUILIBRIUM:
        w = 0.0
        for i in range(I):
            w += theta[i] * x_hat[i]
        d = _interp_uniform(w, g0, gdx, dV)
        if d < 0.0:
            d = 0.0
        elif d > r:
            d = r
    for i in range(I):
        v1 = coef1[i] * d
        v2 = coef2[i] * d
        # written so that a NaN passes through to the intensity check
        h1[i] = 0.0 if abs(v1) > trunc else v1
        h2[i] = 0.0 if abs(v2) > trunc else v2


@njit(cache=True)
def _intensities(h1, h2, lam_n, mu_n, lam_s, mu_s, p1, p2):
    for i in range(h1.shape[0]):
        p1[i] = lam_n[i] + h1[i] * lam_s[i]
        p2[i] = mu_n[i] + h2[i] * mu_s[i]
        if not (math.isfinite(p1[i]) and math.isfinite(p2[i])):
            return NONFINITE
        if p1[i] <= 0.0 or p2[i] <= 0.0:
            return NONPOSITIVE
    return OK


@dataclass(frozen=True)
class IntensityPair:
    psi1: np.ndarray
    psi2: np.ndarray
    psi1_hat: np.ndarray
    psi2_hat: np.ndarray


@dataclass(frozen=True)
class AdversaryParams:
    kind: int
    coef1: np.ndarray
    coef2: np.ndarray
    trunc: float
    g0: float
    gdx: float
    dV: np.ndarray
    r: float


def _root_scale(scaled: ScaledModel):
    return np.sqrt(scaled.lam * scaled.n), np.sqrt(scaled.mu * scaled.n)


def hats_from_intensities(scaled: ScaledModel, psi1, psi2):
    """Invert the intensity parametrization: (psi1, psi2) -> (psi1_hat, psi2_hat)."""
    ls, ms = _root_scale(scaled)
    return (np.asarray(psi1) - scaled.lam_n) / ls, (np.asarray(psi2) - scaled.mu_n) / ms


def intensities_from_hats(scaled: ScaledModel, psi1_hat, psi2_hat):
    ls, ms = _root_scale(scaled)
    return scaled.lam_n + np.asarray(psi1_hat) * ls, scaled.mu_n + np.asarray(psi2_hat) * ms


class Adversary:
    """Base class: state feedback through the jitted ``_hats`` routine."""

    name = "adversary"

    def __init__(self, params: AdversaryParams):
        self.params = params

    @property
    def trunc(self) -> float:
        return self.params.trunc

    def hat_bound(self) -> float:
        """Sup over states of |psi_hat| before truncation."""
        p = self.params
        scale = p.r if p.kind == EQUILIBRIUM else 1.0
        if p.kind == NULL:
            return 0.0
        return float(max(np.max(np.abs(p.coef1)), np.max(np.abs(p.coef2))) * scale)

    def hats(self, x_hat, theta):
        p = self.params
        x_hat = np.ascontiguousarray(x_hat, dtype=float)
        h1 = np.empty(len(x_hat))
        h2 = np.empty(len(x_hat))
        _hats(p.kind, x_hat, np.ascontiguousarray(theta, dtype=float), p.coef1, p.coef2, p.trunc,
              p.g0, p.gdx, p.dV, p.r, h1, h2)
        return h1, h2

    def intensities(self, scaled: ScaledModel, x_hat, theta=None) -> IntensityPair:
        """Intensities at pre-event scaled state x_hat; theta defaults to 1/mu."""
        if theta is None:
            theta = 1.0 / scaled.mu
        h1, h2 = self.hats(x_hat, theta)
        ls, ms = _root_scale(scaled)
        p1 = np.empty_like(h1)
        p2 = np.empty_like(h2)
        status = _intensities(h1, h2, scaled.lam_n, scaled.mu_n, ls, ms, p1, p2)
        if status == NONFINITE:
            raise NonFiniteIntensity(f"{self.name}: non-finite intensity at {list(x_hat)}")
        if status == NONPOSITIVE:
            raise IntensityNonpositive(f"{self.name}: nonpositive intensity at n={scaled.n}",
                                       min_n=self.min_admissible_n(scaled))
        return IntensityPair(psi1=p1, psi2=p2, psi1_hat=h1, psi2_hat=h2)

    def check(self, scaled: ScaledModel):
        """Raise IntensityNonpositive if some reachable state gives a nonpositive rate."""
        ls, ms = _root_scale(scaled)
        c = self._effective_bounds()
        if np.any(scaled.lam_n - c[0] * ls <= 0) or np.any(scaled.mu_n - c[1] * ms <= 0):
            raise IntensityNonpositive(
                f"{self.name}: perturbation too large at n={scaled.n}",
                min_n=self.min_admissible_n(scaled))

    def _effective_bounds(self):
        """Per-class worst negative hats (as nonnegative numbers) after truncation."""
        p = self.params
        if p.kind == NULL:
            z = np.zeros_like(p.coef1)
            return z, z
        lo = (0.0, p.r) if p.kind == EQUILIBRIUM else (1.0, 1.0)
        out = []
        for coef in (p.coef1, p.coef2):
            vals = np.stack([coef * lo[0], coef * lo[1]])
            vals = np.where(np.abs(vals) <= p.trunc, vals, 0.0)
            out.append(np.maximum(0.0, -vals.min(axis=0)))
        return out[0], out[1]

    def min_admissible_n(self, scaled: ScaledModel) -> int:
        """Smallest n with lam*n + lam_hat*sqrt(n) - c*sqrt(lam*n) > 0 (and mu alike)."""
        c1, c2 = self._effective_bounds()
        lam_hat = (scaled.lam_n - scaled.lam * scaled.n) / scaled.sqrt_n
        mu_hat = (scaled.mu_n - scaled.mu * scaled.n) / scaled.sqrt_n
        need = 1
        for base, hat, c in ((scaled.lam, lam_hat, c1), (scaled.mu, mu_hat, c2)):
            # sqrt(n) * base > c*sqrt(base) - hat
            root = (c * np.sqrt(base) - hat) / base
            root = root[root > 0]
            if root.size:
                need = max(need, int(math.floor(float(np.max(root)) ** 2)) + 1)
        return need

    def describe(self) -> dict:
        d = {"adversary": self.name}
        if math.isfinite(self.trunc):
            d["truncate"] = self.trunc
        return d


class NullAdversary(Adversary):
    name = "null"


class EquilibriumAdversary(Adversary):
    name = "equilibrium"

    def __init__(self, params, vf: ValueFunction):
        super().__init__(params)
        self.vf = vf

    def describe(self):
        d = super().describe()
        d.update(epsilon=self.vf.epsilon, beta_eps=self.vf.beta_eps, C0=self.hat_bound())
        return d


class ConstantShiftAdversary(Adversary):
    name = "shift"

    def describe(self):
        d = super().describe()
        d.update(c1=self.params.coef1.tolist(), c2=self.params.coef2.tolist())
        return d


_NO_TABLE = np.zeros(2)


def null_adversary(scaled: ScaledModel | None = None) -> NullAdversary:
    I = 1 if scaled is None else scaled.I
    z = np.zeros(I)
    return NullAdversary(AdversaryParams(NULL, z, z, np.inf, 0.0, 1.0, _NO_TABLE, 0.0))


def equilibrium_coefficients(scaled: ScaledModel, derived: DerivedModel, epsilon: float):
    """Per-class multipliers of V' for the arrival and service hats."""
    ts = derived.theta * derived.sigma_hat
    tsn = scaled.theta_n * derived.sigma_hat
    base = ts * derived.eps_hat * derived.sigma ** 2 * epsilon / np.sum(tsn ** 2 * derived.eps_hat)
    k1 = np.asarray(scaled.kappa1, dtype=float)
    k2 = np.asarray(scaled.kappa2, dtype=float)
    c1 = k1 * math.sqrt(2.0) / (k1 + k2) * base
    c2 = -k2 * math.sqrt(2.0) / ((k1 + k2) * np.sqrt(derived.rho)) * base
    return np.ascontiguousarray(c1), np.ascontiguousarray(c2)


def equilibrium_adversary(scaled: ScaledModel, derived: DerivedModel,
                          vf: ValueFunction) -> EquilibriumAdversary:
    c1, c2 = equilibrium_coefficients(scaled, derived, vf.epsilon)
    params = AdversaryParams(EQUILIBRIUM, c1, c2, np.inf, float(vf.grid[0]), vf.dx,
                             np.ascontiguousarray(vf.dV, dtype=float), float(vf.r))
    adv = EquilibriumAdversary(params, vf)
    adv.check(scaled)
    return adv


def constant_shift_adversary(c1, c2, scaled: ScaledModel | None = None) -> ConstantShiftAdversary:
    c1 = np.ascontiguousarray(np.atleast_1d(np.asarray(c1, dtype=float)))
    c2 = np.ascontiguousarray(np.atleast_1d(np.asarray(c2, dtype=float)))
    if scaled is not None:
        c1 = np.ascontiguousarray(np.broadcast_to(c1, (scaled.I,)), dtype=float)
        c2 = np.ascontiguousarray(np.broadcast_to(c2, (scaled.I,)), dtype=float)
    adv = ConstantShiftAdversary(AdversaryParams(SHIFT, c1, c2, np.inf, 0.0, 1.0, _NO_TABLE, 0.0))
    if scaled is not None:
        adv.check(scaled)
    return adv


def truncate(adversary: Adversary, k: float) -> Adversary:
    """Zero every hat with |hat| > k. Nested truncations keep the tightest level."""
    if not k >= 0:
        raise ValueError("truncation level must be nonnegative")
    params = replace(adversary.params, trunc=float(min(k, adversary.params.trunc)))
    clone = object.__new__(type(adversary))
    clone.__dict__.update(adversary.__dict__)
    clone.params = params
    return clone


def c0_bound(scaled: ScaledModel, derived: DerivedModel, epsilon: float) -> float:
    """Uniform bound on |psi_hat| under the equilibrium adversary (V' <= r)."""
    c1, c2 = equilibrium_coefficients(scaled, derived, epsilon)
    return float(max(np.max(np.abs(c1)), np.max(np.abs(c2))) * derived.r)
