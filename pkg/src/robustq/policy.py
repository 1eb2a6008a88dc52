"""Service/rejection policies for the n-th system.

Decisions are made by small jitted routines shared with the event
simulator, so the Python-level methods and the simulation kernel make
exactly the same choices. The kernel identifies a policy by ``KIND`` and
its parameter arrays (see ``PolicyParams``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import PolicyInfeasible
from .model import DerivedModel, ScaledModel

CANDIDATE, ADMIT_ALL, STATIC = 0, 1, 2

ADMIT, FORCED, OVERLOAD = 0, 1, 2

# status codes returned by the jitted allocators
OK, CASE_UNCOVERED = 0, 5


@njit(cache=True)
def _low_priority(x_hat, a_hat):
    I = x_hat.shape[0]
    for i in range(I - 1, -1, -1):
        if x_hat[i] < a_hat[i]:
            return i
    return I - 1


@njit(cache=True)
def _allocate(kind, x_hat, a_hat, rho, order, U):
    """Fill U with the effort vector; returns a status code."""
    I = x_hat.shape[0]
    empty = True
    for i in range(I):
        U[i] = 0.0
        if x_hat[i] > 0.0:
            empty = False
    if empty:
        return OK
    if kind == CANDIDATE:
        low = _low_priority(x_hat, a_hat)
        s = 0.0
        for i in range(I):
            if i != low and x_hat[i] > 0.0:
                s += rho[i]
        if s > 0.0:
            for i in range(I):
                if i != low and x_hat[i] > 0.0:
                    U[i] = rho[i] / s
            return OK
        # H+ empty: only the last class may hold work
        if low != I - 1:
            return CASE_UNCOVERED
        for i in range(I - 1):
            if x_hat[i] != 0.0:
                return CASE_UNCOVERED
        U[I - 1] = 1.0
        return OK
    if kind == ADMIT_ALL:
        s = 0.0
        for i in range(I):
            if x_hat[i] > 0.0:
                s += rho[i]
        for i in range(I):
            if x_hat[i] > 0.0:
                U[i] = rho[i] / s
        return OK
    # static priority: order[k] is the class served k-th
    for k in range(I):
        i = order[k]
        if x_hat[i] > 0.0:
            U[i] = 1.0
            return OK
    return OK


@njit(cache=True)
def _reject(kind, X, cls, cap, i_star, workload, a):
    if X[cls] >= cap[cls]:
        return FORCED
    if kind == CANDIDATE and cls == i_star and workload >= a:
        return OVERLOAD
    return ADMIT


@dataclass(frozen=True)
class PolicyParams:
    kind: int
    a_hat: np.ndarray
    rho: np.ndarray
    cap: np.ndarray
    i_star: int
    a: float
    order: np.ndarray


class _Policy:
    kind = -1
    name = "policy"

    def __init__(self, scaled: ScaledModel, derived: DerivedModel, a_hat=None, a=np.inf,
                 i_star=-1, order=None):
        I = derived.I
        self.scaled = scaled
        self.derived = derived
        self.params = PolicyParams(
            kind=self.kind,
            a_hat=np.ascontiguousarray(derived.a_hat if a_hat is None else a_hat, dtype=float),
            rho=np.ascontiguousarray(derived.rho, dtype=float),
            cap=np.ascontiguousarray(scaled.b_n, dtype=np.int64),
            i_star=int(i_star), a=float(a),
            order=np.ascontiguousarray(np.arange(I) if order is None else order, dtype=np.int64),
        )

    @property
    def rho(self):
        return self.params.rho

    def allocate(self, x_hat) -> np.ndarray:
        x_hat = np.ascontiguousarray(x_hat, dtype=float)
        U = np.zeros(len(x_hat))
        p = self.params
        status = _allocate(p.kind, x_hat, p.a_hat, p.rho, p.order, U)
        if status != OK:
            raise PolicyInfeasible(f"allocation case not covered at state {x_hat.tolist()}")
        return U

    def _counts(self, x_hat):
        return np.rint(np.asarray(x_hat, dtype=float) * self.scaled.sqrt_n).astype(np.int64)

    def reject_decision(self, x_hat, arriving_class: int, workload: float | None = None) -> int:
        """ADMIT, FORCED or OVERLOAD for an arrival seeing pre-arrival state x_hat."""
        if workload is None:
            workload = float(self.scaled.theta_n @ np.asarray(x_hat, dtype=float))
        p = self.params
        return int(_reject(p.kind, self._counts(x_hat), int(arriving_class), p.cap, p.i_star,
                           float(workload), p.a))

    def describe(self) -> dict:
        return {"policy": self.name}


class CandidatePolicy(_Policy):
    """Low priority to the cheapest buffer still below its fill level; overload
    rejections from the cheapest-to-reject class once workload reaches a."""

    kind = CANDIDATE
    name = "candidate"

    def __init__(self, scaled: ScaledModel, derived: DerivedModel, beta_eps: float):
        self.beta_eps = float(beta_eps)
        a = min(self.beta_eps, derived.a_upper)
        super().__init__(scaled, derived, a_hat=derived.a_hat, a=a, i_star=derived.i_star)

    @property
    def a(self) -> float:
        return self.params.a

    @property
    def a_hat(self):
        return self.params.a_hat

    @property
    def i_star(self) -> int:
        return self.params.i_star

    def low_priority_class(self, x_hat) -> int:
        return int(_low_priority(np.ascontiguousarray(x_hat, dtype=float), self.params.a_hat))

    def high_priority_classes(self, x_hat):
        low = self.low_priority_class(x_hat)
        return [i for i in range(self.derived.I) if i != low]

    def describe(self):
        return {"policy": self.name, "a": self.a, "beta_eps": self.beta_eps,
                "delta0": float(self.derived.b_hat[0] - self.derived.a_hat[0]),
                "i_star": self.i_star, "a_hat": self.a_hat.tolist()}


class AdmitAllPolicy(_Policy):
    """Work-conserving, effort proportional to traffic intensity over nonempty
    classes; only forced rejections."""

    kind = ADMIT_ALL
    name = "admit-all"


class StaticPriorityPolicy(_Policy):
    """Serve the first nonempty class of ``order`` at full rate; only forced rejections."""

    kind = STATIC
    name = "static"

    def __init__(self, scaled: ScaledModel, derived: DerivedModel, order):
        order = np.asarray(order, dtype=np.int64)
        if sorted(order.tolist()) != list(range(derived.I)):
            raise ValueError(f"order must be a permutation of 0..{derived.I - 1}")
        super().__init__(scaled, derived, order=order)

    def describe(self):
        return {"policy": self.name, "order": self.params.order.tolist()}


def admit_all_work_conserving(scaled, derived) -> AdmitAllPolicy:
    return AdmitAllPolicy(scaled, derived)


def static_priority(scaled, derived, order) -> StaticPriorityPolicy:
    return StaticPriorityPolicy(scaled, derived, order)


def cmu_order(derived: DerivedModel):
    """Classes by decreasing h_hat*mu, i.e. the canonical order."""
    return np.arange(derived.I)
