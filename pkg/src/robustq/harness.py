"""Experiment plans, runners and reproducible tables.

None of the tables estimates the game value of the n-th system itself (an
inf over policies of a sup over measures, not computable by simulation).
The convergence table reports the candidate policy's cost under two fixed
adversaries: the one induced by the limiting value function, whose cost
should approach V(x0; eps), and the reference measure, whose cost must lie
below it. Read the columns as costs of those strategy pairs.
"""
from __future__ import annotations

import configparser
import csv
import hashlib
import io
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .adversary import (Adversary, constant_shift_adversary, equilibrium_adversary,
                        null_adversary, truncate)
from .errors import ConfigError
from .metrics import collapse_distance, horizon_for, wilson_interval
from .model import DerivedModel, ModelSpec, ScaledModel, derive, dump_model, parse_model, scale
from .policy import AdmitAllPolicy, CandidatePolicy, StaticPriorityPolicy
from .reduction import curve_for, gamma_a
from .rsdg import ValueFunction, solve_value
from .simulator import BatchResult, run_batch, run_replication

DEFAULT_LADDER = (25, 100, 400, 1600)


# --- plans -------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentPlan:
    spec: ModelSpec
    n_ladder: tuple = DEFAULT_LADDER
    replications: int = 4000
    null_replications: int = 1000
    seed: int = 0
    x0: float = 2.0
    horizon_tol: float = 0.005
    collapse_horizon: float = 5.0
    collapse_replications: int = 400
    eps_list: tuple = (0.25, 0.5, 1.0, 2.0)
    delta0_sweep: tuple = (0.2, 0.5, 1.0)
    policy: str = "candidate"
    adversary: str = "equilibrium"
    truncate: float | None = None
    grid_points: int = 4001
    out_dir: str | None = None
    workers: int = 1
    model_text: str = field(default="", compare=False)

    def __post_init__(self):
        ladder = tuple(int(n) for n in self.n_ladder)
        if any(b <= a for a, b in zip(ladder, ladder[1:])):
            raise ConfigError("n_ladder must be strictly ascending", key="experiment.n_ladder")
        if self.replications < 1 or self.collapse_replications < 1:
            raise ConfigError("replications must be positive", key="experiment.replications")
        object.__setattr__(self, "n_ladder", ladder)

    def identity(self) -> dict:
        """Everything that determines the outputs (not where they go or how fast)."""
        d = {k: getattr(self, k) for k in (
            "n_ladder", "replications", "null_replications", "seed", "x0", "horizon_tol",
            "collapse_horizon", "collapse_replications", "eps_list", "delta0_sweep", "policy",
            "adversary", "truncate", "grid_points")}
        d["n_ladder"] = list(d["n_ladder"])
        d["eps_list"] = list(d["eps_list"])
        d["delta0_sweep"] = list(d["delta0_sweep"])
        d["model"] = dump_model(self.spec)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.identity(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def with_(self, **changes) -> "ExperimentPlan":
        fields = {k: getattr(self, k) for k in self.__dataclass_fields__}
        fields.update({k: v for k, v in changes.items() if v is not None})
        return ExperimentPlan(**fields)


def _floats(raw):
    return tuple(float(p) for p in raw.split(",") if p.strip())


def plan_from_text(text: str, source: str = "<string>", **overrides) -> ExperimentPlan:
    """Model section plus an optional ``[experiment]`` section."""
    spec = parse_model(text, source)
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.read_string(text, source=source)
    kw = {}
    if cp.has_section("experiment"):
        sec = cp["experiment"]
        conv = {
            "n_ladder": lambda s: tuple(int(float(p)) for p in s.split(",") if p.strip()),
            "replications": int, "null_replications": int, "seed": int, "x0": float,
            "horizon_tol": float, "collapse_horizon": float, "collapse_replications": int,
            "eps_list": _floats, "delta0_sweep": _floats, "policy": str, "adversary": str,
            "truncate": float, "grid_points": int,
        }
        for key, raw in sec.items():
            if key not in conv:
                raise ConfigError(f"{source}: unknown key", key=f"experiment.{key}")
            try:
                kw[key] = conv[key](raw)
            except ValueError as exc:
                raise ConfigError(f"{source}: cannot parse {raw!r}: {exc}",
                                  key=f"experiment.{key}") from exc
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentPlan(spec=spec, model_text=text, **kw)


def load_plan(path, **overrides) -> ExperimentPlan:
    with open(path, encoding="utf-8") as fh:
        return plan_from_text(fh.read(), source=str(path), **overrides)


# --- strategy factories ------------------------------------------------------------

def make_policy(policy_id: str, scaled: ScaledModel, derived: DerivedModel, vf: ValueFunction,
                spec: ModelSpec | None = None):
    """``candidate``, ``admit-all`` or ``static:ORDER`` with ORDER 1-based input labels."""
    if policy_id == "candidate":
        return CandidatePolicy(scaled, derived, vf.beta_eps)
    if policy_id == "admit-all":
        return AdmitAllPolicy(scaled, derived)
    if policy_id.startswith("static:"):
        try:
            labels = [int(p) - 1 for p in policy_id.split(":", 1)[1].split(",")]
        except ValueError as exc:
            raise ConfigError(f"bad static order {policy_id!r}", key="policy") from exc
        if spec is not None:
            # input label -> canonical index
            inv = {int(orig): k for k, orig in enumerate(spec.perm)}
            try:
                labels = [inv[j] for j in labels]
            except KeyError as exc:
                raise ConfigError(f"unknown class in {policy_id!r}", key="policy") from exc
        try:
            return StaticPriorityPolicy(scaled, derived, labels)
        except ValueError as exc:
            raise ConfigError(str(exc), key="policy") from exc
    raise ConfigError(f"unknown policy {policy_id!r}", key="policy")


def make_adversary(adv_id: str, scaled: ScaledModel, derived: DerivedModel, vf: ValueFunction,
                   k: float | None = None, spec: ModelSpec | None = None) -> Adversary:
    """``null``, ``equilibrium`` or ``shift:VALUES``.

    VALUES is one number (arrival shift c1 on every class, c2 = 0), two
    numbers (c1, c2 on every class) or 2I numbers (c1 per class, then c2 per
    class, in input label order).
    """
    if adv_id == "null":
        adv = null_adversary(scaled)
    elif adv_id == "equilibrium":
        adv = equilibrium_adversary(scaled, derived, vf)
    elif adv_id.startswith("shift:"):
        try:
            vals = [float(p) for p in adv_id.split(":", 1)[1].split(",")]
        except ValueError as exc:
            raise ConfigError(f"bad shift {adv_id!r}", key="adversary") from exc
        I = scaled.I
        if len(vals) == 1:
            c1, c2 = np.full(I, vals[0]), np.zeros(I)
        elif len(vals) == 2:
            c1, c2 = np.full(I, vals[0]), np.full(I, vals[1])
        elif len(vals) == 2 * I:
            c1, c2 = np.array(vals[:I]), np.array(vals[I:])
            if spec is not None:
                c1, c2 = c1[spec.perm], c2[spec.perm]
        else:
            raise ConfigError(f"shift needs 1, 2 or {2 * I} values", key="adversary")
        adv = constant_shift_adversary(c1, c2, scaled)
    else:
        raise ConfigError(f"unknown adversary {adv_id!r}", key="adversary")
    return adv if k is None else truncate(adv, k)


def initial_state(derived: DerivedModel, scaled: ScaledModel, x0: float) -> np.ndarray:
    """Integer state on the minimizing curve at workload x0."""
    g = gamma_a(curve_for(derived), x0)
    return np.minimum(np.rint(g * scaled.sqrt_n).astype(np.int64), scaled.b_n)


# --- tables ----------------------------------------------------------------------

@dataclass
class Table:
    name: str
    columns: tuple
    rows: list
    checks: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def column(self, name, **where):
        k = self.columns.index(name)
        out = []
        for r in self.rows:
            if all(r[self.columns.index(c)] == v for c, v in where.items()):
                out.append(r[k])
        return out

    def to_csv(self, header: dict | None = None) -> str:
        buf = io.StringIO()
        for key, val in (header or {}).items():
            buf.write(f"# {key}: {val}\n")
        for note in self.notes:
            buf.write(f"# note: {note}\n")
        for key, ok in self.checks.items():
            buf.write(f"# check {key}: {'pass' if ok else 'FAIL'}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([_fmt(v) for v in r])
        return buf.getvalue()


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def provenance(plan: ExperimentPlan, extra: dict | None = None) -> dict:
    head = {"code": f"robustq {__version__}", "config_sha256": plan.config_hash(),
            "seed": plan.seed}
    head.update(extra or {})
    return head


def write_table(table: Table, plan: ExperimentPlan, out_dir=None, extra=None) -> str | None:
    out_dir = out_dir or plan.out_dir
    if out_dir is None:
        return None
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"{table.name}.csv")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(table.to_csv(provenance(plan, extra)))
    return path


# --- experiments ------------------------------------------------------------------

def _solve(plan: ExperimentPlan):
    derived = derive(plan.spec)
    vf = solve_value(derived, N=plan.grid_points)
    return derived, vf


def _mean_ci(values):
    v = np.asarray(values, dtype=float)
    return float(np.mean(v)), 1.96 * float(np.std(v, ddof=1)) / math.sqrt(len(v))


def convergence_experiment(plan: ExperimentPlan, solved=None) -> Table:
    """Candidate-policy cost against V(x0; eps) along the n-ladder.

    Each cell is estimated with the Dynkin control variate of the solved
    value function (unbiased, see ``BatchResult.controlled``). The null
    adversary runs on the first ``null_replications`` seeds of the same
    stream, so the two columns are paired.
    """
    derived, vf = solved or _solve(plan)
    V0 = float(vf.value(plan.x0))
    cols = ("n", "adversary", "replications", "horizon", "mean", "ci", "raw_mean", "raw_ci",
            "V_x0", "gap", "tail_bound")
    rows = []
    gaps = []
    paired_ok = True
    for n in plan.n_ladder:
        sc = scale(plan.spec, derived, n)
        X0 = initial_state(derived, sc, plan.x0)
        pol = make_policy(plan.policy, sc, derived, vf, plan.spec)
        eq = make_adversary("equilibrium", sc, derived, vf, plan.truncate)
        T = horizon_for(sc, eq, plan.horizon_tol)
        b_eq = run_batch(sc, pol, eq, T, plan.replications, plan.seed, x0=X0, control=vf,
                         workers=plan.workers)
        k = min(plan.null_replications, plan.replications)
        b_null = run_batch(sc, pol, null_adversary(sc), T, k, plan.seed, x0=X0, control=vf,
                           workers=plan.workers)
        for name, b in (("equilibrium", b_eq), ("null", b_null)):
            m, h = _mean_ci(b.controlled)
            rm, rh = _mean_ci(b.total)
            rows.append((n, name, len(b), T, m, h, rm, rh, V0, m - V0, b.tail))
            if name == "equilibrium":
                gaps.append((abs(m - V0), h))
        diff = b_null.controlled - b_eq.controlled[:k]
        dm, dh = _mean_ci(diff)
        paired_ok = paired_ok and dm <= dh
    absgap = [g for g, _ in gaps]
    table = Table("convergence", cols, rows)
    table.checks["gap_decreasing"] = all(b < a for a, b in zip(absgap, absgap[1:]))
    table.checks["final_gap_within_5pct"] = absgap[-1] <= 0.05 * abs(V0) + gaps[-1][1]
    table.checks["null_below_equilibrium"] = paired_ok
    table.notes.append("costs of (candidate policy, fixed adversary); not estimates of the n-th game value")
    return table


def collapse_experiment(plan: ExperimentPlan, solved=None) -> tuple[Table, Table]:
    """Distance to the minimizing curve and forced-rejection frequency along the ladder."""
    derived, vf = solved or _solve(plan)
    T = plan.collapse_horizon
    reps = plan.collapse_replications
    cols = ("n", "replications", "horizon", "median_distance", "q25", "q75", "p_tau",
            "wilson_lo", "wilson_hi")
    rows = []
    for n in plan.n_ladder:
        med, q25, q75, k = _collapse_cell(plan.spec, derived, vf, n, T, reps, plan)
        lo, hi = wilson_interval(k, reps)
        rows.append((n, reps, T, med, q25, q75, k / reps, lo, hi))
    table = Table("collapse", cols, rows)
    med = [r[3] for r in rows]
    p = [r[6] for r in rows]
    table.checks["median_distance_decreasing"] = all(b < a for a, b in zip(med, med[1:]))
    table.checks["p_tau_decreasing"] = all(b < a for a, b in zip(p, p[1:]))
    table.checks["wilson_first_last_disjoint"] = rows[-1][8] < rows[0][7]

    sweep_cols = ("delta0", "n", "replications", "median_distance", "p_tau")
    sweep = []
    sreps = min(reps, 100)
    for d0 in plan.delta0_sweep:
        spec_d = plan.spec.with_(delta0=d0)
        der_d = derive(spec_d)
        for n in plan.n_ladder:
            m, _, _, k = _collapse_cell(spec_d, der_d, vf, n, T, sreps, plan)
            sweep.append((d0, n, sreps, m, k / sreps))
    return table, Table("collapse_delta0", sweep_cols, sweep)


def _collapse_cell(spec, derived, vf, n, T, reps, plan):
    sc = scale(spec, derived, n)
    X0 = initial_state(derived, sc, plan.x0)
    pol = make_policy(plan.policy, sc, derived, vf, spec)
    adv = make_adversary(plan.adversary, sc, derived, vf, plan.truncate, spec)
    curve = curve_for(derived)
    dist = np.empty(reps)
    hits = 0
    for j in range(reps):
        traj, _ = run_replication(sc, pol, adv, T, plan.seed, j, x0=X0)
        dist[j] = collapse_distance(traj, curve, sc, T)
        hits += traj.first_forced_rejection() < T
    q25, med, q75 = np.percentile(dist, [25, 50, 75])
    return float(med), float(q25), float(q75), int(hits)


def epsilon_sweep(spec: ModelSpec, eps_list, x0: float, grid_points: int = 4001,
                  strict_tol: float = 1e-6) -> Table:
    """V(x0; eps) and beta_eps over the ambiguity levels, plus a small-eps proxy."""
    derived = derive(spec)
    cols = ("epsilon", "V_x0", "beta_eps", "role")
    rows = []
    for eps in eps_list:
        vf = solve_value(derived, epsilon=eps, N=grid_points)
        rows.append((float(eps), float(vf.value(x0)), vf.beta_eps, "sweep"))
    proxies = {}
    for eps in (1e-6, 1e-3):
        vf = solve_value(derived, epsilon=eps, N=grid_points)
        proxies[eps] = float(vf.value(x0))
        rows.append((eps, proxies[eps], vf.beta_eps, "small-eps proxy"))
    V = [r[1] for r in rows if r[3] == "sweep"]
    beta = [r[2] for r in rows if r[3] == "sweep"]
    table = Table("eps_sweep", cols, rows)
    table.checks["V_decreasing_in_eps"] = all(b < a - strict_tol for a, b in zip(V, V[1:]))
    table.checks["beta_continuity"] = all(abs(b - a) <= 0.5 * derived.b for a, b in zip(beta, beta[1:]))
    table.checks["beta_at_most_b"] = all(x <= derived.b + 1e-12 for x in beta)
    table.checks["small_eps_within_1pct"] = abs(proxies[1e-3] - proxies[1e-6]) <= 0.01 * abs(proxies[1e-6])
    if not table.checks["V_decreasing_in_eps"]:
        table.notes.append("V is not decreasing in eps; see the README section on the ambiguity parameter")
    return table


def simulate_cell(plan: ExperimentPlan, n: int, solved=None) -> tuple[BatchResult, dict]:
    """One (n, policy, adversary) cell without control variate."""
    derived, vf = solved or _solve(plan)
    sc = scale(plan.spec, derived, n)
    X0 = initial_state(derived, sc, plan.x0)
    pol = make_policy(plan.policy, sc, derived, vf, plan.spec)
    adv = make_adversary(plan.adversary, sc, derived, vf, plan.truncate, plan.spec)
    T = horizon_for(sc, adv, plan.horizon_tol)
    batch = run_batch(sc, pol, adv, T, plan.replications, plan.seed, x0=X0, workers=plan.workers)
    meta = {"n": n, "horizon": T, **pol.describe(), **adv.describe()}
    return batch, meta
