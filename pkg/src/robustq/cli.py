"""Command-line entry point ``robustq``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 a check inside an experiment failed.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

from . import harness
from .errors import (ConfigError, DomainError, IntensityNonpositive, NoConvergence,
                     NonFiniteIntensity, PolicyInfeasible, StepTooLarge)
from .metrics import cost_csv
from .model import derive
from .reduction import curve_for, curve_table
from .rsdg import mc_game_value, solve_value

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 2, 3, 4
NUMERIC_ERRORS = (NoConvergence, NonFiniteIntensity, IntensityNonpositive, StepTooLarge,
                  PolicyInfeasible, DomainError, FloatingPointError)


def _common(p):
    p.add_argument("--config", required=True, help="model file (INI, [model] section)")
    p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--workers", type=int, default=1)


def _strategies(p):
    p.add_argument("--policy", help="candidate | admit-all | static:ORDER (1-based labels)")
    p.add_argument("--adversary", help="null | equilibrium | shift:c1[,c2,...]")
    p.add_argument("--truncate", type=float, help="zero perturbations with |psi_hat| > k")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="robustq", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="solve the workload game and write V, V'")
    _common(p)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--grid", type=int, default=4001, help="number of grid points")

    p = sub.add_parser("simulate", help="one (n, policy, adversary) cell")
    _common(p)
    _strategies(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--reps", type=int)
    p.add_argument("--x0", type=float)

    p = sub.add_parser("experiment", help="full experiment tables")
    p.add_argument("which", choices=["convergence", "collapse", "eps-sweep"])
    _common(p)
    _strategies(p)
    p.add_argument("--n", type=int, nargs="+", help="n ladder")
    p.add_argument("--reps", type=int)

    p = sub.add_parser("oracle", help="independent checks of the solver")
    p.add_argument("which", choices=["mc-game"])
    _common(p)
    p.add_argument("--x0", type=float, action="append", help="initial workload (repeatable)")
    p.add_argument("--reps", type=int, default=4000, help="antithetic pairs")
    p.add_argument("--dt", type=float)

    p = sub.add_parser("curve", help="minimizing curve utilities")
    p.add_argument("which", choices=["dump"])
    _common(p)
    p.add_argument("--points", type=int, default=201)
    return ap


def _plan(args, **extra):
    over = dict(seed=args.seed, out_dir=args.out, workers=getattr(args, "workers", None),
                policy=getattr(args, "policy", None), adversary=getattr(args, "adversary", None),
                truncate=getattr(args, "truncate", None))
    if getattr(args, "reps", None) is not None:
        over["replications"] = args.reps
        over["collapse_replications"] = args.reps
        over["null_replications"] = args.reps
    over.update(extra)
    return harness.load_plan(args.config, **over)


def _emit(text, out_dir, name):
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, name)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        print(path)
    else:
        sys.stdout.write(text)


def cmd_solve(args):
    plan = _plan(args)
    derived = derive(plan.spec)
    vf = solve_value(derived, epsilon=args.epsilon, N=args.grid)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        paths = vf.save(os.path.join(args.out, "value.csv"))
        print("\n".join(paths))
    print(json.dumps(vf.header(), indent=2))
    return EXIT_OK


def cmd_simulate(args):
    plan = _plan(args, x0=args.x0)
    batch, meta = harness.simulate_cell(plan, args.n)
    text = "".join(f"# {k}: {v}\n" for k, v in harness.provenance(plan, meta).items())
    text += cost_csv(batch, args.n, plan.policy, plan.adversary)
    _emit(text, args.out, f"simulate_n{args.n}.csv")
    m, h = batch.mean_ci()
    print(f"n={args.n} mean total cost {m:.6g} +/- {h:.3g} ({len(batch)} replications)",
          file=sys.stderr)
    return EXIT_OK


def cmd_experiment(args):
    plan = _plan(args, n_ladder=tuple(args.n) if args.n else None)
    if args.which == "eps-sweep":
        tables = [harness.epsilon_sweep(plan.spec, plan.eps_list, plan.x0, plan.grid_points)]
    else:
        derived = derive(plan.spec)
        solved = (derived, solve_value(derived, N=plan.grid_points))
        if args.which == "convergence":
            tables = [harness.convergence_experiment(plan, solved)]
        else:
            tables = list(harness.collapse_experiment(plan, solved))
    ok = True
    for t in tables:
        if plan.out_dir:
            print(harness.write_table(t, plan))
        else:
            sys.stdout.write(t.to_csv(harness.provenance(plan)))
        for name, passed in t.checks.items():
            print(f"{t.name}.{name}: {'pass' if passed else 'FAIL'}", file=sys.stderr)
        ok = ok and t.passed
    return EXIT_OK if ok else EXIT_CHECK


def cmd_oracle(args):
    plan = _plan(args)
    derived = derive(plan.spec)
    vf = solve_value(derived, N=plan.grid_points)
    starts = args.x0 or [0.0, vf.beta_eps / 2, vf.beta_eps]
    rows = ["x0,V,mc_mean,ci,agree"]
    ok = True
    for x0 in starts:
        est = mc_game_value(derived, vf, x0, dt=args.dt, replications=args.reps,
                            seed=plan.seed, workers=args.workers)
        V = float(vf.value(x0))
        agree = abs(est.mean - V) <= est.half_width
        ok = ok and agree
        rows.append(f"{x0!r},{V!r},{est.mean!r},{est.half_width!r},{int(agree)}")
    _emit("".join(f"# {k}: {v}\n" for k, v in harness.provenance(plan).items())
          + "\n".join(rows) + "\n", args.out, "oracle_mc_game.csv")
    return EXIT_OK if ok else EXIT_CHECK


def cmd_curve(args):
    plan = _plan(args)
    derived = derive(plan.spec)
    tab = curve_table(curve_for(derived), derived, args.points)
    I = derived.I
    head = ",".join(["x"] + [f"gamma{i + 1}" for i in range(I)] + ["h", "h_a"])
    body = "\n".join(",".join(repr(float(v)) for v in row) for row in tab)
    _emit(head + "\n" + body + "\n", args.out, "curve.csv")
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "simulate": cmd_simulate, "experiment": cmd_experiment,
            "oracle": cmd_oracle, "curve": cmd_curve}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "seed", None) is not None and not 0 <= args.seed < 2 ** 64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERIC_ERRORS as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
