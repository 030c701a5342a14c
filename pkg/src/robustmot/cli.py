"""Command-line front end.

Exit codes: 0 success, 1 a superhedge or duality check failed,
2 input error, 3 infeasible calibration, 4 path budget exceeded.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import Optional, Sequence

import numpy as np

from .discretise import DiscretisationError, exact_sup_distance, hat_pipeline
from .hedging import Schedule, SemiStaticStrategy, TabulatedRule, verify_superhedge
from .io import (SpecError, fmt, load_spec, pcp_to_json, read_marginal, read_path_csv, read_puts_csv,
                 read_strategy_csv, write_csv, write_strategy_csv)
from .lp import INFEASIBLE
from .marginals import ArbitrageError, marginal_from_puts, puts_from_marginal
from .mot_lp import (BudgetExceeded, DualityGapError, default_penalty_N, dual_solve, penalty_sweep,
                     primal_solve, rebalance_mask)

EXIT_OK, EXIT_VIOLATION, EXIT_INPUT, EXIT_INFEASIBLE, EXIT_BUDGET = 0, 1, 2, 3, 4


def _outdir(path: Optional[str]) -> str:
    out = path or "."
    os.makedirs(out, exist_ok=True)
    return out


def _threads(n: Optional[int]) -> int:
    return n if n and n > 0 else (os.cpu_count() or 1)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_discretise(args) -> int:
    p = read_path_csv(args.input)
    try:
        hp = hat_pipeline(p, None, args.N)
    except DiscretisationError as e:
        raise SpecError(str(e)) from None
    doc = pcp_to_json(hp.hat)
    doc["errors"] = {
        "naive": float(exact_sup_distance(hp.naive, p)),
        "check_vs_naive": float(exact_sup_distance(hp.check, hp.naive)),
        "hat": float(exact_sup_distance(hp.hat, p)),
        "hat_bound": 2.0 ** -(args.N - 3),
    }
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "discretised.json"), "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _solve_eta(spec, eta, tol):
    model, g = spec.model, spec.model.payoff_values(spec.payoff)
    pr = primal_solve(model, g, spec.options, spec.pset, eta)
    du = dual_solve(model, g, spec.options, spec.pset, eta=eta, distance_bound="lower")
    N = default_penalty_N(eta)
    pen = dual_solve(model, g, spec.options, spec.pset, penalty_N=N, eta=eta, distance_bound="lower") \
        if N is not None else None
    if pr.ok and du.ok and abs(du.value - pr.value) > tol:
        raise DualityGapError(f"eta={eta}: primal {pr.value} vs dual {du.value}")
    return pr, du, N, pen


def cmd_bounds(args) -> int:
    spec = load_spec(args.spec)
    out = _outdir(args.out)
    etas = spec.eta_schedule
    _ = spec.model.paths  # enumerate once (raises on budget) before spawning threads
    with ThreadPoolExecutor(max_workers=_threads(args.threads)) as ex:
        results = list(ex.map(lambda e: _solve_eta(spec, e, args.tolerance), etas))
    rows = []
    code = EXIT_OK
    for eta, (pr, du, N, pen) in zip(etas, results):
        tag = f"eta={fmt(eta)}"
        gap = du.value - pr.value if (pr.ok and du.ok) else None
        rows.append((f"primal[{tag}]", pr.value, pr.status))
        rows.append((f"dual[{tag}]", du.value, du.status))
        rows.append((f"gap[{tag}]", gap, "optimal" if gap is not None else "n/a"))
        if pen is not None:
            rows.append((f"penalty_dual[{tag},N={fmt(N)}]", pen.value, pen.status))
        if pr.status == INFEASIBLE:
            code = EXIT_INFEASIBLE
            cert = pr.certificate if pr.certificate is not None else np.zeros(0)
            write_csv(os.path.join(out, f"certificate_{tag}.csv"), ["index", "multiplier"],
                      [(i, v) for i, v in enumerate(cert)])
    write_csv(os.path.join(out, "results.csv"), ["quantity", "value", "status"], rows)
    pr, du, _, _ = results[0]
    if pr.ok:
        write_csv(os.path.join(out, "measure.csv"), ["path_id", "prob"],
                  [(i, q) for i, q in enumerate(pr.weights) if q > 0])
    if du.ok:
        write_strategy_csv(os.path.join(out, "strategy.csv"), du.a0, du.static, du.positions,
                           spec.model.times)
    return code


def cmd_verify(args) -> int:
    spec = load_spec(args.spec)
    model = spec.model
    out = _outdir(args.out)
    a0, static, sched = read_strategy_csv(args.strategy, len(spec.options), model.dim)
    schedules = {}
    for w, (ts, ps) in sched.items():
        try:
            schedules[w] = Schedule(np.array(ts), np.array(ps))
        except Exception as e:
            raise SpecError(f"strategy for path {w}: {e}") from None
    paths = model.grid_paths()
    index = {id(p): w for w, p in enumerate(paths)}
    empty = Schedule(np.zeros(1), np.zeros((1, model.dim)))
    for w in range(len(paths)):
        schedules.setdefault(w, empty)
    rule = TabulatedRule(schedules, lambda p: index[id(p)])
    strat = SemiStaticStrategy(a0, list(zip(spec.options, static)), rule)
    rep = verify_superhedge(strat, spec.payoff, paths, spec.pset, spec.eta, tol=args.tolerance)
    rows = [(w, s) for w, s in enumerate(rep.slacks) if not np.isnan(s)]
    write_csv(os.path.join(out, "slacks.csv"), ["path_id", "slack"], rows)
    print(f"worst slack {fmt(rep.worst_slack)} at path {rep.worst_path}")
    return EXIT_OK if rep.ok else EXIT_VIOLATION


def cmd_marginals(args) -> int:
    out = _outdir(args.out)
    if args.puts:
        curve = read_puts_csv(args.puts)
        try:
            mu = marginal_from_puts(curve)
        except ArbitrageError as e:
            raise SpecError(f"put prices admit arbitrage: {e}") from None
        write_csv(os.path.join(out, "marginal.csv"), ["support", "prob"], list(zip(mu.support, mu.probs)))
    else:
        mu = read_marginal(args.marginal)
        curve = puts_from_marginal(mu)
        write_csv(os.path.join(out, "puts.csv"), ["strike", "price"], list(zip(curve.strikes, curve.prices)))
    return EXIT_OK


def cmd_sweep(args) -> int:
    spec = load_spec(args.spec)
    model = spec.model
    out = _outdir(args.out)
    g = model.payoff_values(spec.payoff)
    rows = []
    if spec.penalty_N:
        vals = penalty_sweep(model, g, spec.options, spec.pset, sorted(spec.penalty_N), eta=spec.eta)
        rows += [("penalty", N, v, "optimal" if np.isfinite(v) else "unbounded")
                 for N, v in zip(sorted(spec.penalty_N), vals)]
    with ThreadPoolExecutor(max_workers=_threads(args.threads)) as ex:
        prim = list(ex.map(lambda e: primal_solve(model, g, spec.options, spec.pset, e), spec.eta_schedule))
    for e, pr in zip(spec.eta_schedule, prim):
        rows.append(("eta", e, pr.value, pr.status))
    for N in spec.mesh_N:
        sol = dual_solve(model, g, spec.options, spec.pset, eta=spec.eta, distance_bound="lower",
                         rebalance=rebalance_mask(model, N))
        rows.append(("mesh", N, sol.value, sol.status))
    if not spec.mesh_N and not spec.penalty_N and len(spec.eta_schedule) <= 1:
        raise SpecError("nothing to sweep: give penalty_N, eta_schedule or mesh_N")
    write_csv(os.path.join(out, "sweep.csv"), ["kind", "parameter", "value", "status"], rows)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="robustmot", description="Robust price bounds on path lattices.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")
    common.add_argument("--seed", type=int, default=0, help="random seed")
    common.add_argument("--tolerance", type=float, default=1e-6, help="numerical tolerance")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("discretise", parents=[common], help="discretise a path read from CSV")
    p.add_argument("--input", required=True, help="CSV with rows time,x_1,...,x_d")
    p.add_argument("--N", type=int, required=True, help="mesh exponent (>= 4)")
    p.set_defaults(func=cmd_discretise)

    p = sub.add_parser("bounds", parents=[common], help="primal and dual bounds for a problem spec")
    p.add_argument("--spec", required=True)
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("verify", parents=[common], help="replay a strategy on every lattice path")
    p.add_argument("--spec", required=True)
    p.add_argument("--strategy", required=True, help="CSV path_id,rebalance_time,asset,position")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("marginals", parents=[common], help="convert between put prices and marginals")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--puts", help="CSV strike,price")
    g.add_argument("--marginal", help="marginal as JSON {support, probs} or CSV support,prob")
    p.set_defaults(func=cmd_marginals)

    p = sub.add_parser("sweep", parents=[common], help="penalty, eta and mesh sweeps")
    p.add_argument("--spec", required=True)
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_INPUT if e.code else EXIT_OK
    np.random.seed(args.seed)
    try:
        return args.func(args)
    except SpecError as e:
        print(f"input error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except BudgetExceeded as e:
        print(f"budget exceeded: {e}", file=sys.stderr)
        return EXIT_BUDGET
    except DualityGapError as e:
        print(f"duality check failed: {e}", file=sys.stderr)
        return EXIT_VIOLATION


if __name__ == "__main__":
    sys.exit(main())
