"""Command-line front end.

Subcommands: ``cases``, ``solve-central``, ``solve-distributed`` and
``certify``.  Every command writes into ``--out`` and, with
``--no-timestamp``, produces byte-identical files for identical inputs.
"""

from __future__ import annotations

import argparse
import datetime as dt
import json
import os
import sys
import warnings

import numpy as np

from . import __version__
from .cert import build_update_system, evaluate_certificate, tune_parameters
from .engine import DIVERGED, SERIAL, SYNCHRONOUS, RTS_TUNING, DistributedEngine, StopRule, TuningParams, solution_from_vector
from .harness import compare, write_json, write_trace_csv
from .model import CaseParseError, CaseValidationError, bundled_cases, resolve_case, scale_line_limits
from .oracle import InfeasibleError, OracleSolution, solve_centralized

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_VALIDATION = 3
EXIT_INFEASIBLE = 4
EXIT_DIVERGED = 5

PARAM_NAMES = ("alpha", "beta", "gamma", "delta")


def _add_case_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("case", help="case file or bundled case name")
    p.add_argument("--limit-scale", type=float, default=1.0, help="multiply every line limit")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--config", help="JSON file supplying default flag values")
    p.add_argument("--no-timestamp", action="store_true", help="omit timestamps and wall time")


def _add_param_args(p: argparse.ArgumentParser) -> None:
    for name in PARAM_NAMES:
        p.add_argument(f"--{name}", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="distopf", description="Distributed DC optimal power flow toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("cases", help="list bundled cases")

    p = sub.add_parser("solve-central", help="solve with the centralized reference solver")
    _add_case_args(p)
    p.add_argument("--method", choices=("active-set", "enumeration"), default="active-set")

    p = sub.add_parser("solve-distributed", help="run the bus-agent iteration")
    _add_case_args(p)
    _add_param_args(p)
    p.add_argument("--iters", type=int, default=10_000, help="maximum rounds")
    p.add_argument("--mode", choices=(SYNCHRONOUS, SERIAL), default=SYNCHRONOUS)
    p.add_argument("--eps-x", type=float, default=1e-9, help="stop when the max step is below this")
    p.add_argument(
        "--oracle",
        nargs="?",
        const="",
        default=None,
        help="reference solution JSON; without a path the centralized solver is run",
    )
    p.add_argument("--mu-tol", type=float, default=1e-6)
    p.add_argument("--kkt-tol", type=float, default=1e-6)

    p = sub.add_parser("certify", help="evaluate or sweep the contraction certificate")
    _add_case_args(p)
    _add_param_args(p)
    p.add_argument("--sweep", help="grid as JSON (inline or file) mapping parameter names to value lists")
    p.add_argument("--objective", choices=("min_rho", "first_certified", "empirical"), default="min_rho")
    p.add_argument("--iters", type=int, default=1000, help="round budget for the empirical objective")
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    args = parser.parse_args(argv)
    cfg_path = getattr(args, "config", None)
    if not cfg_path:
        return args
    with open(cfg_path) as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise CaseParseError(f"{cfg_path}: config must be a JSON object")
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    # re-parse so explicit flags override config values
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    unknown = sorted(set(cfg) - known)
    if unknown:
        raise CaseParseError(f"{cfg_path}: unknown keys {unknown}")
    sub.set_defaults(**cfg)
    return parser.parse_args(argv)


def _load(args):
    case = resolve_case(args.case)
    if args.limit_scale != 1.0:
        case = scale_line_limits(case, args.limit_scale)
    os.makedirs(args.out, exist_ok=True)
    return case


def _params(args, case) -> TuningParams:
    if case.tuning is not None:
        base = TuningParams(*case.tuning)
    else:
        base = RTS_TUNING
    vals = [getattr(args, n) if getattr(args, n) is not None else v for n, v in zip(PARAM_NAMES, base.as_tuple())]
    return TuningParams(*vals, mode=getattr(args, "mode", SYNCHRONOUS))


def _header(args, case) -> dict:
    doc = {
        "case": case.name or str(args.case),
        "limit_scale": args.limit_scale,
        "command": args.command,
        "version": __version__,
    }
    if not args.no_timestamp:
        doc["timestamp"] = dt.datetime.now(dt.timezone.utc).isoformat()
    return doc


def _fmt_binding(rows) -> str:
    if not rows:
        return "none"
    return ", ".join(f"{f}-{t} {d} (mu={mu:.6g})" for f, t, d, mu in rows)


def cmd_cases(args) -> int:
    for name in bundled_cases():
        print(name)
    return EXIT_OK


def cmd_solve_central(args) -> int:
    case = _load(args)
    sol = solve_centralized(case, args.method)
    sol.save(os.path.join(args.out, "solution.json"), case)
    binding = sol.binding_lines(case)
    report = _header(args, case)
    report.update(
        {
            "method": sol.method,
            "objective": sol.objective,
            "binding_lines": [{"from": f, "to": t, "direction": d, "mu": mu} for f, t, d, mu in binding],
            "lambda": sol.lam,
            "pg": sol.pg,
        }
    )
    write_json(os.path.join(args.out, "report.json"), report)
    print(f"objective: {sol.objective:.6f} $/h")
    print(f"binding lines: {_fmt_binding(binding)}")
    return EXIT_OK


def _oracle_for(args, case):
    if args.oracle is None:
        return None
    if args.oracle == "":
        return solve_centralized(case)
    return OracleSolution.load(args.oracle)


def cmd_solve_distributed(args) -> int:
    if args.iters < 0:
        raise CaseParseError("--iters must be nonnegative")
    case = _load(args)
    params = _params(args, case)
    oracle = _oracle_for(args, case)
    f_star = oracle.objective if oracle is not None and oracle.objective > 0 else None
    engine = DistributedEngine(case, params)
    trace = engine.run(stop=StopRule(max_iters=args.iters, eps_x=args.eps_x), f_star=f_star)

    write_trace_csv(os.path.join(args.out, "trace.csv"), trace, case)
    x = trace.final
    finite = bool(np.all(np.isfinite(x)))
    report = _header(args, case)
    report.update(
        {
            "params": params.to_dict(),
            "outcome": trace.outcome,
            "stop_reason": trace.stop_reason,
            "iterations": trace.iterations,
            "max_iters": args.iters,
            "f_star": f_star,
        }
    )
    if not args.no_timestamp:
        report["wall_time"] = trace.wall_time
    if finite:
        rep = compare(case, x, oracle, mu_tol=args.mu_tol, kkt_tol=args.kkt_tol)
        report["comparison"] = rep.to_dict()
        solution_from_vector(case, x).save(os.path.join(args.out, "solution.json"), case)
    write_json(os.path.join(args.out, "report.json"), report)

    print(f"outcome: {trace.outcome} after {trace.iterations} rounds")
    if finite:
        print(f"objective: {rep.objective:.6f} $/h  res: {rep.res_final:.3e} pu  lmp spread: {rep.lmp_spread:.3e} $/MWh")
        if rep.rel_final is not None:
            print(f"rel: {rep.rel_final:.3e}")
        print(f"binding lines: {_fmt_binding(rep.binding_lines)}")
    return EXIT_DIVERGED if trace.outcome == DIVERGED else EXIT_OK


def _parse_grid(text: str) -> dict:
    src = text
    if os.path.exists(text):
        with open(text) as fh:
            src = fh.read()
    try:
        grid = json.loads(src)
    except json.JSONDecodeError as exc:
        raise CaseParseError(f"--sweep: {exc}") from None
    if not isinstance(grid, dict) or set(grid) != set(PARAM_NAMES):
        raise CaseParseError(f"--sweep must map exactly {list(PARAM_NAMES)} to value lists")
    return {k: [float(v) for v in (grid[k] if isinstance(grid[k], list) else [grid[k]])] for k in PARAM_NAMES}


def cmd_certify(args) -> int:
    case = _load(args)
    header = _header(args, case)
    if args.sweep:
        grid = _parse_grid(args.sweep)
        stop = StopRule(max_iters=args.iters)
        result = tune_parameters(case, grid, objective=args.objective, stop=stop)
        result.write_csv(os.path.join(args.out, "sweep.csv"))
        header.update({"objective": args.objective, "grid": grid, "best": result.best_row, "certificate": result.best.to_dict()})
        write_json(os.path.join(args.out, "certificate.json"), header)
        row = result.best_row
        print(f"best ({args.objective}): " + " ".join(f"{n}={row[n]!r}" for n in PARAM_NAMES))
        cert = result.best
    else:
        params = _params(args, case)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            cert = evaluate_certificate(build_update_system(case, params))
        header["certificate"] = cert.to_dict()
        write_json(os.path.join(args.out, "certificate.json"), header)
    norms = "  ".join(f"|I-A|_{k} = {v:.6g}" for k, v in cert.norms.items())
    print(norms)
    rho = "n/a" if cert.spectral_radius is None else f"{cert.spectral_radius:.6g}"
    print(f"spectral radius: {rho}")
    print("certified: " + ("yes" if cert.certified else "no (sufficient condition not met)"))
    return EXIT_OK


COMMANDS = {
    "cases": cmd_cases,
    "solve-central": cmd_solve_central,
    "solve-distributed": cmd_solve_distributed,
    "certify": cmd_certify,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        return COMMANDS[args.command](args)
    except (CaseParseError, json.JSONDecodeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (CaseValidationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
