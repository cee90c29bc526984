"""Metrics, distributed-vs-centralized comparison and run exports.

Nothing here feeds oracle data back into the engine; a reference solution
is used only to score the iterates.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .engine import Layout, RunTrace, SystemState, build_layout, solution_from_vector
from .model import GridCase, Model
from .oracle import KKTReport, OracleSolution, check_kkt


def metric_rel(f: float, f_star: float) -> float:
    """Relative objective gap ``|f - f*| / f*``."""
    if not f_star > 0:
        raise ValueError(f"reference objective must be positive, got {f_star!r}")
    return abs(f - f_star) / f_star


def metric_res(state, case: GridCase) -> float:
    """Sum over buses of the absolute balance residual, in per-unit.

    ``state`` may be a :class:`SystemState`, a stacked iterate vector or an
    :class:`OracleSolution` (whose dispatch is in MW).
    """
    m = Model.from_case(case)
    if isinstance(state, OracleSolution):
        pg = np.asarray(state.pg, dtype=float) / m.base
        theta = np.asarray(state.theta, dtype=float)
    else:
        if isinstance(state, SystemState):
            x = build_layout(m).vector(state)
        else:
            x = np.asarray(state, dtype=float)
        sl = m.slices()
        pg, theta = x[sl["pg"]], x[sl["theta"]]
    return float(np.sum(np.abs(m.mismatch(pg, theta))))


@dataclass
class ComparisonReport:
    rel_final: float | None
    res_final: float
    kkt: KKTReport
    binding_lines: list
    lmp_spread: float
    lmp_mean: float
    objective: float
    oracle_objective: float | None = None
    oracle_binding_lines: list | None = None
    max_lambda_diff: float | None = None
    max_pg_diff_mw: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def same_binding_set(self) -> bool | None:
        if self.oracle_binding_lines is None:
            return None
        key = lambda rows: sorted((f, t, d) for f, t, d, _ in rows)
        return key(self.binding_lines) == key(self.oracle_binding_lines)

    def to_dict(self) -> dict:
        rows = lambda bl: None if bl is None else [
            {"from": f, "to": t, "direction": d, "mu": mu} for f, t, d, mu in bl
        ]
        return {
            "objective": self.objective,
            "rel_final": self.rel_final,
            "res_final": self.res_final,
            "lmp_spread": self.lmp_spread,
            "lmp_mean": self.lmp_mean,
            "binding_lines": rows(self.binding_lines),
            "kkt": self.kkt.to_dict(),
            "oracle_objective": self.oracle_objective,
            "oracle_binding_lines": rows(self.oracle_binding_lines),
            "same_binding_set": self.same_binding_set,
            "max_lambda_diff": self.max_lambda_diff,
            "max_pg_diff_mw": self.max_pg_diff_mw,
        }


def compare(
    case: GridCase,
    x: np.ndarray,
    oracle: OracleSolution | None = None,
    mu_tol: float = 1e-6,
    kkt_tol: float = 1e-6,
) -> ComparisonReport:
    """Score a final stacked iterate, optionally against a reference solution."""
    cand = solution_from_vector(case, np.asarray(x, dtype=float))
    lam = cand.lam
    rep = ComparisonReport(
        rel_final=None,
        res_final=metric_res(x, case),
        kkt=check_kkt(case, cand, kkt_tol),
        binding_lines=cand.binding_lines(case, mu_tol),
        lmp_spread=float(lam.max() - lam.min()),
        lmp_mean=float(lam.mean()),
        objective=cand.objective,
    )
    if oracle is not None:
        rep.oracle_objective = float(oracle.objective)
        rep.oracle_binding_lines = oracle.binding_lines(case, mu_tol)
        rep.max_lambda_diff = float(np.max(np.abs(lam - oracle.lam)))
        rep.max_pg_diff_mw = float(np.max(np.abs(cand.pg - oracle.pg))) if len(cand.pg) else 0.0
        if oracle.objective > 0:
            rep.rel_final = metric_rel(cand.objective, oracle.objective)
    return rep


# ---------------------------------------------------------------------------
# exports


def trace_columns(case: GridCase, layout: Layout | None = None) -> list[dict]:
    """Column manifest for the trace CSV: name, block, unit and owner."""
    cols = [
        {"name": "k", "block": "iteration", "unit": ""},
        {"name": "res_pu", "block": "res", "unit": "pu"},
        {"name": "res_mw", "block": "res", "unit": "MW"},
        {"name": "rel", "block": "rel", "unit": ""},
        {"name": "objective", "block": "objective", "unit": "$/h"},
    ]
    for b in case.buses:
        cols.append({"name": f"lambda_{b.id}", "block": "lambda", "unit": "$/MWh", "bus": b.id})
    for b in case.buses:
        cols.append({"name": f"theta_{b.id}", "block": "theta", "unit": "rad", "bus": b.id})
    for n, g in enumerate(case.generators, start=1):
        cols.append({"name": f"pg_{n}", "block": "pg", "unit": "MW", "bus": g.bus})
    for l in case.lines:
        cols.append({"name": f"mu_{l.from_bus}_{l.to_bus}", "block": "mu", "unit": "$/MWh", "bus": l.from_bus})
    for l in case.lines:
        cols.append({"name": f"mu_{l.to_bus}_{l.from_bus}", "block": "mu", "unit": "$/MWh", "bus": l.to_bus})
    return cols


def _num(v: float) -> str:
    return repr(float(v))


def write_trace_csv(path, trace: RunTrace, case: GridCase) -> list[dict]:
    """Write one row per recorded iterate and a ``trace_columns.json`` sidecar."""
    cols = trace_columns(case)
    lay = trace.layout
    nb, nl, ng = lay.nb, lay.nl, lay.ng
    mu0 = 2 * nb
    pg0 = mu0 + 2 * nl
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([c["name"] for c in cols])
        for r, x in enumerate(trace.X):
            row = [
                str(int(trace.k[r])),
                _num(trace.res[r]),
                _num(trace.res[r] * trace.base),
                "" if trace.rel is None else _num(trace.rel[r]),
                _num(trace.objective[r]),
            ]
            row += [_num(v) for v in x[:nb]]
            row += [_num(v) for v in x[nb : 2 * nb]]
            row += [_num(v * trace.base) for v in x[pg0 : pg0 + ng]]
            row += [_num(v) for v in x[mu0:pg0]]
            w.writerow(row)
    sidecar = os.path.join(os.path.dirname(os.fspath(path)) or ".", "trace_columns.json")
    write_json(sidecar, {"columns": cols})
    return cols


def write_json(path, doc: dict) -> None:
    with open(path, "w") as fh:
        json.dump(_plain(doc), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _plain(v):
    """Convert numpy scalars/arrays and non-finite floats to JSON-safe values."""
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, np.ndarray):
        return _plain(v.tolist())
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if np.isnan(v):
            return "nan"
        if np.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return v
