"""Dense form of the distributed iteration and convergence certificates.

The synchronous round can be written as ``X~(k+1) = P((I - A) X~(k) + C)``
with ``P`` the componentwise projection (line multipliers nonnegative,
generation inside its limits).  If some induced norm of ``I - A`` is below
one the projected iteration is a contraction and converges; the condition
is sufficient only.
"""

from __future__ import annotations

import csv
import itertools
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .engine import (
    CONVERGED,
    SERIAL,
    DistributedEngine,
    RunTrace,
    StopRule,
    TuningParams,
)
from .model import GridCase, Model

NORMS = (1, 2, np.inf)


@dataclass(frozen=True, eq=False)
class UpdateSystem:
    A: np.ndarray
    C: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    blocks: dict
    params: TuningParams | None = None

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    @property
    def iteration_matrix(self) -> np.ndarray:
        return np.eye(self.dim) - self.A

    def project(self, x: np.ndarray) -> np.ndarray:
        return np.minimum(np.maximum(x, self.lower), self.upper)

    def step(self, x: np.ndarray) -> np.ndarray:
        """One projected dense iteration."""
        return self.project(x - self.A @ x + self.C)


def build_update_system(case: GridCase, params: TuningParams, pin_slack: bool = True) -> UpdateSystem:
    """Assemble ``A`` and ``C`` block by block.

    Blocks are ordered lambda | theta | mu (forward then reverse) | pg.
    Generators are aggregated onto buses through the bus-by-unit matrix, and
    the slack angle row is replaced by a pinning row when ``pin_slack``.
    """
    m = Model.from_case(case)
    al, be, ga, de = params.as_tuple()
    nb, nl, ng = m.nb, m.nl, m.ng
    sl = m.slices()
    L, T, U, G = sl["lambda"], sl["theta"], sl["mu"], sl["pg"]
    B, By, E = m.B, m.By, m.E
    A = np.zeros((m.dim, m.dim))
    A[L, L] = be * B
    A[L, T] = -al * B
    A[L, U] = be * By.T
    A[L, G] = al * E
    A[T, T] = ga * B
    A[T, G] = -ga * E
    A[U, T] = -de * By
    A[G, L] = -(E / (2.0 * m.a)).T
    A[G, G] = np.eye(ng)
    C = np.concatenate(
        [al * m.load, -ga * m.load, -de * np.concatenate([m.limit, m.limit]), -m.b / (2.0 * m.a)]
    )
    if pin_slack:
        s = nb + m.slack
        A[s, :] = 0.0
        A[s, s] = 1.0
        C[s] = 0.0
    lower = np.full(m.dim, -np.inf)
    upper = np.full(m.dim, np.inf)
    lower[U] = 0.0
    lower[G] = m.pmin
    upper[G] = m.pmax
    blocks = {"lambda": (L.start, L.stop), "theta": (T.start, T.stop), "mu": (U.start, U.stop), "pg": (G.start, G.stop)}
    return UpdateSystem(A=A, C=C, lower=lower, upper=upper, blocks=blocks, params=params)


def dense_iterate(sys: UpdateSystem, x0: np.ndarray, steps: int) -> np.ndarray:
    xs = [np.asarray(x0, dtype=float)]
    for _ in range(steps):
        xs.append(sys.step(xs[-1]))
    return np.array(xs)


# ---------------------------------------------------------------------------
# certificates


def _norm_key(p) -> str:
    return "inf" if p == np.inf else str(int(p))


@dataclass
class Certificate:
    norms: dict
    spectral_radius: float | None
    certified: bool | None
    params: TuningParams | None = None
    dims: dict = field(default_factory=dict)
    note: str = ""

    @property
    def best_norm(self) -> float:
        return min(self.norms.values())

    def to_dict(self) -> dict:
        return {
            "params": None if self.params is None else self.params.to_dict(),
            "norms": {k: float(v) for k, v in self.norms.items()},
            "spectral_radius": self.spectral_radius,
            "certified": self.certified,
            "dims": dict(self.dims),
            "note": self.note,
        }


def evaluate_certificate(sys: UpdateSystem | np.ndarray) -> Certificate:
    """Norms of ``I - A`` for p in {1, 2, inf} and its spectral radius."""
    if isinstance(sys, UpdateSystem):
        M, params, blocks = sys.iteration_matrix, sys.params, sys.blocks
    else:
        A = np.asarray(sys, dtype=float)
        M, params, blocks = np.eye(A.shape[0]) - A, None, {}
    norms = {
        "1": float(np.abs(M).sum(axis=0).max(initial=0.0)),
        "2": float(np.linalg.svd(M, compute_uv=False).max(initial=0.0)),
        "inf": float(np.abs(M).sum(axis=1).max(initial=0.0)),
    }
    note = ""
    try:
        rho = float(np.abs(np.linalg.eigvals(M)).max(initial=0.0))
    except np.linalg.LinAlgError as exc:
        rho, note = None, f"eigenvalue solve failed: {exc}"
    certified = min(norms.values()) < 1.0 if rho is not None else None
    if certified is False:
        warnings.warn("no p-norm of I - A is below one; convergence is not certified", stacklevel=2)
    dims = {k: hi - lo for k, (lo, hi) in blocks.items()}
    if dims:
        dims["total"] = M.shape[0]
    return Certificate(norms=norms, spectral_radius=rho, certified=certified, params=params, dims=dims, note=note)


# ---------------------------------------------------------------------------
# trace verification


@dataclass
class ContractionReport:
    p: str
    norm: float
    max_ratio: float | None
    checked: int
    violations: list
    holds: bool
    stationary: bool
    cauchy_holds: bool | None

    def to_dict(self) -> dict:
        return {
            "p": self.p,
            "norm": self.norm,
            "max_ratio": self.max_ratio,
            "checked": self.checked,
            "violations": self.violations,
            "holds": self.holds,
            "stationary": self.stationary,
            "cauchy_holds": self.cauchy_holds,
        }


def _vec_norm(d: np.ndarray, p) -> np.ndarray:
    return np.linalg.norm(d, ord=p, axis=1)


def verify_contraction_trace(trace: RunTrace, sys: UpdateSystem, p=np.inf, rtol: float = 1e-9, atol: float = 1e-12) -> ContractionReport:
    """Check ``|dX(k+1)|_p <= |I - A|_p |dX(k)|_p`` along a synchronous trace.

    ``atol`` is a floating-point floor for steps that are themselves at
    round-off level.
    """
    if trace.X.shape[1] != sys.dim:
        raise ValueError(f"trace dimension {trace.X.shape[1]} does not match system {sys.dim}")
    if sys.params is not None and trace.params.as_tuple() != sys.params.as_tuple():
        raise ValueError("trace and update system were built with different tuning parameters")
    if trace.params.mode == SERIAL:
        raise ValueError("serial traces do not follow the dense synchronous map")
    p = np.inf if p in ("inf", np.inf, float("inf")) else int(p)
    key = _norm_key(p)
    M = sys.iteration_matrix
    norm = float(np.linalg.norm(M, ord=p))
    steps = _vec_norm(np.diff(trace.X, axis=0), p)
    if len(steps) < 2:
        return ContractionReport(key, norm, None, 0, [], True, bool(np.all(steps == 0)), None)
    prev, nxt = steps[:-1], steps[1:]
    bound = norm * prev * (1 + rtol) + atol
    bad = np.flatnonzero(nxt > bound)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(prev > 0, nxt / prev, np.nan)
    stationary = bool(np.all(steps == 0))
    max_ratio = None if stationary or np.all(np.isnan(ratios)) else float(np.nanmax(ratios))
    cauchy = None
    if norm < 1.0 and steps[0] > 0:
        k = np.arange(len(steps))
        cauchy = bool(np.all(steps <= norm**k * steps[0] * (1 + rtol) + atol))
    return ContractionReport(
        p=key,
        norm=norm,
        max_ratio=max_ratio,
        checked=len(nxt),
        violations=[int(k + 1) for k in bad],
        holds=len(bad) == 0,
        stationary=stationary,
        cauchy_holds=cauchy,
    )


# ---------------------------------------------------------------------------
# parameter sweeps


@dataclass
class SweepResult:
    best: Certificate
    best_row: dict
    table: list

    def write_csv(self, path) -> None:
        if not self.table:
            return
        keys = list(self.table[0])
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
            w.writeheader()
            for row in self.table:
                w.writerow({k: _fmt(row[k]) for k in keys})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def tune_parameters(
    case: GridCase,
    grid: dict,
    objective: str = "min_rho",
    stop: StopRule | None = None,
    f_star: float | None = None,
    mode: str = "synchronous",
) -> SweepResult:
    """Exhaustive grid search over (alpha, beta, gamma, delta).

    ``objective`` is ``"min_rho"`` (smallest spectral radius of I - A),
    ``"first_certified"`` (first point, in lexicographic order, with some
    norm below one) or ``"empirical"`` (fewest engine rounds until ``stop``
    fires from a cold start; unconverged points rank last by final
    relative gap or step size).  Ties go to the lexicographically smallest
    parameter tuple.
    """
    names = ("alpha", "beta", "gamma", "delta")
    values = [sorted(float(v) for v in grid[n]) for n in names]
    if any(not v for v in values):
        raise ValueError("every parameter needs at least one grid value")
    if objective not in ("min_rho", "first_certified", "empirical"):
        raise ValueError(f"unknown objective {objective!r}")
    if objective == "empirical" and stop is None:
        stop = StopRule(max_iters=1000)

    table = []
    best = None
    for combo in itertools.product(*values):
        params = TuningParams(*combo, mode=mode)
        sys = build_update_system(case, params)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            cert = evaluate_certificate(sys)
        row = {n: v for n, v in zip(names, combo)}
        row.update({f"norm_{k}": v for k, v in cert.norms.items()})
        row["spectral_radius"] = cert.spectral_radius
        row["certified"] = cert.certified
        if objective == "empirical":
            tr = DistributedEngine(case, params).run(stop=stop, f_star=f_star)
            row["outcome"] = tr.outcome
            row["iterations"] = tr.iterations
            row["final_rel"] = None if tr.rel is None else float(tr.rel[-1])
            row["final_step"] = float(tr.step_norm[-1])
            tail = row["final_rel"] if row["final_rel"] is not None else row["final_step"]
            if not np.isfinite(tail):
                tail = np.inf
            score = (0, tr.iterations, 0.0) if tr.outcome == CONVERGED else (1, 0, tail)
        elif objective == "min_rho":
            score = (0, cert.spectral_radius if cert.spectral_radius is not None else np.inf)
        else:
            score = (0 if cert.certified else 1,)
        table.append(row)
        if best is None or score < best[0]:
            best = (score, cert, row)
        if objective == "first_certified" and cert.certified:
            break
    return SweepResult(best=best[1], best_row=best[2], table=table)


def certificate_json(cert: Certificate) -> str:
    return json.dumps(cert.to_dict(), indent=2) + "\n"
