"""Centralized DC-OPF reference solver and KKT residual checker.

The solver works on the angle formulation directly: decision variables are
the generator outputs and the non-slack bus angles, and every working-set
subproblem is the equality-constrained KKT system made of generator
stationarity, angle stationarity, nodal balance and the working-set rows.

Two independent routes are provided:

* :func:`solve_active_set` - a dual active-set method in the style of
  Goldfarb and Idnani.  It starts from the unconstrained dispatch, adds the
  most violated inequality and drops constraints whose multiplier would turn
  negative.  Ties are broken by lowest constraint index.
* :func:`solve_enumeration` - exhaustive search over every working set, for
  small networks only.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .model import GridCase, Model


class InfeasibleError(Exception):
    """No dispatch satisfies balance, generator and line limits."""


FEAS_TOL = 1e-10
DUAL_TOL = 1e-10


@dataclass(frozen=True)
class OracleSolution:
    """Primal/dual point in case units (MW, rad, $/MWh, $/h).

    ``mu_line`` has one row per line: column 0 is the multiplier of the
    from->to limit, column 1 of the to->from limit.
    """

    pg: np.ndarray
    theta: np.ndarray
    lam: np.ndarray
    mu_line: np.ndarray
    mu_gen_hi: np.ndarray
    mu_gen_lo: np.ndarray
    objective: float
    working_set: tuple[int, ...] = ()
    method: str = ""

    def to_dict(self, case: GridCase | None = None) -> dict:
        out = {
            "objective": self.objective,
            "method": self.method,
            "pg": self.pg.tolist(),
            "theta": self.theta.tolist(),
            "lambda": self.lam.tolist(),
            "mu_line": self.mu_line.tolist(),
            "mu_gen_hi": self.mu_gen_hi.tolist(),
            "mu_gen_lo": self.mu_gen_lo.tolist(),
        }
        if case is not None:
            out["lines"] = [[l.from_bus, l.to_bus] for l in case.lines]
            out["generator_bus"] = [g.bus for g in case.generators]
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "OracleSolution":
        return cls(
            pg=np.asarray(doc["pg"], dtype=float),
            theta=np.asarray(doc["theta"], dtype=float),
            lam=np.asarray(doc["lambda"], dtype=float),
            mu_line=np.asarray(doc["mu_line"], dtype=float).reshape(-1, 2),
            mu_gen_hi=np.asarray(doc.get("mu_gen_hi", []), dtype=float),
            mu_gen_lo=np.asarray(doc.get("mu_gen_lo", []), dtype=float),
            objective=float(doc["objective"]),
            method=doc.get("method", ""),
        )

    def save(self, path, case: GridCase | None = None) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(case), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "OracleSolution":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def binding_lines(self, case: GridCase, tol: float = 1e-6) -> list[tuple[int, int, str, float]]:
        out = []
        for k, line in enumerate(case.lines):
            if self.mu_line[k, 0] > tol:
                out.append((line.from_bus, line.to_bus, "forward", float(self.mu_line[k, 0])))
            if self.mu_line[k, 1] > tol:
                out.append((line.from_bus, line.to_bus, "reverse", float(self.mu_line[k, 1])))
        return out


@dataclass
class KKTReport:
    stationarity_pg: float
    stationarity_theta: float
    balance: float
    slack_angle: float
    primal_feas: float
    comp_slack: float
    dual_feas: float
    tol: float
    passed: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(self.passed.values())

    def max_residual(self) -> float:
        return max(
            self.stationarity_pg,
            self.stationarity_theta,
            self.balance,
            self.slack_angle,
            self.primal_feas,
            self.comp_slack,
            -self.dual_feas,
        )

    def to_dict(self) -> dict:
        return {
            "stationarity_pg": self.stationarity_pg,
            "stationarity_theta": self.stationarity_theta,
            "balance": self.balance,
            "slack_angle": self.slack_angle,
            "primal_feas": self.primal_feas,
            "comp_slack": self.comp_slack,
            "dual_feas": self.dual_feas,
            "tol": self.tol,
            "passed": dict(self.passed),
        }


def objective(case: GridCase, pg) -> float:
    """Total generation cost in $/h for a dispatch in MW."""
    pg = np.asarray(pg, dtype=float)
    if pg.shape != (case.n_gen,):
        raise ValueError(f"expected {case.n_gen} generator outputs, got shape {pg.shape}")
    return float(sum(g.cost(p) for g, p in zip(case.generators, pg)))


# ---------------------------------------------------------------------------
# QP structure in the angle formulation


class _Problem:
    """Matrices of the DC-OPF in model units.

    z = [pg (ng), theta of non-slack buses (nb-1)]
    equality rows: J z = -P_L (one per bus)
    inequality rows: A z <= rhs, ordered gen-upper, gen-lower, line-forward,
    line-reverse.
    """

    def __init__(self, m: Model):
        self.m = m
        nb, nl, ng = m.nb, m.nl, m.ng
        self.ns = np.array([i for i in range(nb) if i != m.slack], dtype=int)
        self.n = ng + len(self.ns)
        self.G = np.zeros((self.n, self.n))
        self.G[:ng, :ng] = np.diag(2.0 * m.a)
        self.g0 = np.concatenate([m.b, np.zeros(len(self.ns))])
        self.J = np.hstack([-m.E, m.B[:, self.ns]])
        self.eq_rhs = -m.load

        flow = np.zeros((nl, nb))
        flow[np.arange(nl), m.frm] = m.y
        flow[np.arange(nl), m.to] = -m.y
        flow_z = np.hstack([np.zeros((nl, ng)), flow[:, self.ns]])
        gen_z = np.hstack([np.eye(ng), np.zeros((ng, len(self.ns)))])
        self.A = np.vstack([gen_z, -gen_z, flow_z, -flow_z])
        self.rhs = np.concatenate([m.pmax, -m.pmin, m.limit, m.limit])
        self.ng, self.nl = ng, nl
        self.n_ineq = len(self.rhs)

    def kkt_matrix(self, W) -> np.ndarray:
        W = list(W)
        n, me, mw = self.n, self.J.shape[0], len(W)
        K = np.zeros((n + me + mw, n + me + mw))
        K[:n, :n] = self.G
        K[:n, n : n + me] = self.J.T
        K[n : n + me, :n] = self.J
        if mw:
            AW = self.A[W]
            K[:n, n + me :] = AW.T
            K[n + me :, :n] = AW
        return K

    def solve_eqp(self, W):
        """Minimize the cost with the working-set rows held at their bounds."""
        W = list(W)
        K = self.kkt_matrix(W)
        rhs = np.concatenate([-self.g0, self.eq_rhs, self.rhs[W]])
        sol = np.linalg.solve(K, rhs)
        # one step of iterative refinement keeps multipliers accurate
        sol += np.linalg.solve(K, rhs - K @ sol)
        n, me = self.n, self.J.shape[0]
        return sol[:n], sol[n : n + me], sol[n + me :]

    def violations(self, z):
        return self.A @ z - self.rhs

    def theta_full(self, z) -> np.ndarray:
        theta = np.zeros(self.m.nb)
        theta[self.ns] = z[self.ng :]
        return theta

    def cost(self, z) -> float:
        return self.m.objective(z[: self.ng])

    def dependent(self, W, p) -> bool:
        rows = np.vstack([self.J, self.A[list(W)]]) if W else self.J
        coef, *_ = np.linalg.lstsq(rows.T, self.A[p], rcond=None)
        resid = self.A[p] - rows.T @ coef
        return np.linalg.norm(resid) <= 1e-9 * max(1.0, np.linalg.norm(self.A[p]))


def _to_solution(prob: _Problem, z, lam, W, u, method: str) -> OracleSolution:
    m = prob.m
    ng, nl = prob.ng, prob.nl
    mult = np.zeros(prob.n_ineq)
    mult[list(W)] = np.maximum(u, 0.0)
    mu_line = np.column_stack([mult[2 * ng : 2 * ng + nl], mult[2 * ng + nl :]])
    pg = z[:ng]
    return OracleSolution(
        pg=pg * m.base,
        theta=prob.theta_full(z),
        lam=lam.copy(),
        mu_line=mu_line,
        mu_gen_hi=mult[:ng].copy(),
        mu_gen_lo=mult[ng : 2 * ng].copy(),
        objective=m.objective(pg),
        working_set=tuple(sorted(int(w) for w in W)),
        method=method,
    )


def solve_active_set(case: GridCase, max_iter: int | None = None) -> OracleSolution:
    m = Model.from_case(case)
    prob = _Problem(m)
    if max_iter is None:
        max_iter = 50 * (prob.n_ineq + prob.n)

    W: list[int] = []
    z, lam, u = prob.solve_eqp(W)
    u = list(u)
    for _ in range(max_iter):
        viol = prob.violations(z)
        viol[W] = -np.inf
        worst = viol.max() if len(viol) else -np.inf
        if worst <= FEAS_TOL:
            return _to_solution(prob, z, lam, W, np.array(u), "active-set")
        # lowest index among (numerical) ties
        p = int(np.flatnonzero(viol >= worst - 1e-14 * max(1.0, abs(worst)))[0])

        u_p = 0.0
        while True:
            K = prob.kkt_matrix(W)
            n, me = prob.n, prob.J.shape[0]
            rhs = np.zeros(K.shape[0])
            rhs[:n] = -prob.A[p]
            d = np.linalg.solve(K, rhs)
            dz, dlam, du = d[:n], d[n : n + me], d[n + me :]

            # dual step: largest t keeping working-set multipliers nonnegative
            t_dual, drop = np.inf, None
            for k, w in enumerate(W):
                if du[k] < -1e-14:
                    t = u[k] / -du[k]
                    if t < t_dual - 1e-15 or (drop is not None and abs(t - t_dual) <= 1e-15 and w < W[drop]):
                        t_dual, drop = t, k

            if prob.dependent(W, p):
                if drop is None:
                    raise InfeasibleError("constraint set is infeasible (dual unbounded)")
                t = t_dual
                u = [uk + t * dk for uk, dk in zip(u, du)]
                lam = lam + t * dlam
                u_p += t
                del W[drop], u[drop]
                continue

            curv = float(dz @ prob.G @ dz)
            t_primal = float(prob.A[p] @ z - prob.rhs[p]) / curv
            if t_dual < t_primal:
                t = t_dual
                z = z + t * dz
                lam = lam + t * dlam
                u = [uk + t * dk for uk, dk in zip(u, du)]
                u_p += t
                del W[drop], u[drop]
                continue
            W.append(p)
            W.sort()
            z, lam, u = prob.solve_eqp(W)
            u = list(u)
            break
    raise InfeasibleError(f"active-set search did not terminate in {max_iter} iterations")


def enumeration_size(case: GridCase) -> int:
    return 3 ** (case.n_gen + case.n_line)


def solve_enumeration(case: GridCase, max_sets: int = 3**12) -> OracleSolution:
    """Exhaustive search over every working set.

    Each generator and each line contributes one of three states (free,
    upper/forward, lower/reverse).  The KKT point with lowest objective
    wins; ties go to the lexicographically smallest working set.
    """
    m = Model.from_case(case)
    prob = _Problem(m)
    if enumeration_size(case) > max_sets:
        raise ValueError(f"{enumeration_size(case)} working sets exceed the enumeration budget")
    ng, nl = prob.ng, prob.nl
    best = None
    for states in itertools.product((0, 1, 2), repeat=ng + nl):
        W = []
        for n, s in enumerate(states[:ng]):
            if s:
                W.append(n if s == 1 else ng + n)
        for k, s in enumerate(states[ng:]):
            if s:
                W.append(2 * ng + k if s == 1 else 2 * ng + nl + k)
        W.sort()
        if len(W) > prob.n - 0:
            continue
        K = prob.kkt_matrix(W)
        if np.linalg.cond(K) > 1e12:
            continue
        z, lam, u = prob.solve_eqp(W)
        if len(u) and u.min() < -DUAL_TOL * max(1.0, np.abs(lam).max()):
            continue
        if prob.violations(z).max(initial=-np.inf) > 1e-9:
            continue
        f = prob.cost(z)
        key = (f, tuple(W))
        if best is None or f < best[0][0] - 1e-12 * max(1.0, abs(f)) or (
            abs(f - best[0][0]) <= 1e-12 * max(1.0, abs(f)) and key[1] < best[0][1]
        ):
            best = (key, z, lam, W, u)
    if best is None:
        raise InfeasibleError("no working set yields a KKT point")
    _, z, lam, W, u = best
    return _to_solution(prob, z, lam, W, u, "enumeration")


def solve_centralized(case: GridCase, method: str = "active-set") -> OracleSolution:
    if method == "active-set":
        return solve_active_set(case)
    if method == "enumeration":
        return solve_enumeration(case)
    raise ValueError(f"unknown method {method!r}")


# ---------------------------------------------------------------------------
# KKT checking


def recover_gen_multipliers(case: GridCase, pg, lam, tol: float = 1e-9):
    """Generator limit multipliers from the generator stationarity identity.

    The residual ``lam - (2 a P + b)`` is assigned to the upper-bound
    multiplier when the unit sits at pmax and to the lower-bound multiplier
    at pmin; interior units get zero for both.
    """
    m = Model.from_case(case)
    p = np.asarray(pg, dtype=float) / m.base
    lam = np.asarray(lam, dtype=float)
    r = lam[m.gen_bus] - (2.0 * m.a * p + m.b)
    span = np.maximum(m.pmax - m.pmin, 1e-12)
    at_hi = np.abs(p - m.pmax) <= tol * np.maximum(1.0, span)
    at_lo = np.abs(p - m.pmin) <= tol * np.maximum(1.0, span)
    hi = np.where(at_hi, np.maximum(r, 0.0), 0.0)
    lo = np.where(at_lo & ~at_hi, np.maximum(-r, 0.0), 0.0)
    lo = np.where(at_lo & at_hi, np.maximum(-r, 0.0), lo)
    return hi, lo


def check_kkt(case: GridCase, candidate: OracleSolution, tol: float = 1e-8) -> KKTReport:
    """Evaluate every first-order optimality condition at ``candidate``.

    Residuals are in model units: per-unit power and $/MWh.
    """
    m = Model.from_case(case)
    pg = np.asarray(candidate.pg, dtype=float)
    theta = np.asarray(candidate.theta, dtype=float)
    lam = np.asarray(candidate.lam, dtype=float)
    mu = np.asarray(candidate.mu_line, dtype=float)
    hi = np.asarray(candidate.mu_gen_hi, dtype=float)
    lo = np.asarray(candidate.mu_gen_lo, dtype=float)
    expected = {
        "pg": (m.ng,),
        "theta": (m.nb,),
        "lambda": (m.nb,),
        "mu_line": (m.nl, 2),
        "mu_gen_hi": (m.ng,),
        "mu_gen_lo": (m.ng,),
    }
    for name, arr in zip(expected, (pg, theta, lam, mu, hi, lo)):
        if arr.shape != expected[name]:
            raise ValueError(f"{name}: expected shape {expected[name]}, got {arr.shape}")

    p = pg / m.base
    mu_vec = np.concatenate([mu[:, 0], mu[:, 1]])
    stat_pg = 2.0 * m.a * p + m.b - lam[m.gen_bus] + hi - lo
    stat_theta = m.B @ lam + m.By.T @ mu_vec
    g = m.mismatch(p, theta)
    flow = m.flows(theta)
    gen_hi_res = p - m.pmax
    gen_lo_res = m.pmin - p
    fwd_res = flow - m.limit
    rev_res = -flow - m.limit
    ineq = np.concatenate([gen_hi_res, gen_lo_res, fwd_res, rev_res])
    mults = np.concatenate([hi, lo, mu[:, 0], mu[:, 1]])

    def amax(x):
        return float(np.max(np.abs(x))) if len(x) else 0.0

    rep = KKTReport(
        stationarity_pg=amax(stat_pg),
        stationarity_theta=amax(stat_theta),
        balance=amax(g),
        slack_angle=float(abs(theta[m.slack])),
        primal_feas=float(max(0.0, ineq.max(initial=0.0))),
        comp_slack=amax(mults * ineq),
        dual_feas=float(min(0.0, mults.min(initial=0.0))),
        tol=tol,
    )
    rep.passed = {
        "stationarity_pg": rep.stationarity_pg <= tol,
        "stationarity_theta": rep.stationarity_theta <= tol,
        "balance": rep.balance <= tol,
        "slack_angle": rep.slack_angle <= tol,
        "primal_feas": rep.primal_feas <= tol,
        "comp_slack": rep.comp_slack <= tol,
        "dual_feas": rep.dual_feas >= -tol,
    }
    return rep
