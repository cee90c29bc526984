import numpy as np
import pytest

from distopf import TuningParams, resolve_case
from distopf.model import Model, build_matrices

SMALL_CASES = ["case2", "case3", "case3_congested", "case3_multigen", "case5"]

# Optimal objectives ($/h), computed by the active-set and enumeration
# solvers and cross-checked against an independent interior-point QP solve.
ORACLE_OBJECTIVE = {
    "case2": 1750.0,
    "case3": 1097.5,
    "case3_congested": 1110.0,
    "case3_multigen": 1389.4375,
    "case5": 3030.2195,
}
RTS_F_STAR = 29246.038207792215
RTS55_F_STAR = 31715.303074776602
RTS55_BINDING = {(14, 16, "reverse"), (16, 17, "reverse")}

TWO_BUS = {
    "buses": [{"id": 1, "load": 0}, {"id": 2, "load": 50}],
    "lines": [{"from": 1, "to": 2, "x": 0.1, "limit": 100}],
    "gens": [{"bus": 1, "a": 0.5, "b": 10, "c": 0, "pmin": 0, "pmax": 100}],
}


def case_params(case) -> TuningParams:
    return TuningParams(*case.tuning)


@pytest.fixture(scope="session")
def cases():
    return {name: resolve_case(name) for name in SMALL_CASES + ["rts24"]}


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def feasible_perturbations(case, sol, rng, n=200, size=1e-3):
    """Random feasible points within ``size`` (per-unit) of ``sol``.

    Built from the raw network matrices, independently of the solvers:
    directions lie in the null space of the balance equations, respect the
    active bounds and are cut back to stay inside every other bound.
    """
    m = Model.from_case(case)
    mats = build_matrices(case)
    ng, nb = m.ng, m.nb
    ns = [i for i in range(nb) if i != m.slack]
    E = m.E
    J = np.hstack([-E, mats.B[:, ns]])
    flow = (mats.incidence * m.y).T[:, ns]
    Z = np.zeros
    A = np.vstack(
        [
            np.hstack([np.eye(ng), Z((ng, len(ns)))]),
            np.hstack([-np.eye(ng), Z((ng, len(ns)))]),
            np.hstack([Z((m.nl, ng)), flow]),
            np.hstack([Z((m.nl, ng)), -flow]),
        ]
    )
    rhs = np.concatenate([m.pmax, -m.pmin, m.limit, m.limit])
    z = np.concatenate([sol.pg / m.base, sol.theta[ns]])
    slack = rhs - A @ z
    active = slack <= 1e-9
    _, s, vt = np.linalg.svd(J)
    null = vt[np.sum(s > 1e-10) :].T
    out = []
    if null.shape[1] == 0:
        return out, m
    for _ in range(n):
        d = null @ rng.standard_normal(null.shape[1])
        if np.linalg.norm(d) == 0:
            continue
        d /= np.linalg.norm(d)
        for cand in (d, -d):
            if np.all(A[active] @ cand <= 1e-12):
                ad = A @ cand
                with np.errstate(divide="ignore"):
                    steps = np.where(ad > 1e-12, slack / ad, np.inf)
                t = min(size, float(steps.min(initial=np.inf)))
                if t > 0:
                    out.append(z + t * cand)
    return out, m


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
