import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distopf import DistributedEngine, StopRule, TuningParams, load_case, solve_centralized
from distopf.engine import (
    COLD_LAMBDA,
    CONVERGED,
    DIVERGED,
    MAX_ITERS,
    SERIAL,
    AgentState,
    BusData,
    LocalGen,
    NeighborMessage,
    ProtocolError,
    init_cold,
    run,
    step,
    update_lambda,
    update_mu,
    update_mu_pair,
    update_pg,
    update_theta,
)
from distopf.model import case_to_dict

from conftest import SMALL_CASES, case_params

BUS1 = BusData(id=1, load=0.0, is_slack=False, neighbors=(2,), y=(10.0,), limit=(1.0,), gens=())


def msg(lam=10.0, theta=0.0, mu=0.0, sender=2):
    return {sender: NeighborMessage(sender, lam, theta, mu)}


class TestLocalRules:
    P = TuningParams(0.1, 0.01, 0.1, 0.1)

    def test_lambda_unchanged_at_consensus(self):
        own = AgentState(10.0, 0.0, (0.0,), ())
        assert update_lambda(own, msg(), self.P, BUS1) == 10.0

    def test_lambda_coupling_term(self):
        own = AgentState(10.0, 0.0, (0.0,), ())
        assert update_lambda(own, msg(lam=12.0), self.P, BUS1) == pytest.approx(10.2)

    def test_lambda_drops_on_surplus(self):
        bus = BusData(1, 0.2, False, (2,), (10.0,), (1.0,), (LocalGen(1, 1, 0, 1),))
        own = AgentState(10.0, 0.0, (0.0,), (0.5,))
        assert update_lambda(own, msg(), self.P, bus) < 10.0

    def test_pg(self):
        g = LocalGen(0.5, 10.0, 0.0, 100.0)
        assert update_pg(10, g) == 0
        assert update_pg(12, g) == 2
        assert update_pg(1000, g) == 100
        assert update_pg(0, g) == 0

    def test_theta(self):
        own = AgentState(10.0, 0.3, (0.0,), ())
        # zero residual: the neighbor angle balances the zero load
        assert update_theta(own, msg(theta=0.3), self.P, BUS1) == 0.3
        loaded = BusData(1, 0.5, False, (2,), (10.0,), (1.0,), ())
        assert update_theta(own, msg(theta=0.3), self.P, loaded) < 0.3
        slack = BusData(1, 0.5, True, (2,), (10.0,), (1.0,), ())
        assert update_theta(own, msg(theta=0.3), self.P, slack) == 0.0
        assert update_theta(own, msg(theta=0.3), self.P, slack, pin_slack=False) < 0.3

    def test_mu(self):
        assert update_mu(0.0, 0.01, 0.0, 10.0, 1.0, 0.1) == 0.0
        assert update_mu(0.5, 0.1, 0.0, 10.0, 1.0, 0.1) == 0.5
        assert update_mu(0.5, 0.2, 0.0, 10.0, 1.0, 0.1) > 0.5
        fwd, rev = update_mu_pair(0.0, 0.0, 0.2, 0.0, 10.0, 1.0, 0.1)
        assert fwd > 0 and rev == 0

    def test_missing_message(self):
        own = AgentState(10.0, 0.0, (0.0,), ())
        with pytest.raises(ProtocolError):
            update_lambda(own, {}, self.P, BUS1)
        with pytest.raises(ProtocolError):
            update_theta(own, {}, self.P, BUS1)

    def test_params_validation(self):
        with pytest.raises(ValueError):
            TuningParams(-1, 0, 0, 0)
        with pytest.raises(ValueError):
            TuningParams(float("nan"), 0, 0, 0)
        with pytest.raises(ValueError):
            TuningParams(1, 1, 1, 1, mode="async")


class TestInit:
    @pytest.mark.parametrize("name", SMALL_CASES + ["rts24"])
    def test_cold(self, cases, name):
        eng = DistributedEngine(cases[name], TuningParams(0, 0, 0, 0))
        x = eng.layout.vector(init_cold(cases[name]))
        nb = eng.model.nb
        assert np.all(x[:nb] == COLD_LAMBDA)
        assert np.all(x[nb:] == 0)
        assert len(x) == 2 * nb + 2 * eng.model.nl + eng.model.ng

    def test_warm_start_copies_oracle(self, cases):
        case = cases["case3_congested"]
        sol = solve_centralized(case)
        eng = DistributedEngine(case, case_params(case))
        x = eng.layout.vector(eng.init_from(sol))
        nb, nl = eng.model.nb, eng.model.nl
        np.testing.assert_array_equal(x[:nb], sol.lam)
        np.testing.assert_array_equal(x[nb : 2 * nb], sol.theta)
        np.testing.assert_array_equal(x[2 * nb : 2 * nb + nl], sol.mu_line[:, 0])
        np.testing.assert_array_equal(x[2 * nb + nl : 2 * nb + 2 * nl], sol.mu_line[:, 1])
        np.testing.assert_allclose(x[2 * nb + 2 * nl :] * 100, sol.pg, rtol=1e-15)


@pytest.mark.parametrize("name", SMALL_CASES)
def test_oracle_is_fixed_point(cases, name):
    case = cases[name]
    sol = solve_centralized(case)
    eng = DistributedEngine(case, case_params(case))
    s0 = eng.init_from(sol)
    x0 = eng.layout.vector(s0)
    for mode in ("synchronous", "serial"):
        eng.params = case_params(case).with_mode(mode)
        x1 = eng.layout.vector(eng.step(s0))
        assert np.max(np.abs(x1 - x0)) <= 1e-12


def test_serial_needs_fewer_rounds(cases):
    case = cases["case3"]
    p = case_params(case)
    sync = run(case, p, stop=StopRule(max_iters=5000))
    ser = run(case, p.with_mode(SERIAL), stop=StopRule(max_iters=5000))
    assert sync.outcome == ser.outcome == CONVERGED
    assert ser.iterations < sync.iterations


def test_zero_params_freeze_after_dispatch(cases):
    case = cases["case5"]
    tr = run(case, TuningParams(0, 0, 0, 0), stop=StopRule(max_iters=30, eps_x=None))
    assert tr.outcome == MAX_ITERS and tr.iterations == 30
    # only the closed-form dispatch moves, once, from the unprojected cold start
    assert np.all(tr.X[1:] == tr.X[1])
    nb = tr.layout.nb
    np.testing.assert_array_equal(tr.X[1, : -tr.layout.ng], tr.X[0, : -tr.layout.ng])


def test_divergence_is_reported(cases):
    case = cases["case3"]
    tr = run(case, TuningParams(50, 50, 50, 50), stop=StopRule(max_iters=500))
    assert tr.outcome == DIVERGED
    assert tr.iterations < 500


def test_iters_zero(cases):
    tr = run(cases["case2"], case_params(cases["case2"]), stop=StopRule(max_iters=0))
    assert tr.X.shape[0] == 1 and tr.outcome == MAX_ITERS


def test_eps_rel_requires_reference(cases):
    with pytest.raises(ValueError):
        run(cases["case2"], case_params(cases["case2"]), stop=StopRule(eps_rel=1e-3))


def test_stop_rules(cases):
    case = cases["case3"]
    tr = run(case, case_params(case), stop=StopRule(eps_x=None, eps_res=1e-6))
    assert tr.stop_reason == "eps_res" and tr.res[-1] <= 1e-6
    tr = run(case, case_params(case), stop=StopRule(eps_x=None, eps_rel=1e-6), f_star=1097.5)
    assert tr.stop_reason == "eps_rel" and tr.rel[-1] <= 1e-6


@pytest.mark.parametrize("mode", ["synchronous", "serial"])
def test_deterministic(cases, mode):
    case = cases["case5"]
    p = case_params(case).with_mode(mode)
    a = run(case, p, stop=StopRule(max_iters=300))
    b = run(case, p, stop=StopRule(max_iters=300))
    assert a.X.tobytes() == b.X.tobytes()


def test_relabeling_commutes(cases):
    case = cases["case5"]
    perm = {1: 1, 2: 5, 3: 2, 4: 4, 5: 3}  # slack stays at the lowest id
    d = case_to_dict(case)
    for b in d["buses"]:
        b["id"] = perm[b["id"]]
    for l in d["lines"]:
        l["from"], l["to"] = perm[l["from"]], perm[l["to"]]
    for g in d["generators"]:
        g["bus"] = perm[g["bus"]]
    other = load_case(d)
    p = case_params(case)
    a = run(case, p, stop=StopRule(max_iters=200, eps_x=None))
    b = run(other, p, stop=StopRule(max_iters=200, eps_x=None))
    nb = case.n_bus
    idx = np.array([perm[i] - 1 for i in range(1, nb + 1)])
    np.testing.assert_array_equal(b.X[:, idx], a.X[:, :nb])
    np.testing.assert_array_equal(b.X[:, nb + idx], a.X[:, nb : 2 * nb])
    np.testing.assert_array_equal(b.X[:, 2 * nb :], a.X[:, 2 * nb :])


@settings(max_examples=60, deadline=None)
@given(
    name=st.sampled_from(SMALL_CASES),
    seed=st.integers(0, 2**32 - 1),
    serial=st.booleans(),
)
def test_projection_safety(cases, name, seed, serial):
    case = cases[name]
    rng = np.random.default_rng(seed)
    p = case_params(case).with_mode(SERIAL if serial else "synchronous")
    eng = DistributedEngine(case, p)
    m = eng.model
    x = rng.normal(scale=5.0, size=m.dim)
    sl = m.slices()
    x[sl["mu"]] = np.abs(x[sl["mu"]])
    x[sl["pg"]] = rng.uniform(m.pmin, m.pmax)
    y = eng.layout.vector(eng.step(eng.layout.state(x)))
    assert np.all(y[sl["mu"]] >= 0)
    assert np.all(y[sl["pg"]] >= m.pmin) and np.all(y[sl["pg"]] <= m.pmax)
    assert y[sl["theta"]][m.slack] == 0


def test_message_payload_shape(cases):
    seen = []
    eng = DistributedEngine(cases["case3_multigen"], case_params(cases["case3_multigen"]), tap=lambda d, m: seen.append((d, m)))
    eng.step(eng.init_cold())
    # one message per directed neighbor pair per round
    assert len(seen) == 2 * eng.model.nl
    assert len({(d, m.sender) for d, m in seen}) == len(seen)
    for _, m in seen:
        assert set(m.payload()) == {"sender", "lambda", "theta", "mu"}
        json.dumps(m.payload())


def test_module_level_step(cases):
    case = cases["case3"]
    p = case_params(case)
    s1 = step(init_cold(case), case, p)
    assert s1.k == 1
    assert s1 == DistributedEngine(case, p).step(init_cold(case))
