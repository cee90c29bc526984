"""Distributed DC-OPF by per-bus innovation updates.

Each bus is an agent that owns its multiplier ``lam``, its angle ``theta``,
one line multiplier per incident line (the limit on flow leaving the bus)
and the outputs of its local generators.  A round consists of every agent
broadcasting a :class:`NeighborMessage` to each neighbor and then updating
from its own state plus the messages it received.  Agents never see the
global case; they are built from a :class:`BusData` slice holding only
their own load, lines and generators.

Units follow :class:`distopf.model.Model`: per-unit power, radians and
$/MWh for every multiplier.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .model import GridCase, Model
from .oracle import OracleSolution

SYNCHRONOUS = "synchronous"
SERIAL = "serial"

COLD_LAMBDA = 10.0  # $/MWh
DIVERGENCE_BOUND = 1e8


class ProtocolError(RuntimeError):
    """An agent was asked to update without a complete inbox."""


@dataclass(frozen=True)
class TuningParams:
    alpha: float
    beta: float
    gamma: float
    delta: float
    mode: str = SYNCHRONOUS

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "delta"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v)) or v < 0:
                raise ValueError(f"{name} must be a finite nonnegative number, got {v!r}")
        if self.mode not in (SYNCHRONOUS, SERIAL):
            raise ValueError(f"mode must be {SYNCHRONOUS!r} or {SERIAL!r}")

    def with_mode(self, mode: str) -> "TuningParams":
        return TuningParams(self.alpha, self.beta, self.gamma, self.delta, mode)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.alpha, self.beta, self.gamma, self.delta)

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta, "gamma": self.gamma, "delta": self.delta, "mode": self.mode}


# Published step sizes for the 24-bus reliability test system.
RTS_TUNING = TuningParams(alpha=0.1485, beta=0.0056, gamma=0.005, delta=0.008)


@dataclass(frozen=True)
class LocalGen:
    a: float
    b: float
    pmin: float
    pmax: float


@dataclass(frozen=True)
class BusData:
    """What a single bus knows about the network."""

    id: int
    load: float
    is_slack: bool
    neighbors: tuple[int, ...]
    y: tuple[float, ...]
    limit: tuple[float, ...]
    gens: tuple[LocalGen, ...]


@dataclass(frozen=True, slots=True)
class NeighborMessage:
    sender: int
    lam: float
    theta: float
    mu: float  # sender's multiplier for the shared line, directed away from the sender

    def payload(self) -> dict:
        return {"sender": self.sender, "lambda": self.lam, "theta": self.theta, "mu": self.mu}


@dataclass(frozen=True, slots=True)
class AgentState:
    lam: float
    theta: float
    mu_out: tuple[float, ...]  # aligned with BusData.neighbors
    pg: tuple[float, ...]  # aligned with BusData.gens


@dataclass(frozen=True)
class SystemState:
    k: int
    agents: tuple[AgentState, ...]


# ---------------------------------------------------------------------------
# local update rules


def _inbox_for(bus: BusData, inbox: Mapping[int, NeighborMessage]) -> list[NeighborMessage]:
    msgs = []
    for j in bus.neighbors:
        msg = inbox.get(j)
        if msg is None:
            raise ProtocolError(f"bus {bus.id}: no message from neighbor {j}")
        msgs.append(msg)
    return msgs


def local_mismatch(bus: BusData, own: AgentState, msgs: Sequence[NeighborMessage], pg=None) -> float:
    """g_i = -sum P_G + P_L + sum_j (theta_i - theta_j) / X_ij."""
    pg = own.pg if pg is None else pg
    terms = [-p for p in pg]
    terms.append(bus.load)
    terms.extend((own.theta - m.theta) * y for m, y in zip(msgs, bus.y))
    return math.fsum(terms)


def update_lambda(own: AgentState, inbox: Mapping[int, NeighborMessage], params: TuningParams, bus: BusData) -> float:
    msgs = _inbox_for(bus, inbox)
    coupling = math.fsum(
        ((own.lam - m.lam) + (mu_ij - m.mu)) * y for m, mu_ij, y in zip(msgs, own.mu_out, bus.y)
    )
    surplus = -local_mismatch(bus, own, msgs)
    return own.lam - params.beta * coupling - params.alpha * surplus


def update_pg(lam: float, gen: LocalGen) -> float:
    p = (lam - gen.b) / (2.0 * gen.a)
    return min(max(p, gen.pmin), gen.pmax)


def update_theta(own: AgentState, inbox: Mapping[int, NeighborMessage], params: TuningParams, bus: BusData, pin_slack: bool = True) -> float:
    if bus.is_slack and pin_slack:
        return 0.0
    msgs = _inbox_for(bus, inbox)
    return own.theta - params.gamma * local_mismatch(bus, own, msgs)


def update_mu(mu_own: float, theta_self: float, theta_other: float, y: float, limit: float, delta: float) -> float:
    """Projected update of the limit multiplier on flow leaving this bus."""
    return max(0.0, mu_own - delta * (limit - (theta_self - theta_other) * y))


def update_mu_pair(mu_ij, mu_ji, theta_i, theta_j, y, limit, delta) -> tuple[float, float]:
    return (
        update_mu(mu_ij, theta_i, theta_j, y, limit, delta),
        update_mu(mu_ji, theta_j, theta_i, y, limit, delta),
    )


# ---------------------------------------------------------------------------
# agents and network


class BusAgent:
    """One bus.  Holds only its :class:`BusData` and current state."""

    def __init__(self, data: BusData, pin_slack: bool = True):
        self.data = data
        self.pin_slack = pin_slack

    def outbox(self, state: AgentState) -> list[tuple[int, NeighborMessage]]:
        d = self.data
        return [(j, NeighborMessage(d.id, state.lam, state.theta, mu)) for j, mu in zip(d.neighbors, state.mu_out)]

    def update(self, state: AgentState, inbox: Mapping[int, NeighborMessage], params: TuningParams) -> AgentState:
        """Jacobi update: every right-hand side from the round-k values."""
        d = self.data
        msgs = _inbox_for(d, inbox)
        lam = update_lambda(state, inbox, params, d)
        theta = update_theta(state, inbox, params, d, self.pin_slack)
        mu = tuple(
            update_mu(mu, state.theta, m.theta, y, lim, params.delta)
            for mu, m, y, lim in zip(state.mu_out, msgs, d.y, d.limit)
        )
        pg = tuple(update_pg(state.lam, g) for g in d.gens)
        return AgentState(lam, theta, mu, pg)

    def update_serial(self, state: AgentState, inbox: Mapping[int, NeighborMessage], params: TuningParams) -> AgentState:
        """Gauss-Seidel update: each quantity uses the freshest values.

        Generation is set first from the current multiplier, then the
        multiplier and angle see that new generation, and the line
        multipliers see the new angle.
        """
        d = self.data
        msgs = _inbox_for(d, inbox)
        pg = tuple(update_pg(state.lam, g) for g in d.gens)
        fresh = AgentState(state.lam, state.theta, state.mu_out, pg)
        lam = update_lambda(fresh, inbox, params, d)
        theta = update_theta(fresh, inbox, params, d, self.pin_slack)
        mu = tuple(
            update_mu(mu, theta, m.theta, y, lim, params.delta)
            for mu, m, y, lim in zip(state.mu_out, msgs, d.y, d.limit)
        )
        return AgentState(lam, theta, mu, pg)


class Network:
    """Synchronous message exchange between neighboring agents.

    ``tap`` is called with every delivered message, which is how the
    locality tests audit traffic.
    """

    def __init__(self, agents: Sequence[BusAgent], tap: Callable[[int, NeighborMessage], None] | None = None):
        self.agents = tuple(agents)
        self.tap = tap

    def exchange(self, states: Sequence[AgentState]) -> list[dict[int, NeighborMessage]]:
        inboxes: list[dict[int, NeighborMessage]] = [{} for _ in self.agents]
        for agent, st in zip(self.agents, states):
            for dest, msg in agent.outbox(st):
                self._deliver(inboxes, dest, msg)
        return inboxes

    def _deliver(self, inboxes, dest: int, msg: NeighborMessage) -> None:
        box = inboxes[dest - 1]
        if msg.sender in box:
            raise ProtocolError(f"duplicate message from {msg.sender} to {dest}")
        box[msg.sender] = msg
        if self.tap is not None:
            self.tap(dest, msg)

    def round(self, states: Sequence[AgentState], params: TuningParams) -> tuple[AgentState, ...]:
        if params.mode == SYNCHRONOUS:
            inboxes = self.exchange(states)
            return tuple(a.update(s, box, params) for a, s, box in zip(self.agents, states, inboxes))
        # serial: ascending bus id; each agent reads its neighbors' latest posts
        current = list(states)
        for idx, agent in enumerate(self.agents):
            inbox: dict[int, NeighborMessage] = {}
            for j in agent.data.neighbors:
                sender = self.agents[j - 1]
                for dest, msg in sender.outbox(current[j - 1]):
                    if dest == agent.data.id:
                        self._deliver_one(inbox, dest, msg)
            current[idx] = agent.update_serial(current[idx], inbox, params)
        return tuple(current)

    def _deliver_one(self, box, dest, msg):
        box[msg.sender] = msg
        if self.tap is not None:
            self.tap(dest, msg)


# ---------------------------------------------------------------------------
# layout between agent states and the stacked vector


@dataclass(frozen=True)
class Layout:
    """Index map between agent-local storage and the stacked vector.

    The stacked vector is ``[lam (nb), theta (nb), mu_fwd (nl), mu_rev (nl),
    pg (ng)]`` where ``mu_fwd[k]`` is owned by the from-bus of line k.
    """

    nb: int
    nl: int
    ng: int
    mu_slots: tuple[tuple[int, ...], ...]  # per bus, stacked index of each owned mu
    pg_slots: tuple[tuple[int, ...], ...]  # per bus, stacked index of each local unit

    @property
    def dim(self) -> int:
        return 2 * self.nb + 2 * self.nl + self.ng

    def vector(self, state: SystemState) -> np.ndarray:
        x = np.empty(self.dim)
        nb = self.nb
        for i, ag in enumerate(state.agents):
            x[i] = ag.lam
            x[nb + i] = ag.theta
            for slot, v in zip(self.mu_slots[i], ag.mu_out):
                x[slot] = v
            for slot, v in zip(self.pg_slots[i], ag.pg):
                x[slot] = v
        return x

    def state(self, x: np.ndarray, k: int = 0) -> SystemState:
        x = np.asarray(x, dtype=float)
        nb = self.nb
        agents = tuple(
            AgentState(
                float(x[i]),
                float(x[nb + i]),
                tuple(float(x[s]) for s in self.mu_slots[i]),
                tuple(float(x[s]) for s in self.pg_slots[i]),
            )
            for i in range(nb)
        )
        return SystemState(k, agents)


def build_layout(model: Model) -> Layout:
    nb, nl = model.nb, model.nl
    mu_slots = []
    pg_slots = []
    gen_base = 2 * nb + 2 * nl
    for i in range(nb):
        slots = []
        for j, k, forward in _incident(model, i):
            slots.append(2 * nb + k if forward else 2 * nb + nl + k)
        mu_slots.append(tuple(slots))
        pg_slots.append(tuple(gen_base + n for n in np.flatnonzero(model.gen_bus == i)))
    return Layout(nb, nl, model.ng, tuple(mu_slots), tuple(pg_slots))


def _incident(model: Model, i: int) -> list[tuple[int, int, bool]]:
    """(neighbor, line index, bus i is the from-end) sorted by neighbor."""
    out = []
    for k in range(model.nl):
        if model.frm[k] == i:
            out.append((int(model.to[k]), k, True))
        elif model.to[k] == i:
            out.append((int(model.frm[k]), k, False))
    return sorted(out)


def bus_data(model: Model) -> list[BusData]:
    out = []
    for i in range(model.nb):
        inc = _incident(model, i)
        gens = tuple(
            LocalGen(float(model.a[n]), float(model.b[n]), float(model.pmin[n]), float(model.pmax[n]))
            for n in np.flatnonzero(model.gen_bus == i)
        )
        out.append(
            BusData(
                id=i + 1,
                load=float(model.load[i]),
                is_slack=(i == model.slack),
                neighbors=tuple(j + 1 for j, _, _ in inc),
                y=tuple(float(model.y[k]) for _, k, _ in inc),
                limit=tuple(float(model.limit[k]) for _, k, _ in inc),
                gens=gens,
            )
        )
    return out


# ---------------------------------------------------------------------------
# stop rules, traces and the run loop


@dataclass(frozen=True)
class StopRule:
    max_iters: int = 50_000
    eps_x: float | None = 1e-9
    eps_rel: float | None = None
    eps_res: float | None = None
    divergence_bound: float = DIVERGENCE_BOUND


CONVERGED = "converged"
MAX_ITERS = "max_iters"
DIVERGED = "diverged"


@dataclass
class RunTrace:
    """Per-iteration history.  Row k of ``X`` is the stacked iterate X~(k)."""

    k: np.ndarray
    X: np.ndarray
    res: np.ndarray
    rel: np.ndarray | None
    objective: np.ndarray
    step_norm: np.ndarray
    outcome: str
    wall_time: float
    params: TuningParams
    layout: Layout
    base: float
    stop_reason: str = ""

    @property
    def iterations(self) -> int:
        return int(self.k[-1])

    @property
    def final(self) -> np.ndarray:
        return self.X[-1]

    def block(self, name: str) -> np.ndarray:
        nb, nl, ng = self.layout.nb, self.layout.nl, self.layout.ng
        sl = {
            "lambda": slice(0, nb),
            "theta": slice(nb, 2 * nb),
            "mu": slice(2 * nb, 2 * nb + 2 * nl),
            "pg": slice(2 * nb + 2 * nl, 2 * nb + 2 * nl + ng),
        }[name]
        return self.X[:, sl]


class DistributedEngine:
    """Agents plus network for one case and one set of tuning parameters."""

    def __init__(self, case: GridCase, params: TuningParams, pin_slack: bool = True, tap=None):
        self.case = case
        self.model = Model.from_case(case)
        self.params = params
        self.pin_slack = pin_slack
        self.layout = build_layout(self.model)
        self.agents = [BusAgent(d, pin_slack) for d in bus_data(self.model)]
        self.network = Network(self.agents, tap)

    # initial states ----------------------------------------------------

    def init_cold(self) -> SystemState:
        agents = tuple(
            AgentState(COLD_LAMBDA, 0.0, tuple(0.0 for _ in a.data.neighbors), tuple(0.0 for _ in a.data.gens))
            for a in self.agents
        )
        return SystemState(0, agents)

    def init_from(self, sol: OracleSolution) -> SystemState:
        """Warm start from a centralized solution (case units)."""
        m = self.model
        x = np.concatenate([sol.lam, sol.theta, sol.mu_line[:, 0], sol.mu_line[:, 1], np.asarray(sol.pg) / m.base])
        return self.layout.state(x)

    # iteration -----------------------------------------------------------

    def step(self, state: SystemState) -> SystemState:
        return SystemState(state.k + 1, self.network.round(state.agents, self.params))

    def residual(self, x: np.ndarray) -> float:
        m = self.model
        sl = m.slices()
        return float(np.sum(np.abs(m.mismatch(x[sl["pg"]], x[sl["theta"]]))))

    def run(self, init: SystemState | None = None, stop: StopRule = StopRule(), f_star: float | None = None) -> RunTrace:
        """Iterate until the first satisfied stop rule.

        ``f_star`` (in $/h) is used only for the relative-objective metric and
        the optional ``eps_rel`` stop; it never enters an update.
        """
        if stop.eps_rel is not None and f_star is None:
            raise ValueError("eps_rel stop rule needs f_star")
        m = self.model
        pg_sl = m.slices()["pg"]
        state = self.init_cold() if init is None else init
        x = self.layout.vector(state)
        xs, res, obj, steps = [x], [self.residual(x)], [m.objective(x[pg_sl])], [0.0]
        outcome, reason = MAX_ITERS, "max_iters"
        t0 = time.perf_counter()
        for _ in range(stop.max_iters):
            state = self.step(state)
            x_new = self.layout.vector(state)
            d = float(np.max(np.abs(x_new - x))) if len(x) else 0.0
            x = x_new
            xs.append(x)
            res.append(self.residual(x))
            obj.append(m.objective(x[pg_sl]))
            steps.append(d)
            if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > stop.divergence_bound:
                outcome, reason = DIVERGED, "divergence_bound"
                break
            if stop.eps_x is not None and d <= stop.eps_x:
                outcome, reason = CONVERGED, "eps_x"
                break
            if stop.eps_res is not None and res[-1] <= stop.eps_res:
                outcome, reason = CONVERGED, "eps_res"
                break
            if stop.eps_rel is not None and abs(obj[-1] - f_star) / f_star <= stop.eps_rel:
                outcome, reason = CONVERGED, "eps_rel"
                break
        wall = time.perf_counter() - t0
        obj_arr = np.array(obj)
        rel = None if f_star is None else np.abs(obj_arr - f_star) / f_star
        return RunTrace(
            k=np.arange(len(xs)),
            X=np.array(xs),
            res=np.array(res),
            rel=rel,
            objective=obj_arr,
            step_norm=np.array(steps),
            outcome=outcome,
            wall_time=wall,
            params=self.params,
            layout=self.layout,
            base=m.base,
            stop_reason=reason,
        )


def init_cold(case: GridCase) -> SystemState:
    return DistributedEngine(case, TuningParams(0, 0, 0, 0)).init_cold()


def step(state: SystemState, case: GridCase, params: TuningParams) -> SystemState:
    return DistributedEngine(case, params).step(state)


def run(case: GridCase, params: TuningParams, init: SystemState | None = None, stop: StopRule = StopRule(), f_star: float | None = None) -> RunTrace:
    return DistributedEngine(case, params).run(init, stop, f_star)


def solution_from_vector(case: GridCase, x: np.ndarray) -> OracleSolution:
    """Package a stacked iterate as a candidate for :func:`oracle.check_kkt`.

    Generator-limit multipliers are not iterated; they are recovered from
    the generator stationarity identity.
    """
    from .oracle import recover_gen_multipliers

    m = Model.from_case(case)
    sl = m.slices()
    mu = x[sl["mu"]]
    pg_mw = x[sl["pg"]] * m.base
    lam = x[sl["lambda"]].copy()
    hi, lo = recover_gen_multipliers(case, pg_mw, lam)
    return OracleSolution(
        pg=pg_mw,
        theta=x[sl["theta"]].copy(),
        lam=lam,
        mu_line=np.column_stack([mu[: m.nl], mu[m.nl :]]),
        mu_gen_hi=hi,
        mu_gen_lo=lo,
        objective=m.objective(x[sl["pg"]]),
        method="distributed",
    )
