"""Grid data model: case ingestion, validation, network matrices and units.

All case data is held in MW, $/MWh and $/MW^2h with reactances in per-unit.
Numerical routines work on :class:`Model`, a flat array view in per-unit
power whose cost coefficients are normalized by the base power so that
multipliers come out directly in $/MWh.
"""

from __future__ import annotations

import dataclasses
import json
import os
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import IO, Any, Iterable

import numpy as np


class CaseError(Exception):
    """Base class for case ingestion failures."""


class CaseParseError(CaseError):
    """The case document is not well-formed JSON or has the wrong shape."""


class CaseValidationError(CaseError):
    """A field of an otherwise well-formed case violates an invariant."""

    def __init__(self, path: str, message: str):
        self.path = path
        self.message = message
        super().__init__(f"{path}: {message}")


@dataclass(frozen=True)
class Bus:
    id: int
    load: float
    is_slack: bool = False
    label: Any = None


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    reactance: float
    limit: float

    @property
    def susceptance(self) -> float:
        return 1.0 / self.reactance

    @property
    def endpoints(self) -> tuple[int, int]:
        return (self.from_bus, self.to_bus)


@dataclass(frozen=True)
class Generator:
    id: int
    bus: int
    a: float
    b: float
    c: float
    pmin: float
    pmax: float

    def cost(self, p: float) -> float:
        return self.a * p * p + self.b * p + self.c


@dataclass(frozen=True)
class GridCase:
    """Immutable network description.

    ``units`` is ``"mw"`` for case-file units or ``"pu"`` after
    :func:`to_internal_units`.
    """

    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    generators: tuple[Generator, ...]
    base_mva: float = 100.0
    units: str = "mw"
    name: str = ""
    tuning: tuple[float, float, float, float] | None = None  # suggested (alpha, beta, gamma, delta)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_line(self) -> int:
        return len(self.lines)

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    @property
    def slack(self) -> int:
        for bus in self.buses:
            if bus.is_slack:
                return bus.id
        return 1

    def gens_at(self, bus_id: int) -> tuple[int, ...]:
        """Indices into ``generators`` of the units at ``bus_id``."""
        return tuple(n for n, g in enumerate(self.generators) if g.bus == bus_id)

    def neighbors(self, bus_id: int) -> tuple[int, ...]:
        out = []
        for line in self.lines:
            if line.from_bus == bus_id:
                out.append(line.to_bus)
            elif line.to_bus == bus_id:
                out.append(line.from_bus)
        return tuple(sorted(out))

    def line_index(self, i: int, j: int) -> int:
        for k, line in enumerate(self.lines):
            if {line.from_bus, line.to_bus} == {i, j}:
                return k
        raise KeyError((i, j))

    def total_load(self) -> float:
        return sum(b.load for b in self.buses)


@dataclass(frozen=True)
class NetworkMatrices:
    B: np.ndarray
    incidence: np.ndarray
    By: np.ndarray


# ---------------------------------------------------------------------------
# ingestion


def _require(obj: dict, key: str, path: str, aliases: Iterable[str] = ()):
    for k in (key, *aliases):
        if k in obj:
            return obj[k]
    raise CaseValidationError(f"{path}.{key}", "missing field")


def _number(value, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise CaseValidationError(path, f"expected a number, got {value!r}")
    value = float(value)
    if not np.isfinite(value):
        raise CaseValidationError(path, "must be finite")
    return value


def load_case(source: str | os.PathLike | bytes | IO | dict) -> GridCase:
    """Read and validate a JSON case document.

    ``source`` may be a path, raw bytes/str JSON, an open file or an already
    decoded mapping.  Bus ids are renumbered to 1..N in ascending order of the
    ids given in the file; parallel lines are merged into one equivalent line.
    """
    doc = _decode(source)
    if not isinstance(doc, dict):
        raise CaseParseError("case document must be a JSON object")
    for key in ("buses", "lines"):
        if not isinstance(doc.get(key), list):
            raise CaseParseError(f"'{key}' must be a list")
    gens_doc = doc.get("generators", doc.get("gens"))
    if not isinstance(gens_doc, list):
        raise CaseParseError("'generators' must be a list")

    base = _number(doc.get("base_mva", 100.0), "base_mva")
    if base <= 0:
        raise CaseValidationError("base_mva", "must be positive")

    raw_ids = []
    loads = []
    slack_flags = []
    for n, rec in enumerate(doc["buses"]):
        path = f"buses[{n}]"
        if not isinstance(rec, dict):
            raise CaseParseError(f"{path} must be an object")
        bid = _require(rec, "id", path)
        if isinstance(bid, bool) or not isinstance(bid, int):
            raise CaseValidationError(f"{path}.id", "bus id must be an integer")
        load = _number(rec.get("load", 0.0), f"{path}.load")
        if load < 0:
            raise CaseValidationError(f"{path}.load", "load must be nonnegative")
        raw_ids.append(bid)
        loads.append(load)
        slack_flags.append(bool(rec.get("slack", False)))
    if not raw_ids:
        raise CaseValidationError("buses", "at least one bus is required")
    if len(set(raw_ids)) != len(raw_ids):
        dup = next(b for b in raw_ids if raw_ids.count(b) > 1)
        n = len(raw_ids) - 1 - raw_ids[::-1].index(dup)
        raise CaseValidationError(f"buses[{n}].id", f"duplicate bus id {dup}")
    if sum(slack_flags) > 1:
        n = [k for k, s in enumerate(slack_flags) if s][1]
        raise CaseValidationError(f"buses[{n}].slack", "more than one slack bus")

    order = sorted(range(len(raw_ids)), key=lambda k: raw_ids[k])
    renumber = {raw_ids[k]: pos + 1 for pos, k in enumerate(order)}
    if not any(slack_flags):
        slack_flags[order[0]] = True
    buses = tuple(
        Bus(id=renumber[raw_ids[k]], load=loads[k], is_slack=slack_flags[k], label=raw_ids[k])
        for k in order
    )

    merged: dict[frozenset, list] = {}
    for n, rec in enumerate(doc["lines"]):
        path = f"lines[{n}]"
        if not isinstance(rec, dict):
            raise CaseParseError(f"{path} must be an object")
        f_raw = _require(rec, "from", path, ("fbus",))
        t_raw = _require(rec, "to", path, ("tbus",))
        for key, raw in (("from", f_raw), ("to", t_raw)):
            if raw not in renumber:
                raise CaseValidationError(f"{path}.{key}", f"unknown bus {raw!r}")
        if f_raw == t_raw:
            raise CaseValidationError(f"{path}.to", "line endpoints must differ")
        x = _number(_require(rec, "x", path), f"{path}.x")
        if x <= 0:
            raise CaseValidationError(f"{path}.x", "reactance must be positive")
        limit = _number(_require(rec, "limit", path), f"{path}.limit")
        if limit <= 0:
            raise CaseValidationError(f"{path}.limit", "limit must be positive")
        f, t = renumber[f_raw], renumber[t_raw]
        key = frozenset((f, t))
        if key in merged:
            merged[key][2] += 1.0 / x
            merged[key][3] += limit
        else:
            merged[key] = [f, t, 1.0 / x, limit]
    lines = tuple(Line(f, t, 1.0 / y, lim) for f, t, y, lim in merged.values())

    gens = []
    for n, rec in enumerate(gens_doc):
        path = f"generators[{n}]"
        if not isinstance(rec, dict):
            raise CaseParseError(f"{path} must be an object")
        bus_raw = _require(rec, "bus", path)
        if bus_raw not in renumber:
            raise CaseValidationError(f"{path}.bus", f"unknown bus {bus_raw!r}")
        a = _number(_require(rec, "a", path), f"{path}.a")
        if a <= 0:
            raise CaseValidationError(f"{path}.a", "quadratic cost must be strictly positive")
        b = _number(rec.get("b", 0.0), f"{path}.b")
        c = _number(rec.get("c", 0.0), f"{path}.c")
        pmin = _number(rec.get("pmin", 0.0), f"{path}.pmin")
        pmax = _number(_require(rec, "pmax", path), f"{path}.pmax")
        if pmin > pmax:
            raise CaseValidationError(f"{path}.pmin", "pmin exceeds pmax")
        gens.append(Generator(n + 1, renumber[bus_raw], a, b, c, pmin, pmax))

    tuning = doc.get("tuning")
    if tuning is not None:
        if not isinstance(tuning, dict):
            raise CaseParseError("'tuning' must be an object")
        tuning = tuple(_number(_require(tuning, k, "tuning"), f"tuning.{k}") for k in ("alpha", "beta", "gamma", "delta"))

    case = GridCase(buses, lines, tuple(gens), base, "mw", str(doc.get("name", "")), tuning)
    _check_connected(case)
    return case


def _decode(source) -> Any:
    if isinstance(source, dict):
        return source
    try:
        if isinstance(source, (bytes, bytearray)):
            return json.loads(source)
        if hasattr(source, "read"):
            return json.load(source)
        text = str(source)
        if text.lstrip().startswith("{"):
            return json.loads(text)
        with open(source, "rb") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise CaseParseError(f"malformed JSON: {exc}") from exc
    except UnicodeDecodeError as exc:
        raise CaseParseError(f"undecodable case document: {exc}") from exc


def _check_connected(case: GridCase) -> None:
    adj: dict[int, list[int]] = {b.id: [] for b in case.buses}
    for line in case.lines:
        adj[line.from_bus].append(line.to_bus)
        adj[line.to_bus].append(line.from_bus)
    seen = {1}
    queue = deque([1])
    while queue:
        for j in adj[queue.popleft()]:
            if j not in seen:
                seen.add(j)
                queue.append(j)
    if len(seen) != case.n_bus:
        missing = sorted(set(adj) - seen)
        raise CaseValidationError("lines", f"network is disconnected; unreachable buses {missing}")


def case_to_dict(case: GridCase) -> dict:
    """Inverse of :func:`load_case` (after renumbering and merging)."""
    out = {
        "name": case.name,
        "base_mva": case.base_mva,
        "buses": [
            {"id": b.id, "load": b.load, **({"slack": True} if b.is_slack else {})}
            for b in case.buses
        ],
        "lines": [
            {"from": l.from_bus, "to": l.to_bus, "x": l.reactance, "limit": l.limit}
            for l in case.lines
        ],
        "generators": [
            {"bus": g.bus, "a": g.a, "b": g.b, "c": g.c, "pmin": g.pmin, "pmax": g.pmax}
            for g in case.generators
        ],
    }
    if case.tuning is not None:
        out["tuning"] = dict(zip(("alpha", "beta", "gamma", "delta"), case.tuning))
    return out


# ---------------------------------------------------------------------------
# matrices and transforms


def build_matrices(case: GridCase) -> NetworkMatrices:
    nb, nl = case.n_bus, case.n_line
    incidence = np.zeros((nb, nl))
    y = np.empty(nl)
    for k, line in enumerate(case.lines):
        incidence[line.from_bus - 1, k] = 1.0
        incidence[line.to_bus - 1, k] = -1.0
        y[k] = line.susceptance
    weighted = incidence * y  # I diag(1/X)
    B = weighted @ incidence.T
    By = np.vstack([weighted.T, -weighted.T])
    return NetworkMatrices(B=B, incidence=incidence, By=By)


def scale_line_limits(case: GridCase, factor: float) -> GridCase:
    if not factor > 0:
        raise ValueError(f"line-limit factor must be positive, got {factor}")
    lines = tuple(dataclasses.replace(l, limit=l.limit * factor) for l in case.lines)
    return dataclasses.replace(case, lines=lines)


def to_internal_units(case: GridCase) -> GridCase:
    """Convert powers to per-unit on ``base_mva`` and costs to $/pu."""
    if case.units == "pu":
        return case
    s = case.base_mva
    if not s > 0:
        raise ValueError("base_mva must be positive")
    return dataclasses.replace(
        case,
        units="pu",
        buses=tuple(dataclasses.replace(b, load=b.load / s) for b in case.buses),
        lines=tuple(dataclasses.replace(l, limit=l.limit / s) for l in case.lines),
        generators=tuple(
            dataclasses.replace(g, a=g.a * s * s, b=g.b * s, pmin=g.pmin / s, pmax=g.pmax / s)
            for g in case.generators
        ),
    )


def from_internal_units(case: GridCase) -> GridCase:
    if case.units == "mw":
        return case
    s = case.base_mva
    if not s > 0:
        raise ValueError("base_mva must be positive")
    return dataclasses.replace(
        case,
        units="mw",
        buses=tuple(dataclasses.replace(b, load=b.load * s) for b in case.buses),
        lines=tuple(dataclasses.replace(l, limit=l.limit * s) for l in case.lines),
        generators=tuple(
            dataclasses.replace(g, a=g.a / (s * s), b=g.b / s, pmin=g.pmin * s, pmax=g.pmax * s)
            for g in case.generators
        ),
    )


# ---------------------------------------------------------------------------
# flat numeric view


@dataclass(frozen=True, eq=False)
class Model:
    """Array view of a case used by every solver in the package.

    Powers are per-unit, angles radians.  Costs are the per-unit costs
    divided by the base power, so ``2*a*p + b`` and all multipliers are in
    $/MWh and ``objective()`` returns $/h after multiplying back.
    """

    case: GridCase
    base: float
    slack: int  # zero-based
    frm: np.ndarray
    to: np.ndarray
    y: np.ndarray
    limit: np.ndarray
    load: np.ndarray
    gen_bus: np.ndarray  # zero-based
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    pmin: np.ndarray
    pmax: np.ndarray
    mats: NetworkMatrices = field(repr=False)

    @classmethod
    def from_case(cls, case: GridCase) -> "Model":
        pu = to_internal_units(case)
        s = pu.base_mva
        gens = pu.generators
        return cls(
            case=from_internal_units(case),
            base=s,
            slack=pu.slack - 1,
            frm=np.array([l.from_bus - 1 for l in pu.lines], dtype=int),
            to=np.array([l.to_bus - 1 for l in pu.lines], dtype=int),
            y=np.array([l.susceptance for l in pu.lines], dtype=float),
            limit=np.array([l.limit for l in pu.lines], dtype=float),
            load=np.array([b.load for b in pu.buses], dtype=float),
            gen_bus=np.array([g.bus - 1 for g in gens], dtype=int),
            a=np.array([g.a / s for g in gens], dtype=float),
            b=np.array([g.b / s for g in gens], dtype=float),
            c=np.array([g.c / s for g in gens], dtype=float),
            pmin=np.array([g.pmin for g in gens], dtype=float),
            pmax=np.array([g.pmax for g in gens], dtype=float),
            mats=build_matrices(pu),
        )

    @property
    def nb(self) -> int:
        return len(self.load)

    @property
    def nl(self) -> int:
        return len(self.y)

    @property
    def ng(self) -> int:
        return len(self.a)

    @property
    def dim(self) -> int:
        return 2 * self.nb + 2 * self.nl + self.ng

    @cached_property
    def E(self) -> np.ndarray:
        """Bus-by-generator aggregation matrix."""
        E = np.zeros((self.nb, self.ng))
        E[self.gen_bus, np.arange(self.ng)] = 1.0
        return E

    @property
    def B(self) -> np.ndarray:
        return self.mats.B

    @property
    def By(self) -> np.ndarray:
        return self.mats.By

    def flows(self, theta: np.ndarray) -> np.ndarray:
        return self.y * (theta[self.frm] - theta[self.to])

    def mismatch(self, pg: np.ndarray, theta: np.ndarray) -> np.ndarray:
        """Local balance residual g_i = -sum P_G + P_L + sum flows out."""
        return -self.E @ pg + self.load + self.B @ theta

    def objective(self, pg: np.ndarray) -> float:
        """Generation cost in $/h for a per-unit dispatch."""
        pg = np.asarray(pg, dtype=float)
        return float(self.base * np.sum(self.a * pg * pg + self.b * pg + self.c))

    def slices(self) -> dict[str, slice]:
        nb, nl, ng = self.nb, self.nl, self.ng
        return {
            "lambda": slice(0, nb),
            "theta": slice(nb, 2 * nb),
            "mu": slice(2 * nb, 2 * nb + 2 * nl),
            "pg": slice(2 * nb + 2 * nl, 2 * nb + 2 * nl + ng),
        }


def bundled_case_path(name: str) -> str:
    here = os.path.join(os.path.dirname(__file__), "cases")
    fname = name if name.endswith(".json") else f"{name}.json"
    return os.path.join(here, fname)


def bundled_cases() -> list[str]:
    here = os.path.join(os.path.dirname(__file__), "cases")
    return sorted(f[:-5] for f in os.listdir(here) if f.endswith(".json"))


def resolve_case(ref: str | os.PathLike) -> GridCase:
    """Load ``ref`` as a path, falling back to a bundled case name."""
    if os.path.exists(ref):
        return load_case(ref)
    path = bundled_case_path(str(ref))
    if os.path.exists(path):
        return load_case(path)
    raise FileNotFoundError(f"no case file or bundled case named {ref!r}")
