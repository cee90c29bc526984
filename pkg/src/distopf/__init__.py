"""Distributed DC optimal power flow with bus agents, a reference QP solver
and contraction certificates."""

__version__ = "0.1.0"

from .cert import (
    Certificate,
    UpdateSystem,
    build_update_system,
    evaluate_certificate,
    tune_parameters,
    verify_contraction_trace,
)
from .engine import (
    RTS_TUNING,
    DistributedEngine,
    NeighborMessage,
    RunTrace,
    StopRule,
    TuningParams,
    init_cold,
    run,
    solution_from_vector,
    step,
)
from .harness import ComparisonReport, compare, metric_rel, metric_res
from .model import (
    CaseError,
    CaseParseError,
    CaseValidationError,
    GridCase,
    build_matrices,
    load_case,
    resolve_case,
    scale_line_limits,
    to_internal_units,
)
from .oracle import InfeasibleError, KKTReport, OracleSolution, check_kkt, solve_centralized

__all__ = [
    "Certificate",
    "CaseError",
    "CaseParseError",
    "CaseValidationError",
    "ComparisonReport",
    "DistributedEngine",
    "GridCase",
    "InfeasibleError",
    "KKTReport",
    "NeighborMessage",
    "OracleSolution",
    "RunTrace",
    "StopRule",
    "RTS_TUNING",
    "TuningParams",
    "UpdateSystem",
    "build_matrices",
    "build_update_system",
    "check_kkt",
    "compare",
    "evaluate_certificate",
    "init_cold",
    "load_case",
    "metric_rel",
    "metric_res",
    "resolve_case",
    "run",
    "scale_line_limits",
    "solution_from_vector",
    "solve_centralized",
    "step",
    "to_internal_units",
    "tune_parameters",
    "verify_contraction_trace",
]
