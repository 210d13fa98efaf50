"""Multi-stage DC optimal power flow with storage: exact-model MPC,
sequential PTDF identification and data-driven predictive control from
Hankel matrices, compared in closed loop."""

from .case_io import load_builtin_case, load_case
from .controllers import (
    Bounds,
    CostSettings,
    DdOpf,
    ExactMpc,
    Measurement,
    SeqIdMpc,
    StageCost,
    build_bounds,
    build_stage_cost,
)
from .netmodel import GridCase, reduce
from .plant import TrajectoryLog, assemble_descriptor, simulate
from .qpsolve import QpProblem, QpSettings, QpSolver, solve
from .simloop import ExperimentConfig, RunMetrics, compare_controllers, prepare_scenario, run_controller

__version__ = "0.1.0"

__all__ = [
    "Bounds",
    "CostSettings",
    "DdOpf",
    "ExactMpc",
    "ExperimentConfig",
    "GridCase",
    "Measurement",
    "QpProblem",
    "QpSettings",
    "QpSolver",
    "RunMetrics",
    "SeqIdMpc",
    "StageCost",
    "TrajectoryLog",
    "assemble_descriptor",
    "build_bounds",
    "build_stage_cost",
    "compare_controllers",
    "load_builtin_case",
    "load_case",
    "prepare_scenario",
    "reduce",
    "run_controller",
    "simulate",
    "solve",
]
