"""DOPF over the linear grid model: QP assembly, central and distributed solvers."""

from .central import check_row_feasibility, solve_central
from .distributed import balance_residual, dual_update, predict_and_update, primal_update, solve_distributed
from .kkt import KKTReport, kkt_residuals
from .problem import (
    DEFAULT_COSTS,
    CostModel,
    LimitSet,
    ProblemSpec,
    QPProblem,
    assemble_qp,
    default_costs,
    load_problem,
    parse_problem,
)
from .solution import DualState, OPFSolution, SolverConfig, TraceRow, trace_to_csv

__all__ = [
    "CostModel", "DEFAULT_COSTS", "DualState", "KKTReport", "LimitSet", "OPFSolution", "ProblemSpec",
    "QPProblem", "SolverConfig", "TraceRow", "assemble_qp", "balance_residual", "check_row_feasibility",
    "default_costs", "dual_update", "kkt_residuals", "load_problem", "parse_problem", "predict_and_update",
    "primal_update", "solve_central", "solve_distributed", "trace_to_csv",
]
