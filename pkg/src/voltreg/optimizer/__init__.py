"""Tap/reactive-power dispatch as a mixed-integer linear program."""

from .lp import LpError, LpInfeasible, LpInstance, LpResult, LpUnbounded, dense_simplex, solve_lp, write_lp_format
from .milp import (
    BnbResult,
    DispatchSolution,
    StepCommand,
    branch_and_bound,
    extract_setpoints,
    solve_milp,
    write_solver_log,
)
from .problem import (
    DispatchProblem,
    DispatchStep,
    Layout,
    assemble,
    condense,
    predicted_state,
    pv_node_indices,
    pv_q_max,
    ramp_limit,
)
