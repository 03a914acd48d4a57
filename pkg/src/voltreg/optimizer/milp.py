"""
Best-bound branch-and-bound over the integer tap positions.

Node selection pops the open node with the smallest relaxation bound (ties by
creation order). Branching picks the most fractional integer variable, ties by
lowest variable index, which in both formulations orders taps by (OLTC, step).
Integer-feasible relaxations are re-solved with the integers fixed so the
incumbent objective is exact for that assignment. Among assignments with equal
objective the one with the smallest total distance from the entry positions wins,
then the lexicographically smallest tap vector.
"""

from __future__ import annotations

import csv
import heapq
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .lp import LpError, LpInfeasible, LpInstance, solve_lp
from .problem import DispatchProblem, Layout, assemble, condense, predicted_state

log = logging.getLogger(__name__)

INT_TOL = 1e-6
GAP_TOL = 1e-6
TIE_TOL = 1e-9


@dataclass
class BnbResult:
    x: np.ndarray | None
    objective: float
    bound: float
    root_bound: float
    gap: float
    status: str  # optimal | time_limit | node_limit | fallback
    nodes: int
    log: list[dict] = field(default_factory=list)


def _rel_gap(inc: float, bound: float) -> float:
    if not math.isfinite(inc):
        return math.inf
    return max(0.0, inc - bound) / max(abs(inc), 1e-12)


def branch_and_bound(
    lp: LpInstance,
    *,
    fallback: Mapping[int, float] | None = None,
    tie_key: Callable[[np.ndarray], tuple] | None = None,
    time_budget: float = 60.0,
    node_limit: int = 100_000,
    lp_solver=solve_lp,
) -> BnbResult:
    """Minimize ``lp`` with its ``integrality`` marks enforced.

    ``fallback`` fixes a subset of variables to produce a first incumbent before
    branching starts (for dispatch: every tap held at its entry position).
    """
    t_start = time.perf_counter()
    ints = np.flatnonzero(lp.integrality)
    tie_key = tie_key or (lambda x: tuple(np.rint(x[ints]).astype(int)))
    rows: list[dict] = []
    inc_x, inc_obj, inc_key = None, math.inf, None

    def tie_tol(obj):
        return TIE_TOL * max(1.0, abs(obj))

    def offer(x, obj, source):
        nonlocal inc_x, inc_obj, inc_key
        key = tie_key(x)
        better = obj < inc_obj - tie_tol(inc_obj) if math.isfinite(inc_obj) else True
        tie = math.isfinite(inc_obj) and abs(obj - inc_obj) <= tie_tol(inc_obj)
        if better or (tie and key < inc_key):
            inc_x, inc_obj, inc_key = x, obj, key
            return True
        return False

    def fixed_solve(lb, ub, xr):
        lb, ub = lb.copy(), ub.copy()
        v = np.rint(xr[ints])
        lb[ints] = v
        ub[ints] = v
        return lp_solver(lp, lb, ub)

    if fallback:
        lb, ub = lp.lb.copy(), lp.ub.copy()
        for j, v in fallback.items():
            lb[j] = ub[j] = v
        try:
            r = lp_solver(lp, lb, ub)
            offer(r.x, r.objective, "fallback")
        except LpError as exc:
            log.warning("fallback incumbent infeasible: %s", exc)

    try:
        root = lp_solver(lp)
    except LpInfeasible:
        if inc_x is None:
            raise
        return BnbResult(inc_x, inc_obj, inc_obj, inc_obj, 0.0, "fallback", 0, rows)
    root_bound = root.objective
    heap = [(root.objective, 0, lp.lb.copy(), lp.ub.copy(), root.x)]
    seq = 1
    nodes = 0
    status = "optimal"
    while heap:
        if time.perf_counter() - t_start > time_budget:
            status = "time_limit"
            break
        if nodes >= node_limit:
            status = "node_limit"
            break
        bound, _, lb, ub, x = heapq.heappop(heap)
        if math.isfinite(inc_obj) and bound > inc_obj + tie_tol(inc_obj):
            continue
        nodes += 1
        xi = x[ints]
        frac = np.abs(xi - np.rint(xi))
        if np.all(frac <= INT_TOL):
            try:
                r = fixed_solve(lb, ub, x)
                offer(r.x, r.objective, "node")
            except LpError:
                pass
        else:
            f = np.minimum(xi - np.floor(xi), np.ceil(xi) - xi)
            k = int(np.argmax(f))  # first maximum = lowest index
            j = ints[k]
            for lo, hi in ((lb[j], math.floor(x[j])), (math.ceil(x[j]), ub[j])):
                if lo > hi:
                    continue
                clb, cub = lb.copy(), ub.copy()
                clb[j], cub[j] = lo, hi
                try:
                    r = lp_solver(lp, clb, cub)
                except LpInfeasible:
                    continue
                if math.isfinite(inc_obj) and r.objective > inc_obj + tie_tol(inc_obj):
                    continue
                heapq.heappush(heap, (r.objective, seq, clb, cub, r.x))
                seq += 1
        open_bound = heap[0][0] if heap else inc_obj
        rows.append({
            "node": nodes,
            "bound": bound,
            "incumbent": inc_obj,
            "open_nodes": len(heap),
            "gap": _rel_gap(inc_obj, min(open_bound, inc_obj)),
        })

    best_open = min((h[0] for h in heap), default=inc_obj)
    if inc_x is None:
        raise LpInfeasible("no integer-feasible point found")
    gap = _rel_gap(inc_obj, min(best_open, inc_obj))
    if status != "optimal" and gap <= GAP_TOL:
        status = "optimal"
    return BnbResult(inc_x, inc_obj, min(best_open, inc_obj), root_bound, gap, status, nodes, rows)


def write_solver_log(rows: list[dict], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["node", "bound", "incumbent", "open_nodes", "gap"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


@dataclass
class DispatchSolution:
    taps: np.ndarray  # (P, T) int
    dq: np.ndarray  # (T, K) p.u. per PV node
    vmag: np.ndarray  # (T, N) predicted, non-slack nodes
    objective: float
    J1: float
    J2: float
    status: str
    gap: float
    nodes: int
    root_bound: float
    oltc_ids: list[str]
    pv_nodes: np.ndarray
    x: np.ndarray | None = None
    layout: Layout | None = None
    log: list[dict] = field(default_factory=list)

    def tap_schedule(self) -> dict[str, list[int]]:
        return {oid: [int(v) for v in self.taps[p]] for p, oid in enumerate(self.oltc_ids)}


def _tie_key(prob: DispatchProblem, L: Layout):
    tp = np.array([prob.tau_prev[dev.id] for dev in prob.model.oltcs], dtype=float)

    def key(x):
        taps = np.rint(x[L.tau]).astype(int) if prob.P else np.zeros((0, prob.T), dtype=int)
        dist = int(np.abs(taps - tp[:, None]).sum()) if prob.P else 0
        return (dist, tuple(taps.ravel()))

    return key


def solve_milp(
    prob: DispatchProblem,
    time_budget: float = 60.0,
    *,
    formulation: str = "condensed",
    node_limit: int = 100_000,
    log_path: str | Path | None = None,
    lp_solver=solve_lp,
) -> DispatchSolution:
    """Optimal tap schedule and reactive set-points over the horizon.

    Never fails for a well-formed problem: holding every tap at its entry
    position is always feasible and seeds the incumbent.
    """
    if formulation == "condensed":
        lp, L = condense(prob)
    elif formulation == "full":
        lp, L = assemble(prob)
    else:
        raise ValueError(f"unknown formulation {formulation!r}")
    fallback = {}
    for p, dev in enumerate(prob.model.oltcs):
        for t in range(prob.T):
            fallback[int(L.tau[p, t])] = float(prob.tau_prev[dev.id])
            fallback[int(L.m[p, t])] = 0.0
    res = branch_and_bound(lp, fallback=fallback, tie_key=_tie_key(prob, L), time_budget=time_budget,
                           node_limit=node_limit, lp_solver=lp_solver)
    if log_path is not None:
        write_solver_log(res.log, log_path)
    taps, dq, vm = predicted_state(prob, L, res.x)
    tp = np.array([prob.tau_prev[dev.id] for dev in prob.model.oltcs], dtype=int)
    moves = np.diff(np.hstack([tp[:, None], taps]), axis=1) if prob.P else np.zeros((0, prob.T))
    J1 = float(np.abs(vm - 1.0).sum())
    J2 = float(np.abs(moves).sum())
    return DispatchSolution(
        taps=taps, dq=dq, vmag=vm, objective=res.objective, J1=J1, J2=J2, status=res.status, gap=res.gap,
        nodes=res.nodes, root_bound=res.root_bound, oltc_ids=[dev.id for dev in prob.model.oltcs],
        pv_nodes=prob.pv_nodes, x=res.x, layout=L, log=res.log,
    )


@dataclass
class StepCommand:
    taps: dict[str, int]
    q_kvar: dict[str, float]
    clipped: list[str] = field(default_factory=list)


def extract_setpoints(
    sol: DispatchSolution,
    prob: DispatchProblem,
    pv_kw: list[Mapping[str, float]] | None = None,
) -> list[StepCommand]:
    """Per-step tap positions and SI reactive set-points (kvar).

    Inverters start from unity power factor, so the set-point equals the solved
    change. A node's change is shared among its units in proportion to their
    capability; ``pv_kw`` (real output per unit and step) defines that
    capability, defaulting to equal shares of the node's bound.
    """
    model = prob.model
    pos = {int(g): k for k, g in enumerate(sol.pv_nodes)}
    units_at = {}
    for pv in model.pv_units:
        units_at.setdefault(pos[pv.node.index], []).append(pv)
    out = []
    for t in range(prob.T):
        taps = {}
        clipped = []
        for p, dev in enumerate(model.oltcs):
            v = int(sol.taps[p, t])
            if not dev.tau_min <= v <= dev.tau_max:
                clipped.append(f"tap {dev.id} step {t}: {v}")
                v = min(max(v, dev.tau_min), dev.tau_max)
            taps[dev.id] = v
        q = {}
        for k, units in units_at.items():
            total = sol.dq[t, k] * model.s_base_kva
            if pv_kw is not None:
                caps = np.array([u.q_max_kvar(pv_kw[t].get(u.id, 0.0)) for u in units])
            else:
                caps = np.full(len(units), prob.steps[t].q_max[k] * model.s_base_kva / len(units))
            share = caps / caps.sum() if caps.sum() > 0 else np.zeros(len(units))
            for u, s, cap in zip(units, share, caps):
                val = float(total * s)
                if abs(val) > cap * (1 + 1e-9) + 1e-9:
                    clipped.append(f"q {u.id} step {t}: {val:.6g} kvar beyond {cap:.6g}")
                    val = float(np.clip(val, -cap, cap))
                q[u.id] = val
        for msg in clipped:
            log.warning("set-point clipped: %s", msg)
        out.append(StepCommand(taps, q, clipped))
    return out
