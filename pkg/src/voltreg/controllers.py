"""
Voltage controllers applied on the nonlinear power flow.

AVR: every inverter follows a local Volt-Var curve and the OLTC keeps its
secondary voltage inside a band around a reference, without coordination.
OVR: taps and reactive set-points come from the dispatch optimizer and are
applied as fixed injections.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .netmodel import FeederModel
from .optimizer.problem import ramp_limit
from .powerflow import OperatingPoint, PowerFlowError, build_injections, solve_powerflow, tap_ratios

log = logging.getLogger(__name__)

DEFAULT_VOLT_VAR = ((0.92, 1.0), (0.98, 0.0), (1.02, 0.0), (1.08, -1.0))
Q_TOL_KVAR = 0.1
MAX_Q_ITER = 20
Q_DAMPING = 0.3
Q_DAMPING_MIN = 0.02


@dataclass(frozen=True)
class VoltVarCurve:
    """Piecewise-linear map from PCC voltage to a fraction of available vars."""

    breakpoints: tuple[tuple[float, float], ...] = DEFAULT_VOLT_VAR

    def __post_init__(self):
        bp = tuple((float(v), float(q)) for v, q in self.breakpoints)
        object.__setattr__(self, "breakpoints", bp)
        if len(bp) < 2:
            raise ValueError("Volt-Var curve needs at least two breakpoints")
        v = np.array([b[0] for b in bp])
        q = np.array([b[1] for b in bp])
        if np.any(np.diff(v) <= 0):
            raise ValueError("Volt-Var voltages must be strictly increasing")
        if np.any(np.abs(q) > 1):
            raise ValueError("Volt-Var outputs must lie in [-1, 1]")
        if np.any(np.diff(q) > 0):
            raise ValueError("Volt-Var curve must be non-increasing")

    def fraction(self, v) -> np.ndarray:
        v_bp = [b[0] for b in self.breakpoints]
        q_bp = [b[1] for b in self.breakpoints]
        return np.interp(v, v_bp, q_bp)


def volt_var_q(curve: VoltVarCurve, v_pcc: float, q_max: float) -> float:
    """Reactive output (same unit as ``q_max``) at PCC voltage ``v_pcc``."""
    if q_max < 0:
        raise ValueError("q_max must be non-negative")
    q = float(curve.fraction(v_pcc)) * q_max
    return min(max(q, -q_max), q_max)


@dataclass
class AvrOltcSettings:
    v_ref: float = 1.03
    bandwidth: float = 0.0167
    time_delay: float = 0.0
    monitored_nodes: dict[str, tuple[int, ...]] | None = None  # per OLTC; default its secondary nodes

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if self.time_delay < 0:
            raise ValueError("time_delay must be non-negative")

    def monitored(self, model: FeederModel, oltc_id: str) -> tuple[int, ...]:
        if self.monitored_nodes and oltc_id in self.monitored_nodes:
            return tuple(self.monitored_nodes[oltc_id])
        return tuple(model.oltc(oltc_id).secondary_nodes)


@dataclass
class AvrState:
    taps: dict[str, int]
    q_kvar: dict[str, float] = field(default_factory=dict)
    V: np.ndarray | None = None
    waited: dict[str, float] = field(default_factory=dict)
    tap_ops: int = 0

    @classmethod
    def initial(cls, model: FeederModel) -> "AvrState":
        return cls({dev.id: dev.tau_init for dev in model.oltcs}, {pv.id: 0.0 for pv in model.pv_units})


@dataclass
class AvrStepResult:
    taps: dict[str, int]
    q_kvar: dict[str, float]
    op: OperatingPoint
    moves: int
    q_iterations: int
    q_converged: bool
    frozen: bool


def settle_volt_var(
    model: FeederModel,
    curve: VoltVarCurve,
    taps: Mapping[str, int],
    load_mult: Mapping[str, float],
    pv_kw: Mapping[str, float],
    q_start: Mapping[str, float],
    v_init: np.ndarray | None = None,
) -> tuple[OperatingPoint, dict[str, float], int, bool]:
    """Iterate power flow and Volt-Var responses to a fixed point.

    Updates are damped, and the damping is halved whenever the largest
    set-point correction fails to shrink by 10 %. Convergence is declared when
    the undamped curve output differs from the applied set-point by at most
    0.1 kvar on every inverter.
    """
    ratios = tap_ratios(model, taps)
    q = {pv.id: q_start.get(pv.id, 0.0) for pv in model.pv_units}
    qmax = {pv.id: pv.q_max_kvar(pv_kw.get(pv.id, 0.0)) for pv in model.pv_units}
    for pv in model.pv_units:
        q[pv.id] = float(np.clip(q[pv.id], -qmax[pv.id], qmax[pv.id]))
    V = v_init
    op = None
    lam, last = Q_DAMPING, np.inf
    for it in range(1, MAX_Q_ITER + 1):
        op = solve_powerflow(model, ratios, build_injections(model, load_mult, pv_kw, q), v_init=V)
        V = op.V0
        vm = op.vmag
        target = {pv.id: volt_var_q(curve, vm[pv.node.index], qmax[pv.id]) for pv in model.pv_units}
        worst = max((abs(target[k] - q[k]) for k in q), default=0.0)
        if worst <= Q_TOL_KVAR:
            return op, q, it, True
        if worst > 0.9 * last:
            lam = max(Q_DAMPING_MIN, lam / 2)
        last = worst
        for k in q:
            q[k] += lam * (target[k] - q[k])
    log.warning("Volt-Var fixed point not reached in %d iterations", MAX_Q_ITER)
    op = solve_powerflow(model, ratios, build_injections(model, load_mult, pv_kw, q), v_init=V)
    return op, q, MAX_Q_ITER, False


def avr_step(
    model: FeederModel,
    settings: AvrOltcSettings,
    curve: VoltVarCurve,
    state: AvrState,
    load_mult: Mapping[str, float],
    pv_kw: Mapping[str, float],
    dt: float = 30.0,
) -> AvrStepResult:
    """One autonomous step: inverters settle, then each OLTC checks its band.

    A tap moves one position toward ``v_ref`` when the monitored phase-average
    voltage is outside ``v_ref +- bandwidth/2`` and the delay has elapsed;
    inverters re-settle after every move. Up to the ramp limit of moves are made.
    Revisiting a tap position within the step freezes the OLTC.
    """
    taps = dict(state.taps)
    op, q, iters, conv = settle_volt_var(model, curve, taps, load_mult, pv_kw, state.q_kvar, state.V)
    moves = 0
    frozen = False
    for dev in model.oltcs:
        limit = ramp_limit(dev, dt)
        seen = {taps[dev.id]}
        mon = list(settings.monitored(model, dev.id))
        for _ in range(limit):
            v_mon = float(np.mean(op.vmag[mon]))
            err = v_mon - settings.v_ref
            if abs(err) <= settings.bandwidth / 2:
                state.waited[dev.id] = 0.0
                break
            state.waited[dev.id] = state.waited.get(dev.id, 0.0) + (dt if moves == 0 else 0.0)
            if state.waited[dev.id] < settings.time_delay:
                break
            nxt = taps[dev.id] + (-1 if err > 0 else 1)
            if not dev.tau_min <= nxt <= dev.tau_max:
                break
            if nxt in seen:
                log.warning("OLTC %s oscillating around tap %d; frozen for this step", dev.id, taps[dev.id])
                frozen = True
                break
            seen.add(nxt)
            taps[dev.id] = nxt
            moves += 1
            op, q, it2, conv = settle_volt_var(model, curve, taps, load_mult, pv_kw, q, op.V0)
            iters += it2
    state.taps = taps
    state.q_kvar = q
    state.V = op.V0
    state.tap_ops += moves
    return AvrStepResult(dict(taps), dict(q), op, moves, iters, conv, frozen)


def clip_to_capability(model: FeederModel, q_kvar: Mapping[str, float], pv_kw: Mapping[str, float]) -> tuple[dict[str, float], list[str]]:
    """Clip reactive set-points to each inverter's remaining capability."""
    out, events = {}, []
    for pv in model.pv_units:
        v = float(q_kvar.get(pv.id, 0.0))
        cap = pv.q_max_kvar(pv_kw.get(pv.id, 0.0))
        if abs(v) > cap:
            events.append(f"{pv.id}: {v:.4g} kvar clipped to {cap:.4g}")
            v = float(np.clip(v, -cap, cap))
        out[pv.id] = v
    return out, events


def ovr_step(
    model: FeederModel,
    taps: Mapping[str, int],
    q_kvar: Mapping[str, float],
    load_mult: Mapping[str, float],
    pv_kw: Mapping[str, float],
    v_init: np.ndarray | None = None,
) -> OperatingPoint:
    """Realized operating point under commanded taps and reactive set-points.

    Set-points beyond what the inverter can deliver at its actual real output
    are clipped (and logged) before the flow is solved.
    """
    q, events = clip_to_capability(model, q_kvar, pv_kw)
    for e in events:
        log.warning("OVR set-point clipped: %s", e)
    return solve_powerflow(model, tap_ratios(model, taps), build_injections(model, load_mult, pv_kw, q), v_init=v_init)
