"""
Quasi-steady-state time-series driver, forecasts, metrics and result files.
"""

from __future__ import annotations

import csv
import json
import logging
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ..controllers import AvrState, avr_step, clip_to_capability, ovr_step
from ..linmodel import build_sensitivity
from ..netmodel import FeederModel, TimeSeriesProfile
from ..optimizer import (
    DispatchProblem,
    DispatchStep,
    LpError,
    extract_setpoints,
    pv_node_indices,
    pv_q_max,
    solve_milp,
)
from ..powerflow import PowerFlowError, assemble_ybus, build_injections, solve_powerflow, tap_ratios
from .scenario import Scenario

log = logging.getLogger(__name__)

V_HI = 1.05
V_LO = 0.95
NOON_WINDOW = (10.0, 14.0)


def make_forecast(profile: TimeSeriesProfile, alpha: float, seed: int) -> TimeSeriesProfile:
    """``y = (1 + alpha * eps) * y_true`` with ``eps ~ U[-1, 1]`` per step.

    The generator is seeded from ``seed`` and the profile id, so each profile
    gets its own reproducible error sequence. Negative values are clipped to 0.
    """
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if alpha == 0:
        return TimeSeriesProfile(profile.id, profile.timestamps.copy(), profile.values.copy())
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(profile.id.encode())]))
    eps = rng.uniform(-1.0, 1.0, len(profile))
    y = (1.0 + alpha * eps) * profile.values
    neg = y < 0
    if neg.any():
        log.info("forecast %s: %d negative values clipped to 0", profile.id, int(neg.sum()))
        y = np.where(neg, 0.0, y)
    return TimeSeriesProfile(profile.id, profile.timestamps.copy(), y)


@dataclass
class SimulationResult:
    method: str
    dt: float
    timestamps: np.ndarray  # (S,) seconds
    node_labels: list[str]  # non-slack nodes
    node_buses: list[str]
    vmag: np.ndarray  # (S, N) realized, NaN where a step failed
    taps: np.ndarray  # (S, P)
    tap_init: np.ndarray  # (P,)
    oltc_ids: list[str]
    si_q: np.ndarray  # (S, U) kvar
    pv_ids: list[str]
    mismatch: np.ndarray  # (S,)
    predicted: np.ndarray | None = None  # (S, N), OVR only
    degraded: list[tuple[int, str]] = field(default_factory=list)
    solver: list[dict] = field(default_factory=list)
    alpha: float = 0.0
    seed: int = 0

    @property
    def n_steps(self) -> int:
        return len(self.timestamps)

    @property
    def is_degraded(self) -> bool:
        return bool(self.degraded)


def count_tap_operations(trajectory: Sequence[int]) -> int:
    """Total absolute tap movement along a trajectory."""
    tr = np.asarray(trajectory, dtype=int)
    return int(np.abs(np.diff(tr)).sum()) if tr.size > 1 else 0


def unbalance(vmag: np.ndarray, node_buses: Sequence[str]) -> np.ndarray:
    """Per bus-step max-minus-min phase magnitude, shape (S, buses with 2+ phases)."""
    groups: dict[str, list[int]] = {}
    for i, b in enumerate(node_buses):
        groups.setdefault(b, []).append(i)
    cols = [idx for idx in groups.values() if len(idx) > 1]
    if not cols:
        return np.zeros((vmag.shape[0], 0))
    return np.column_stack([np.max(vmag[:, idx], axis=1) - np.min(vmag[:, idx], axis=1) for idx in cols])


def metrics(res: SimulationResult) -> dict:
    if res.n_steps == 0:
        raise ValueError("empty result")
    ok = ~np.isnan(res.vmag).any(axis=1)
    v = res.vmag[ok]
    dev = np.abs(v - 1.0)
    ub = unbalance(v, res.node_buses)
    hours = (res.timestamps[ok] / 3600.0) % 24
    noon = (hours >= NOON_WINDOW[0]) & (hours < NOON_WINDOW[1])
    minutes = res.dt / 60.0
    over = (v > V_HI).sum(axis=1)
    under = (v < V_LO).sum(axis=1)
    per_oltc = {
        oid: count_tap_operations(np.concatenate([[res.tap_init[p]], res.taps[:, p]]))
        for p, oid in enumerate(res.oltc_ids)
    }
    out = {
        "method": res.method,
        "steps": int(res.n_steps),
        "forecast_alpha": float(res.alpha),
        "mean_abs_deviation": float(dev.mean()) if dev.size else float("nan"),
        "max_abs_deviation": float(dev.max()) if dev.size else float("nan"),
        "mean_unbalance": float(ub.mean()) if ub.size else 0.0,
        "max_unbalance": float(ub.max()) if ub.size else 0.0,
        "tap_operations": int(sum(per_oltc.values())),
        "tap_operations_per_oltc": per_oltc,
        "overvoltage_node_minutes": float(over.sum() * minutes),
        "undervoltage_node_minutes": float(under.sum() * minutes),
        "overvoltage_node_minutes_noon": float(over[noon].sum() * minutes),
        "max_mismatch": float(np.nanmax(res.mismatch)) if np.isfinite(res.mismatch).any() else float("nan"),
        "degraded_steps": len(res.degraded),
    }
    if res.predicted is not None:
        E = res.predicted[ok] - v
        fin = np.isfinite(E)
        out["max_abs_prediction_error"] = float(np.abs(E[fin]).max()) if fin.any() else float("nan")
        out["mean_abs_prediction_error"] = float(np.abs(E[fin]).mean()) if fin.any() else float("nan")
    return out


def _step_inputs(model: FeederModel, profiles: Mapping[str, TimeSeriesProfile], k: int):
    load_mult = {pid: float(profiles[pid].values[k]) for pid in {ld.profile_id for ld in model.loads}}
    pv_kw = {pv.id: float(profiles[pv.profile_id].values[k]) for pv in model.pv_units}
    return load_mult, pv_kw


def run_scenario(sc: Scenario, *, model: FeederModel | None = None) -> SimulationResult:
    """Simulate the scenario on the true profiles.

    Failures at a step are recorded; the run continues with the last good
    controls and the result is marked degraded.
    """
    model = model or sc.load_model()
    true = sc.load_profiles(model)
    lens = {len(p) for p in true.values()}
    if len(lens) != 1:
        raise ValueError("profiles differ in length")
    for p in true.values():
        if len(p) > 1 and abs(p.dt - sc.dt) > 1e-9:
            raise ValueError(f"profile {p.id} has step {p.dt} s, scenario expects {sc.dt} s")
    total = lens.pop()
    k0 = sc.start_step
    k1 = total if sc.n_steps is None else min(total, k0 + int(sc.n_steps))
    if not 0 <= k0 < k1:
        raise ValueError(f"empty step window [{k0}, {k1})")
    steps = np.arange(k0, k1)
    stamps = next(iter(true.values())).timestamps[steps]

    ns = model.nonslack_nodes
    S, N, P, U = len(steps), len(ns), len(model.oltcs), len(model.pv_units)
    res = SimulationResult(
        method=sc.method, dt=sc.dt, timestamps=np.asarray(stamps, dtype=float),
        node_labels=[model.nodes[i].label for i in ns], node_buses=[model.nodes[i].bus_id for i in ns],
        vmag=np.full((S, N), np.nan), taps=np.zeros((S, P), dtype=int),
        tap_init=np.array([dev.tau_init for dev in model.oltcs], dtype=int), oltc_ids=[d.id for d in model.oltcs],
        si_q=np.zeros((S, U)), pv_ids=[pv.id for pv in model.pv_units], mismatch=np.full(S, np.nan),
        predicted=np.full((S, N), np.nan) if sc.method == "ovr" else None,
        alpha=sc.forecast_alpha, seed=sc.rng_seed,
    )
    if sc.method == "avr":
        _run_avr(sc, model, true, steps, res)
    else:
        forecast = {pid: make_forecast(p, sc.forecast_alpha, sc.rng_seed) for pid, p in true.items()}
        _run_ovr(sc, model, true, forecast, steps, res)
    return res


def _record(res: SimulationResult, j: int, model: FeederModel, op, taps, q):
    res.vmag[j] = op.vmag[model.nonslack_nodes]
    res.mismatch[j] = op.mismatch
    res.taps[j] = [taps[d.id] for d in model.oltcs]
    res.si_q[j] = [q.get(pv.id, 0.0) for pv in model.pv_units]


def _run_avr(sc, model, true, steps, res):
    state = AvrState.initial(model)
    for j, k in enumerate(steps):
        load_mult, pv_kw = _step_inputs(model, true, k)
        try:
            out = avr_step(model, sc.avr, sc.volt_var, state, load_mult, pv_kw, sc.dt)
            _record(res, j, model, out.op, out.taps, out.q_kvar)
        except PowerFlowError as exc:
            res.degraded.append((int(k), str(exc)))
            log.error("step %d: %s", k, exc)
            _hold(res, j, model, state.taps, state.q_kvar, load_mult, pv_kw, state.V)


def _hold(res, j, model, taps, q, load_mult, pv_kw, v_init):
    q, _ = clip_to_capability(model, q, pv_kw)
    res.taps[j] = [taps[d.id] for d in model.oltcs]
    res.si_q[j] = [q.get(pv.id, 0.0) for pv in model.pv_units]
    try:
        op = ovr_step(model, taps, q, load_mult, pv_kw, v_init)
        res.vmag[j] = op.vmag[model.nonslack_nodes]
        res.mismatch[j] = op.mismatch
        return op
    except PowerFlowError as exc:
        log.error("step %d: held controls also failed: %s", j, exc)
        return None


def plan_horizon(sc: Scenario, model: FeederModel, forecast, ks: Sequence[int], tau_prev: dict[str, int],
                 v_init: np.ndarray | None, q_prev: Mapping[str, float] | None = None):
    """Linearize each horizon step on forecasts at the entry taps and SI outputs, then dispatch.

    ``q_prev`` (kvar per PV unit) is the reactive output in service when the
    horizon starts; it is clipped to each step's forecast capability and kept
    in the linearization point so only the change in Q is extrapolated.
    """
    ratios = tap_ratios(model, tau_prev)
    adm = assemble_ybus(model, ratios)
    pv_nodes = pv_node_indices(model)
    pos = {int(g): k for k, g in enumerate(pv_nodes)}
    dsteps, pv_fc = [], []
    V = v_init
    for k in ks:
        load_mult, pv_kw = _step_inputs(model, forecast, k)
        q_in, _ = clip_to_capability(model, q_prev or {}, pv_kw)
        q0 = np.zeros(len(pv_nodes))
        for pv in model.pv_units:
            q0[pos[pv.node.index]] += q_in.get(pv.id, 0.0) / model.s_base_kva
        op = solve_powerflow(model, ratios, build_injections(model, load_mult, pv_kw, q_in), v_init=V, adm=adm)
        V = op.V0
        dsteps.append(DispatchStep(build_sensitivity(model, op, adm), pv_q_max(model, pv_kw, pv_nodes), q0))
        pv_fc.append(pv_kw)
    prob = DispatchProblem(model, dsteps, dict(tau_prev), w1=sc.weights[0], w2=sc.weights[1], dt=sc.dt,
                           pv_nodes=pv_nodes)
    sol = solve_milp(prob, time_budget=sc.time_budget)
    return prob, sol, extract_setpoints(sol, prob, pv_fc)


def _run_ovr(sc, model, true, forecast, steps, res):
    tau_prev = {d.id: d.tau_init for d in model.oltcs}
    q_last = {pv.id: 0.0 for pv in model.pv_units}
    V = None
    j = 0
    while j < len(steps):
        H = min(sc.horizon_steps, len(steps) - j)
        ks = steps[j : j + H]
        t0 = time.perf_counter()
        try:
            prob, sol, cmds = plan_horizon(sc, model, forecast, ks, tau_prev, V, q_last)
            res.solver.append({"step": int(ks[0]), "status": sol.status, "gap": sol.gap, "nodes": sol.nodes,
                               "objective": sol.objective, "J1": sol.J1, "J2": sol.J2,
                               "seconds": time.perf_counter() - t0})
            pred = sol.vmag
        except (PowerFlowError, LpError, np.linalg.LinAlgError) as exc:
            log.error("horizon at step %d: %s", ks[0], exc)
            res.degraded.append((int(ks[0]), f"planning failed: {exc}"))
            cmds, pred = None, None
        n_apply = min(sc.replan_steps, H)
        for h in range(n_apply):
            k = ks[h]
            load_mult, pv_kw = _step_inputs(model, true, k)
            taps = cmds[h].taps if cmds else dict(tau_prev)
            q = cmds[h].q_kvar if cmds else q_last
            q, _ = clip_to_capability(model, q, pv_kw)
            try:
                op = ovr_step(model, taps, q, load_mult, pv_kw, V)
                _record(res, j + h, model, op, taps, q)
                V = op.V0
                if pred is not None:
                    res.predicted[j + h] = pred[h]
                tau_prev, q_last = dict(taps), q
            except PowerFlowError as exc:
                res.degraded.append((int(k), str(exc)))
                log.error("step %d: %s", k, exc)
                op = _hold(res, j + h, model, tau_prev, q_last, load_mult, pv_kw, V)
                if op is not None:
                    V = op.V0
        j += n_apply


def sweep_alpha(sc: Scenario, alphas: Sequence[float], workers: int = 1) -> list[dict]:
    """One run per forecast-error level with a shared seed."""
    if any(a < 0 for a in alphas):
        raise ValueError("alpha values must be non-negative")
    runs = [sc.with_(forecast_alpha=float(a)) for a in alphas]
    if workers > 1 and len(runs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(run_scenario, runs))
    else:
        results = [run_scenario(r) for r in runs]
    rows = []
    for a, r in zip(alphas, results):
        m = metrics(r)
        rows.append({"alpha": float(a), "max_deviation": m["max_abs_deviation"], "mean_deviation": m["mean_abs_deviation"],
                     "overvoltage_node_minutes": m["overvoltage_node_minutes"], "tap_operations": m["tap_operations"],
                     "max_mismatch": m["max_mismatch"], "degraded_steps": m["degraded_steps"]})
    return rows


def write_sweep(rows: list[dict], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def _write_long(path: Path, labels: list[str], arr: np.ndarray):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "node", "vmag"])
        for s in range(arr.shape[0]):
            for i, lab in enumerate(labels):
                w.writerow([s, lab, repr(float(arr[s, i]))])


def save_result(res: SimulationResult, out_dir: str | Path) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_long(out / "voltages.csv", res.node_labels, res.vmag)
    if res.predicted is not None:
        _write_long(out / "predicted.csv", res.node_labels, res.predicted)
    with (out / "taps.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "time_s"] + res.oltc_ids)
        for s in range(res.n_steps):
            w.writerow([s, repr(float(res.timestamps[s]))] + [int(v) for v in res.taps[s]])
    with (out / "si_q.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step"] + res.pv_ids)
        for s in range(res.n_steps):
            w.writerow([s] + [repr(float(v)) for v in res.si_q[s]])
    m = metrics(res)
    (out / "metrics.json").write_text(json.dumps(m, indent=1, sort_keys=True) + "\n")
    meta = {
        "method": res.method, "dt": res.dt, "alpha": res.alpha, "seed": res.seed,
        "node_buses": res.node_buses, "tap_init": [int(v) for v in res.tap_init],
        "mismatch": [repr(float(v)) for v in res.mismatch], "degraded": res.degraded,
        "solver": res.solver,
    }
    (out / "run.json").write_text(json.dumps(meta, indent=1) + "\n")
    (out / "summary.txt").write_text(summary_text(m, res))
    return m


def summary_text(m: dict, res: SimulationResult | None = None) -> str:
    lines = [
        f"method                       {m['method']}",
        f"steps                        {m['steps']}",
        f"forecast alpha               {m['forecast_alpha']}",
        f"mean |V-1| (p.u.)            {m['mean_abs_deviation']:.5f}",
        f"max |V-1| (p.u.)             {m['max_abs_deviation']:.5f}",
        f"mean unbalance, max-min (p.u.) {m['mean_unbalance']:.5f}",
        f"max unbalance, max-min (p.u.)  {m['max_unbalance']:.5f}",
        f"tap operations               {m['tap_operations']}",
        f"over-voltage node-minutes    {m['overvoltage_node_minutes']:.1f}",
        f"  of which 10:00-14:00       {m['overvoltage_node_minutes_noon']:.1f}",
        f"under-voltage node-minutes   {m['undervoltage_node_minutes']:.1f}",
        f"degraded steps               {m['degraded_steps']}",
    ]
    if "max_abs_prediction_error" in m:
        lines.append(f"max |predicted-realized|     {m['max_abs_prediction_error']:.5f}")
        lines.append(f"mean |predicted-realized|    {m['mean_abs_prediction_error']:.5f}")
    return "\n".join(lines) + "\n"


def _read_long(path: Path, S: int, labels: list[str]) -> np.ndarray:
    pos = {lab: i for i, lab in enumerate(labels)}
    arr = np.full((S, len(labels)), np.nan)
    with path.open(newline="") as fh:
        for row in csv.DictReader(fh):
            arr[int(row["step"]), pos[row["node"]]] = float(row["vmag"])
    return arr


def load_result(out_dir: str | Path) -> SimulationResult:
    out = Path(out_dir)
    meta = json.loads((out / "run.json").read_text())
    with (out / "taps.csv").open(newline="") as fh:
        rows = list(csv.reader(fh))
    oltc_ids = rows[0][2:]
    stamps = np.array([float(r[1]) for r in rows[1:]])
    taps = np.array([[int(v) for v in r[2:]] for r in rows[1:]], dtype=int).reshape(len(stamps), len(oltc_ids))
    with (out / "si_q.csv").open(newline="") as fh:
        rows = list(csv.reader(fh))
    pv_ids = rows[0][1:]
    si_q = np.array([[float(v) for v in r[1:]] for r in rows[1:]]).reshape(len(stamps), len(pv_ids))
    labels = []
    with (out / "voltages.csv").open(newline="") as fh:
        rd = csv.DictReader(fh)
        for row in rd:
            if row["step"] != "0":
                break
            labels.append(row["node"])
    S = len(stamps)
    vmag = _read_long(out / "voltages.csv", S, labels)
    pred = _read_long(out / "predicted.csv", S, labels) if (out / "predicted.csv").exists() else None
    return SimulationResult(
        method=meta["method"], dt=float(meta["dt"]), timestamps=stamps, node_labels=labels,
        node_buses=meta["node_buses"], vmag=vmag, taps=taps, tap_init=np.array(meta["tap_init"], dtype=int),
        oltc_ids=oltc_ids, si_q=si_q, pv_ids=pv_ids, mismatch=np.array([float(v) for v in meta["mismatch"]]),
        predicted=pred, degraded=[tuple(d) for d in meta["degraded"]], solver=meta["solver"],
        alpha=float(meta["alpha"]), seed=int(meta["seed"]),
    )
