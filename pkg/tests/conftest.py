from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

import voltreg
from voltreg.netmodel import feeder_from_dict, load_feeder, load_profiles

DATA = Path(voltreg.__file__).parent / "data"
V_LN = 4.8 / np.sqrt(3)


def zbase(v_kv=V_LN, s_kva=1000.0):
    return v_kv**2 * 1000.0 / s_kva


def two_bus_dict(z_pu=complex(0.01, 0.02), p_kw=100.0, q_kvar=50.0):
    """Single-phase source-line-load feeder with a 1 MVA base."""
    z = z_pu * zbase()
    return {
        "name": "two-bus",
        "bases": {"s_base_kva": 1000.0, "v_base_kv": {"s": V_LN, "b": V_LN}},
        "source": {"bus": "s", "voltage": [[1.0, 0.0]]},
        "buses": [{"id": "s", "phases": ["A"]}, {"id": "b", "phases": ["A"]}],
        "branches": [{"id": "l1", "from": "s", "to": "b", "phases": ["A"], "length_km": 1.0,
                      "series_impedance": [[[z.real, z.imag]]]}],
        "transformers": [],
        "loads": [{"id": "ld", "bus": "b", "phase": "A", "p_kw": p_kw, "q_kvar": q_kvar, "profile": "load"}],
        "pv": [],
    }


def _zmat(rng, n, scale):
    r = scale * rng.uniform(0.2, 0.4)
    x = scale * rng.uniform(0.4, 0.8)
    Z = np.full((n, n), complex(0.3 * r, 0.4 * x))
    np.fill_diagonal(Z, complex(r, x))
    return [[[Z[i, j].real, Z[i, j].imag] for j in range(n)] for i in range(n)]


def random_feeder_dict(seed: int, n_buses: int = 5, n_oltc: int = 1, n_pv: int = 2, phases="ABC",
                       tau_range: int = 16, a_max: float = 1.1, ramp: int = 1, tau_init: int = 0,
                       load_kw=(20.0, 80.0)):
    """Small random radial feeder.

    The first OLTC sits between the source and ``b0``; a second one, if asked
    for, regulates a mid-feeder bus pair.
    """
    rng = np.random.default_rng(seed)
    phs = list(phases)
    buses = ["src", "b0"] + [f"b{k}" for k in range(1, n_buses)]
    oltc = {"tau_min": -tau_range, "tau_max": tau_range, "a_max": a_max, "ganged": True,
            "delta_to_max": ramp, "tau_init": tau_init}
    transformers = [{"id": "t0", "primary_bus": "src", "secondary_bus": "b0", "phases": phs,
                     "z_pu": [0.005, 0.03], "oltc": dict(oltc) if n_oltc > 0 else None}]
    branches = []
    reg_bus = None
    if n_oltc > 1:
        reg_bus = 1 + int(rng.integers(0, max(1, n_buses - 2)))
    for k in range(1, n_buses):
        parent = int(rng.integers(0, k))
        if k == reg_bus:
            transformers.append({"id": f"t{k}", "primary_bus": f"b{parent}", "secondary_bus": f"b{k}",
                                 "phases": phs, "z_pu": [0.004, 0.02], "oltc": dict(oltc)})
            continue
        branches.append({"id": f"l{k}", "from": f"b{parent}", "to": f"b{k}", "phases": phs,
                         "length_km": 0.5, "series_impedance": _zmat(rng, len(phs), zbase() * 0.02)})
    loads, pv = [], []
    for k in range(1, n_buses):
        for ph in phs:
            p = float(rng.uniform(*load_kw))
            loads.append({"id": f"ld{k}{ph}", "bus": f"b{k}", "phase": ph, "p_kw": p,
                          "q_kvar": 0.4 * p, "profile": "load"})
    pv_buses = rng.choice(np.arange(1, n_buses), size=min(n_pv, n_buses - 1), replace=False)
    for u, k in enumerate(sorted(pv_buses.tolist())):
        dc = float(rng.uniform(30, 120))
        pv.append({"id": f"pv{u}", "bus": f"b{k}", "phase": phs[int(rng.integers(len(phs)))],
                   "dc_kw": dc, "s_kva": 1.1 * dc, "profile": f"pv{u}"})
    return {
        "name": f"rand{seed}",
        "bases": {"s_base_kva": 1000.0, "default_v_base_kv": V_LN, "v_base_kv": {}},
        "source": {"bus": "src", "voltage": [[1.0, 0.0], [1.0, -120.0], [1.0, 120.0]][: len(phs)]},
        "buses": [{"id": b, "phases": phs} for b in buses],
        "branches": branches,
        "transformers": transformers,
        "loads": loads,
        "pv": pv,
    }


@pytest.fixture(scope="session")
def ieee37():
    return load_feeder(DATA / "ieee37.json")


@pytest.fixture(scope="session")
def ieee37_profiles(ieee37):
    ids = {ld.profile_id for ld in ieee37.loads} | {pv.profile_id for pv in ieee37.pv_units}
    return load_profiles(DATA / "profiles", ids)


@pytest.fixture
def two_bus():
    return feeder_from_dict(two_bus_dict())


def dispatch_problem(model, n_steps=1, seed=0, tau_prev=None, w=(1.0, 0.15), pv_frac=0.7, load=1.0, **kw):
    """Dispatch problem on a small feeder with random per-step load/PV levels."""
    from voltreg.linmodel import build_sensitivity
    from voltreg.optimizer import DispatchProblem, DispatchStep, pv_q_max
    from voltreg.powerflow import build_injections, solve_powerflow, tap_ratios

    rng = np.random.default_rng(seed)
    tau_prev = tau_prev if tau_prev is not None else {d.id: d.tau_init for d in model.oltcs}
    ratios = tap_ratios(model, tau_prev)
    steps = []
    for _ in range(n_steps):
        pv_kw = {p.id: p.dc_kw * pv_frac * rng.uniform(0.5, 1.0) for p in model.pv_units}
        inj = build_injections(model, {"load": load * rng.uniform(0.6, 1.2)}, pv_kw)
        op = solve_powerflow(model, ratios, inj)
        steps.append(DispatchStep(build_sensitivity(model, op), pv_q_max(model, pv_kw)))
    return DispatchProblem(model, steps, dict(tau_prev), w1=w[0], w2=w[1], **kw)


def step_inputs(model, profiles, k):
    load_mult = {"load": float(profiles["load"].values[k])}
    pv_kw = {pv.id: float(profiles[pv.profile_id].values[k]) for pv in model.pv_units}
    return load_mult, pv_kw


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
