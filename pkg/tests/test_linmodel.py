import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voltreg.linmodel import (
    DegenerateVoltageError,
    InjectionLinearization,
    build_sensitivity,
    delta_pq,
    fixed_power_response,
    linear_vmag,
    linearization_error_report,
    power_errors,
    predict_voltage,
    tap_admittance_derivative,
    write_error_report,
)
from voltreg.netmodel import feeder_from_dict
from voltreg.optimizer import pv_node_indices
from voltreg.powerflow import (
    InjectionSpec,
    assemble_ybus,
    build_injections,
    solve_powerflow,
    tap_ratios,
)

from conftest import random_feeder_dict, step_inputs, two_bus_dict


@pytest.fixture(scope="module")
def noon(ieee37, ieee37_profiles):
    lm, pv = step_inputs(ieee37, ieee37_profiles, int(11.5 * 120))
    inj = build_injections(ieee37, lm, pv)
    op = solve_powerflow(ieee37, tap_ratios(ieee37, {"subxf": 2}), inj)
    return inj, op, build_sensitivity(ieee37, op)


@given(a=st.floats(0.9, 1.1), a0=st.floats(0.9, 1.1))
@settings(max_examples=60, deadline=None)
def test_tap_factorization_exact(a, a0):
    m = feeder_from_dict(random_feeder_dict(21, n_buses=3, n_pv=0))
    dev = m.oltcs[0]
    dY = (assemble_ybus(m, {dev.id: a}).Y - assemble_ybus(m, {dev.id: a0}).Y).toarray()
    G = tap_admittance_derivative(m, dev, a0).toarray()
    R = dY - (a - a0) * G
    expected = np.zeros_like(R)
    for i in dev.primary_nodes:
        expected[i, i] = (a - a0) ** 2 / dev.z_t
    assert np.allclose(R, expected, rtol=0, atol=1e-9 * max(1.0, abs(1 / dev.z_t)))


def test_tap_sensitivity_matches_constant_current_derivative(ieee37, noon):
    """w_p equals dV/da of the exact solution of Y(a) V = I with I held fixed."""
    _, op, sm = noon
    dev = ieee37.oltcs[0]
    a0 = op.taps[dev.id]
    ns, sl = ieee37.nonslack_nodes, ieee37.slack_nodes
    h = 1e-6

    def v_at(a):
        Y = assemble_ybus(ieee37, {dev.id: a}).Y.toarray()
        Ynn, Yns = Y[np.ix_(ns, ns)], Y[np.ix_(ns, sl)]
        return np.linalg.solve(Ynn, op.I0[ns] - Yns @ op.V0[sl])

    fd = (v_at(a0 + h) - v_at(a0 - h)) / (2 * h)
    w = sm.tap_sens[0].w
    assert np.max(np.abs(w[ns] - fd)) < 1e-6 * max(1.0, np.max(np.abs(fd)))
    assert np.all(w[sl] == 0)


def test_no_oltc_gives_only_impedance_term(two_bus):
    op = solve_powerflow(two_bus, {}, build_injections(two_bus, {"load": 1.0}, {}))
    sm = build_sensitivity(two_bus, op)
    assert sm.tap_sens == []
    dI = np.array([0, 0.01 + 0.02j])
    dV, _ = predict_voltage(sm, None, dI)
    assert dV[1] == pytest.approx(sm.z0_dense()[0, 0] * dI[1])


def test_unperturbed_point_is_exact(noon):
    _, op, sm = noon
    dV, vm = predict_voltage(sm, dict(op.taps), np.zeros_like(op.V0))
    assert np.all(dV == 0)
    assert np.array_equal(vm, sm.vmag0)


def test_axis_aligned_magnitude():
    m = feeder_from_dict(two_bus_dict(p_kw=0.0, q_kvar=0.0))
    op = solve_powerflow(m, {}, build_injections(m, {"load": 1.0}, {}))
    sm = build_sensitivity(m, op)
    assert op.V0[1] == pytest.approx(1.0)
    vm = linear_vmag(sm, np.array([0, 0.01 + 0j]))
    assert vm[1] == pytest.approx(1.01, abs=1e-12)


def test_vmag_coeff_unit_norm(noon):
    _, _, sm = noon
    assert np.allclose(np.hypot(sm.vmag_coeff[:, 0], sm.vmag_coeff[:, 1]), 1.0, atol=1e-14)


def test_magnitude_linearization_quadratic_decay(noon):
    _, op, sm = noon
    rng = np.random.default_rng(3)
    direction = np.exp(1j * rng.uniform(0, 2 * np.pi, op.V0.size))
    errs = []
    for eps in (1e-2, 1e-3, 1e-4):
        dV = eps * direction
        err = np.max(np.abs(linear_vmag(sm, dV) - np.abs(op.V0 + dV)))
        errs.append(err)
        # radial direction: predicted |V| - (|V0| + eps) vanishes
        radial = eps * op.V0 / np.abs(op.V0)
        assert np.max(np.abs(linear_vmag(sm, radial) - (np.abs(op.V0) + eps))) < 1e-12
    assert errs[0] / errs[1] > 50 and errs[1] / errs[2] > 50


def test_tap_step_prediction_noon(ieee37, noon):
    inj, op, sm = noon
    dev = ieee37.oltcs[0]
    ns = ieee37.nonslack_nodes
    fr = fixed_power_response(sm, pv_node_indices(ieee37))
    for step in (1, -1):
        ratio = dev.ratio(2 + step)
        exact = solve_powerflow(ieee37, {dev.id: ratio}, inj, v_init=op.V0).vmag[ns]
        pred = fr.vmag(np.array([ratio - op.taps[dev.id]]), np.zeros(len(fr.q_nodes)))
        assert np.max(np.abs(pred - exact)) <= 0.01
        _, vm = predict_voltage(sm, {dev.id: ratio}, None)
        assert np.max(np.abs(vm[ns] - exact)) <= 0.01


def test_q_perturbation_prediction(ieee37, noon):
    inj, op, sm = noon
    q_nodes = pv_node_indices(ieee37)
    fr = fixed_power_response(sm, q_nodes)
    ns = ieee37.nonslack_nodes
    for k in (0, len(q_nodes) // 2, len(q_nodes) - 1):
        dq = np.zeros(len(q_nodes))
        dq[k] = 0.05  # 50 kvar on a 1 MVA base
        S = inj.S.copy()
        S[q_nodes[k]] += 0.05j
        exact = solve_powerflow(ieee37, op.taps, InjectionSpec(S), v_init=op.V0).vmag[ns]
        assert np.max(np.abs(fr.vmag(np.zeros(1), dq) - exact)) <= 0.005


def test_fixed_power_response_satisfies_linear_constraints(ieee37, noon):
    _, op, sm = noon
    q_nodes = pv_node_indices(ieee37)
    fr = fixed_power_response(sm, q_nodes)
    ns = ieee37.nonslack_nodes
    rng = np.random.default_rng(0)
    da = rng.normal(0, 0.01, 1)
    dq = rng.normal(0, 0.02, len(q_nodes))
    dv_n, di_n = fr.dv(da, dq), fr.di(da, dq)
    dV = np.zeros(ieee37.n_nodes, complex)
    dI = np.zeros(ieee37.n_nodes, complex)
    dV[ns], dI[ns] = dv_n, di_n
    dP, dQ = delta_pq(sm.lin, dV, dI)
    target_q = np.zeros(ieee37.n_nodes)
    target_q[q_nodes] = dq
    assert np.max(np.abs(dP[ns])) < 1e-10
    assert np.max(np.abs(dQ[ns] - target_q[ns])) < 1e-10
    ratio = {ieee37.oltcs[0].id: op.taps["subxf"] + da[0]}
    dV2, _ = predict_voltage(sm, ratio, dI)
    assert np.max(np.abs(dV2[ns] - dv_n)) < 1e-10


def test_superposition_two_oltcs():
    m = feeder_from_dict(random_feeder_dict(31, n_buses=6, n_oltc=2))
    assert len(m.oltcs) == 2
    inj = build_injections(m, {"load": 1.0}, {p.id: 50.0 for p in m.pv_units})
    op = solve_powerflow(m, tap_ratios(m, {d.id: 1 for d in m.oltcs}), inj)
    sm = build_sensitivity(m, op)
    rng = np.random.default_rng(1)
    dI = np.zeros(m.n_nodes, complex)
    dI[m.nonslack_nodes] = rng.normal(0, 0.01, len(m.nonslack_nodes)) * (1 + 1j)
    a = {d.id: op.taps[d.id] + 0.01 * (k + 1) for k, d in enumerate(m.oltcs)}
    both, _ = predict_voltage(sm, a, dI)
    first, _ = predict_voltage(sm, {m.oltcs[0].id: a[m.oltcs[0].id]}, None)
    second, _ = predict_voltage(sm, {m.oltcs[1].id: a[m.oltcs[1].id]}, None)
    shared = sm.z0_apply(dI)
    assert np.allclose(both, first + second + shared, atol=1e-14)


def test_delta_pq_examples():
    lin = InjectionLinearization(np.array([1.0]), np.array([0.0]), np.array([0.0]), np.array([0.0]))
    dP, dQ = delta_pq(lin, np.array([0j]), np.array([0j]))
    assert dP[0] == 0 and dQ[0] == 0
    dP, dQ = delta_pq(lin, np.array([0.3 - 0.7j]), np.array([0.1 + 0j]))
    assert dP[0] == pytest.approx(0.1) and dQ[0] == pytest.approx(0.0)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=50, deadline=None)
def test_power_residual_identity(seed):
    rng = np.random.default_rng(seed)
    n = 6
    V0 = rng.normal(1, 0.05, n) + 1j * rng.normal(0, 0.1, n)
    I0 = rng.normal(0, 0.3, n) + 1j * rng.normal(0, 0.3, n)
    dV = rng.normal(0, 0.02, n) + 1j * rng.normal(0, 0.02, n)
    dI = rng.normal(0, 0.05, n) + 1j * rng.normal(0, 0.05, n)
    lin = InjectionLinearization(V0.real, V0.imag, I0.real, I0.imag)
    dP, dQ = delta_pq(lin, dV, dI)
    Pe, Qe = power_errors(dV, dI)
    S0 = V0 * np.conj(I0)
    S = (V0 + dV) * np.conj(I0 + dI)
    assert np.allclose(S.real - S0.real - dP, Pe, atol=1e-15)
    assert np.allclose(S.imag - S0.imag - dQ, Qe, atol=1e-15)


def test_degenerate_voltage(two_bus):
    op = solve_powerflow(two_bus, {}, build_injections(two_bus, {"load": 1.0}, {}))
    op.V0[1] = 1e-9
    with pytest.raises(DegenerateVoltageError, match="b.A"):
        build_sensitivity(two_bus, op)


def test_error_report_trivial_cases(ieee37, noon, tmp_path):
    _, op, sm = noon
    assert linearization_error_report(ieee37, op, [], sm) == []
    cases = linearization_error_report(ieee37, op, [(None, None)], sm)
    assert cases[0].max_abs < 1e-8
    dev = ieee37.oltcs[0]
    dI = np.zeros(ieee37.n_nodes, complex)
    q_nodes = pv_node_indices(ieee37)
    dI[q_nodes] = -0.01j
    cases += linearization_error_report(ieee37, op, [({dev.id: dev.ratio(3)}, dI)], sm)
    assert cases[1].max_abs < 0.01
    summary = write_error_report(ieee37, cases, tmp_path / "e.csv", tmp_path / "e.json")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == "case_id,node,E"
    assert len(lines) == 1 + 2 * len(ieee37.nonslack_nodes)
    assert json.loads((tmp_path / "e.json").read_text()) == summary
    assert summary["cases"] == 2
