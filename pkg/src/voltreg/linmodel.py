"""
Affine sensitivity model of node voltages around an operating point.

Voltage perturbations are linear in tap-ratio changes and in injection
current changes::

    dV = sum_p (a_p - a_p0) * w_p + Z0 @ dI

where ``w_p = -Y0^-1 G_p Y0^-1 I0`` and ``G_p`` is the admittance change per
unit tap-ratio change of OLTC ``p`` (self-term ``2 a0 / z_T`` on the primary,
``-1/z_T`` mutual). Everything is evaluated on the non-slack block of the
admittance matrix; slack voltages do not move.

Node voltage magnitudes are linearized as
``|V| = |V0| + (Vd0 dVd + Vq0 dVq) / |V0|``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .netmodel import FeederModel, OltcDevice
from .powerflow import (
    AdmittanceMatrix,
    InjectionSpec,
    OperatingPoint,
    assemble_ybus,
    solve_powerflow,
    voltage_magnitudes,
)

V_DEGENERATE = 1e-6


class DegenerateVoltageError(ValueError):
    pass


@dataclass(frozen=True)
class TapSensitivity:
    oltc_id: str
    a0: float
    w: np.ndarray  # complex, full node vector, zero on slack nodes


@dataclass(frozen=True)
class InjectionLinearization:
    Vd0: np.ndarray
    Vq0: np.ndarray
    Id0: np.ndarray
    Iq0: np.ndarray

    @classmethod
    def from_operating_point(cls, op: OperatingPoint) -> "InjectionLinearization":
        return cls(op.V0.real.copy(), op.V0.imag.copy(), op.I0.real.copy(), op.I0.imag.copy())


@dataclass
class SensitivityModel:
    model: FeederModel
    adm: AdmittanceMatrix
    op: OperatingPoint
    tap_sens: list[TapSensitivity]
    vmag0: np.ndarray
    vmag_coeff: np.ndarray  # (N, 2): (Vd0/|V0|, Vq0/|V0|)
    _z0: np.ndarray | None = field(default=None, repr=False)

    @property
    def V0(self) -> np.ndarray:
        return self.op.V0

    @property
    def I0(self) -> np.ndarray:
        return self.op.I0

    @property
    def nonslack(self) -> np.ndarray:
        return self.adm.nonslack

    @property
    def lin(self) -> InjectionLinearization:
        return InjectionLinearization.from_operating_point(self.op)

    def z0_apply(self, dI: np.ndarray) -> np.ndarray:
        """``Z0 @ dI`` on the full node vector (slack entries of dI ignored)."""
        out = np.zeros(self.model.n_nodes, dtype=complex)
        out[self.nonslack] = self.adm.solve_nn(np.asarray(dI, dtype=complex)[self.nonslack])
        return out

    def z0_dense(self) -> np.ndarray:
        """Dense non-slack impedance block ``Y_nn^-1`` (cached)."""
        if self._z0 is None:
            n = len(self.nonslack)
            self._z0 = self.adm.solve_nn(np.eye(n, dtype=complex))
        return self._z0

    def tap_matrix(self) -> np.ndarray:
        """Columns ``w_p`` stacked, shape (N, P)."""
        if not self.tap_sens:
            return np.zeros((self.model.n_nodes, 0), dtype=complex)
        return np.column_stack([ts.w for ts in self.tap_sens])


def tap_admittance_derivative(model: FeederModel, dev: OltcDevice, a0: float) -> sp.csc_matrix:
    """``G_p`` such that ``Y(a) - Y(a0) = (a - a0) G_p`` up to the dropped ``(a - a0)^2/z_T``."""
    rows, cols, vals = [], [], []
    y = 1.0 / dev.z_t
    for i, j in zip(dev.primary_nodes, dev.secondary_nodes):
        rows += [i, i, j]
        cols += [i, j, i]
        vals += [2.0 * a0 * y, -y, -y]
    n = model.n_nodes
    return sp.coo_matrix((np.array(vals, dtype=complex), (rows, cols)), shape=(n, n)).tocsc()


def build_sensitivity(model: FeederModel, op: OperatingPoint, adm: AdmittanceMatrix | None = None) -> SensitivityModel:
    """Sensitivity model at a converged operating point."""
    if adm is None:
        adm = assemble_ybus(model, op.taps)
    vmag0 = voltage_magnitudes(op)
    bad = np.flatnonzero(vmag0 < V_DEGENERATE)
    if len(bad):
        raise DegenerateVoltageError(f"|V0| below {V_DEGENERATE} p.u. at node {model.nodes[bad[0]].label}")
    coeff = np.column_stack([op.V0.real / vmag0, op.V0.imag / vmag0])

    ns, sl = adm.nonslack, adm.slack
    # first solve recovers Y0^-1 I0 on the non-slack block (equals V0 there)
    x = np.zeros(model.n_nodes, dtype=complex)
    x[sl] = op.V0[sl]
    x[ns] = adm.solve_nn(op.I0[ns] - adm.Yns @ op.V0[sl])

    sens = []
    for dev in model.oltcs:
        a0 = op.taps[dev.id]
        G = tap_admittance_derivative(model, dev, a0)
        w = np.zeros(model.n_nodes, dtype=complex)
        w[ns] = -adm.solve_nn((G @ x)[ns])
        sens.append(TapSensitivity(dev.id, a0, w))
    return SensitivityModel(model, adm, op, sens, vmag0, coeff)


def _dv_from_taps(sm: SensitivityModel, taps: Mapping[str, float] | None) -> np.ndarray:
    dv = np.zeros(sm.model.n_nodes, dtype=complex)
    taps = taps or {}
    for ts in sm.tap_sens:
        da = taps.get(ts.oltc_id, ts.a0) - ts.a0
        if da:
            dv += da * ts.w
    return dv


def linear_vmag(sm: SensitivityModel, dV: np.ndarray) -> np.ndarray:
    return sm.vmag0 + sm.vmag_coeff[:, 0] * dV.real + sm.vmag_coeff[:, 1] * dV.imag


def predict_voltage(
    sm: SensitivityModel, taps: Mapping[str, float] | None, dI: np.ndarray | None
) -> tuple[np.ndarray, np.ndarray]:
    """Predicted ``(dV, |V|)`` for tap ratios ``taps`` and current perturbation ``dI``."""
    dV = _dv_from_taps(sm, taps)
    if dI is not None:
        dV = dV + sm.z0_apply(dI)
    return dV, linear_vmag(sm, dV)


def delta_pq(lin: InjectionLinearization, dV: np.ndarray, dI: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """First-order change of nodal P and Q with the bilinear terms dropped."""
    dVd, dVq = np.real(dV), np.imag(dV)
    dId, dIq = np.real(dI), np.imag(dI)
    dP = lin.Vd0 * dId + dVd * lin.Id0 + lin.Vq0 * dIq + dVq * lin.Iq0
    dQ = lin.Vq0 * dId + dVq * lin.Id0 - lin.Vd0 * dIq - dVd * lin.Iq0
    return dP, dQ


def power_errors(dV: np.ndarray, dI: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """The dropped second-order terms ``(P_err, Q_err)``."""
    dVd, dVq = np.real(dV), np.imag(dV)
    dId, dIq = np.real(dI), np.imag(dI)
    return dVd * dId + dVq * dIq, dVq * dId - dVd * dIq


@dataclass(frozen=True)
class FixedPowerResponse:
    """Voltage/current response with constant-power loads and SI reactive power.

    Solves the linearized system (tap sensitivity, ``dV = W da + Z0 dI``,
    ``dP = 0`` everywhere, ``dQ = 0`` except at ``q_nodes``) for unit tap-ratio
    changes and unit reactive injections. All arrays cover non-slack nodes only.
    """

    nonslack: np.ndarray
    q_nodes: np.ndarray  # global node indices with controllable Q
    dv_tap: np.ndarray  # (n, P) complex
    dv_q: np.ndarray  # (n, K) complex
    di_tap: np.ndarray
    di_q: np.ndarray
    vmag0: np.ndarray  # (n,)
    vmag_tap: np.ndarray  # (n, P)
    vmag_q: np.ndarray  # (n, K)

    def dv(self, da: np.ndarray, dq: np.ndarray) -> np.ndarray:
        return self.dv_tap @ da + self.dv_q @ dq

    def di(self, da: np.ndarray, dq: np.ndarray) -> np.ndarray:
        return self.di_tap @ da + self.di_q @ dq

    def vmag(self, da: np.ndarray, dq: np.ndarray) -> np.ndarray:
        return self.vmag0 + self.vmag_tap @ da + self.vmag_q @ dq


def fixed_power_response(sm: SensitivityModel, q_nodes: Sequence[int]) -> FixedPowerResponse:
    ns = sm.nonslack
    n = len(ns)
    pos = {g: k for k, g in enumerate(ns)}
    q_nodes = np.asarray(q_nodes, dtype=int)
    Vd, Vq = sm.V0.real[ns], sm.V0.imag[ns]
    Id, Iq = sm.I0.real[ns], sm.I0.imag[ns]
    v2 = Vd**2 + Vq**2

    # per node: [dP; dQ] = LV [dVd; dVq] + LI [dId; dIq]
    # LI = [[Vd, Vq], [Vq, -Vd]] with LI^-1 = LI / |V|^2
    # D = LI^-1 LV, so dI = LI^-1 s - D dV
    D11 = (Vd * Id - Vq * Iq) / v2
    D12 = (Vd * Iq + Vq * Id) / v2
    D21 = (Vq * Id + Vd * Iq) / v2
    D22 = (Vq * Iq - Vd * Id) / v2

    Z = sm.z0_dense()
    Zr = np.block([[Z.real, -Z.imag], [Z.imag, Z.real]])
    D = np.block([[np.diag(D11), np.diag(D12)], [np.diag(D21), np.diag(D22)]])
    M = np.eye(2 * n) + Zr @ D

    W = sm.tap_matrix()[ns]
    P = W.shape[1]
    K = len(q_nodes)
    rhs = np.zeros((2 * n, P + K))
    rhs[:n, :P] = W.real
    rhs[n:, :P] = W.imag
    # s = unit dQ at node k: LI^-1 [0; 1] = [Vq; -Vd] / |V|^2
    for c, g in enumerate(q_nodes):
        k = pos[int(g)]
        u = np.zeros(2 * n)
        u[k] = Vq[k] / v2[k]
        u[n + k] = -Vd[k] / v2[k]
        rhs[:, P + c] = Zr @ u
    x = np.linalg.solve(M, rhs)
    dv = x[:n] + 1j * x[n:]

    s = np.zeros((2 * n, P + K))
    for c, g in enumerate(q_nodes):
        k = pos[int(g)]
        s[k, P + c] = Vq[k] / v2[k]
        s[n + k, P + c] = -Vd[k] / v2[k]
    y = s - D @ x
    di = y[:n] + 1j * y[n:]

    coeff = sm.vmag_coeff[ns]
    vm = coeff[:, [0]] * dv.real + coeff[:, [1]] * dv.imag
    return FixedPowerResponse(
        nonslack=ns,
        q_nodes=q_nodes,
        dv_tap=dv[:, :P],
        dv_q=dv[:, P:],
        di_tap=di[:, :P],
        di_q=di[:, P:],
        vmag0=sm.vmag0[ns].copy(),
        vmag_tap=vm[:, :P],
        vmag_q=vm[:, P:],
    )


@dataclass
class ErrorCase:
    case_id: str
    E: np.ndarray  # predicted |V| minus re-solved |V|, full node vector
    max_abs: float
    mean_abs: float


def linearization_error_report(
    model: FeederModel,
    op: OperatingPoint,
    scenario: Sequence[tuple[Mapping[str, float], np.ndarray]],
    sm: SensitivityModel | None = None,
) -> list[ErrorCase]:
    """Linearization error for each ``(tap ratios, dI)`` case.

    The nonlinear reference is a power flow at the case's tap ratios with
    injections ``S0 + dP + j dQ``, where ``(dP, dQ)`` is the linearized power
    change implied by the predicted ``dV`` and the given ``dI``. Statistics
    cover non-slack nodes.
    """
    if sm is None:
        sm = build_sensitivity(model, op)
    ns = sm.nonslack
    out = []
    for k, (taps, dI) in enumerate(scenario):
        dI = np.zeros(model.n_nodes, dtype=complex) if dI is None else np.asarray(dI, dtype=complex)
        dV, vm = predict_voltage(sm, taps, dI)
        dP, dQ = delta_pq(sm.lin, dV, dI)
        S = op.S + dP + 1j * dQ
        S[sm.adm.slack] = 0.0
        ratios = dict(op.taps)
        ratios.update(taps or {})
        ref = solve_powerflow(model, ratios, InjectionSpec(S), v_init=op.V0 + dV)
        E = np.zeros(model.n_nodes)
        E[ns] = vm[ns] - ref.vmag[ns]
        out.append(ErrorCase(str(k), E, float(np.max(np.abs(E[ns]))), float(np.mean(np.abs(E[ns])))))
    return out


def write_error_report(model: FeederModel, cases: Sequence[ErrorCase], csv_path: str | Path, json_path: str | Path) -> dict:
    ns = model.nonslack_nodes
    with Path(csv_path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["case_id", "node", "E"])
        for c in cases:
            for i in ns:
                w.writerow([c.case_id, model.nodes[i].label, f"{c.E[i]:.9g}"])
    summary = {
        "cases": len(cases),
        "max_abs_E": max((c.max_abs for c in cases), default=0.0),
        "mean_abs_E": float(np.mean([np.abs(c.E[ns]) for c in cases])) if cases else 0.0,
    }
    Path(json_path).write_text(json.dumps(summary, indent=1))
    return summary
