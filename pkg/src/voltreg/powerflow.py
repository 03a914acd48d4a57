"""
Unbalanced multi-phase power flow by fixed-point current injection.

The bus admittance matrix is split into slack (s) and non-slack (n) blocks.
Each iteration computes constant-power injection currents
``I_n = conj(S_n / V_n)`` and solves ``Y_nn V_n = I_n - Y_ns V_s`` with a
sparse LU factorization that is reused across iterations.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .netmodel import FeederModel

log = logging.getLogger(__name__)

TOL = 1e-8
MAX_ITER = 200
COLLAPSE_V = 0.5

TapRatioSet = Mapping[str, float]


class PowerFlowError(RuntimeError):
    def __init__(self, msg: str, op: "OperatingPoint | None" = None, collapse: bool = False):
        super().__init__(msg)
        self.operating_point = op
        self.collapse = collapse


class SingularAdmittanceError(PowerFlowError):
    pass


def tap_ratios(model: FeederModel, positions: Mapping[str, int] | None = None) -> dict[str, float]:
    """Tap ratio per OLTC for integer positions (defaults to each device's ``tau_init``)."""
    positions = positions or {}
    out = {}
    for dev in model.oltcs:
        tau = positions.get(dev.id, dev.tau_init)
        if not dev.tau_min <= tau <= dev.tau_max:
            raise ValueError(f"OLTC {dev.id}: tap {tau} outside [{dev.tau_min}, {dev.tau_max}]")
        out[dev.id] = dev.ratio(tau)
    return out


@dataclass
class AdmittanceMatrix:
    Y: sp.csc_matrix
    slack: np.ndarray
    nonslack: np.ndarray
    taps: dict[str, float]
    _lu: object = None

    @property
    def Ynn(self) -> sp.csc_matrix:
        return self.Y[self.nonslack][:, self.nonslack].tocsc()

    @property
    def Yns(self) -> sp.csc_matrix:
        return self.Y[self.nonslack][:, self.slack].tocsc()

    def solve_nn(self, rhs: np.ndarray) -> np.ndarray:
        """Solve ``Y_nn x = rhs`` (rhs may be a matrix of columns)."""
        rhs = np.asarray(rhs, dtype=complex)
        return self._lu.solve(rhs)


def _triplets(model: FeederModel, taps: TapRatioSet):
    rows, cols, vals = [], [], []

    def add(i, j, v):
        rows.append(i)
        cols.append(j)
        vals.append(v)

    for br in model.branches:
        zb = model.z_base(br.from_bus)
        ys = np.linalg.inv(br.series_impedance / zb)
        ysh = br.shunt_admittance * zb / 2.0
        fi = [model.node_index(br.from_bus, ph) for ph in br.phases]
        ti = [model.node_index(br.to_bus, ph) for ph in br.phases]
        n = len(br.phases)
        for a in range(n):
            for b in range(n):
                add(fi[a], fi[b], ys[a, b] + ysh[a, b])
                add(ti[a], ti[b], ys[a, b] + ysh[a, b])
                add(fi[a], ti[b], -ys[a, b])
                add(ti[a], fi[b], -ys[a, b])

    ratio_of_phase = {}
    for dev in model.oltcs:
        a = taps.get(dev.id, dev.ratio(dev.tau_init))
        for ph in dev.phases:
            ratio_of_phase[(dev.transformer_id, ph)] = a

    for tr in model.transformers:
        for ph in tr.phases:
            a = ratio_of_phase.get((tr.id, ph), 1.0)
            i = model.node_index(tr.primary_bus, ph)
            j = model.node_index(tr.secondary_bus, ph)
            y = 1.0 / tr.z_pu
            add(i, i, a * a * y)
            add(i, j, -a * y)
            add(j, i, -a * y)
            add(j, j, y)
    return rows, cols, vals


def assemble_ybus(model: FeederModel, taps: TapRatioSet | None = None) -> AdmittanceMatrix:
    """Assemble and factorize the bus admittance matrix at the given tap ratios.

    The transformer stamp per regulated phase is ``a^2/z_T`` on the primary
    self-term, ``-a/z_T`` on the mutual terms and ``1/z_T`` on the secondary
    self-term, so the no-load secondary voltage is ``a`` times the primary.
    """
    taps = dict(taps) if taps is not None else tap_ratios(model)
    for dev in model.oltcs:
        if dev.id in taps:
            lo, hi = dev.ratio(dev.tau_min), dev.ratio(dev.tau_max)
            if not lo - 1e-12 <= taps[dev.id] <= hi + 1e-12:
                raise ValueError(f"OLTC {dev.id}: tap ratio {taps[dev.id]} outside [{lo}, {hi}]")
    rows, cols, vals = _triplets(model, taps)
    n = model.n_nodes
    Y = sp.coo_matrix((np.array(vals, dtype=complex), (rows, cols)), shape=(n, n)).tocsc()
    Y.sum_duplicates()
    Y.sort_indices()
    adm = AdmittanceMatrix(Y, model.slack_nodes, model.nonslack_nodes, taps)

    Ynn = adm.Ynn
    diag = np.abs(Ynn.diagonal())
    if np.any(diag == 0):
        bad = model.nodes[adm.nonslack[np.flatnonzero(diag == 0)[0]]]
        raise SingularAdmittanceError(f"admittance matrix is singular: node {bad.label} is isolated")
    try:
        adm._lu = spla.splu(Ynn, permc_spec="MMD_AT_PLUS_A")
    except RuntimeError as exc:
        raise SingularAdmittanceError(f"admittance matrix is singular ({exc})") from exc
    return adm


def dump_ybus(adm: AdmittanceMatrix, path: str | Path) -> None:
    """Debug dump of Y as ``row,col,re,im`` triplets."""
    coo = adm.Y.tocoo()
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "col", "re", "im"])
        for i, j, v in zip(coo.row, coo.col, coo.data):
            w.writerow([int(i), int(j), repr(float(v.real)), repr(float(v.imag))])


@dataclass
class InjectionSpec:
    """Net complex power injection per node, generation positive (p.u.)."""

    S: np.ndarray

    @property
    def P(self) -> np.ndarray:
        return self.S.real

    @property
    def Q(self) -> np.ndarray:
        return self.S.imag


def build_injections(
    model: FeederModel,
    load_mult: Mapping[str, float],
    pv_kw: Mapping[str, float],
    si_q_kvar: Mapping[str, float] | None = None,
) -> InjectionSpec:
    """Net nodal injections from load profile multipliers and PV output.

    ``load_mult`` maps profile id to multiplier, ``pv_kw`` maps PV unit id to
    real output (clipped to the inverter rating), ``si_q_kvar`` maps PV unit id
    to its reactive set-point.
    """
    S = np.zeros(model.n_nodes, dtype=complex)
    for ld in model.loads:
        m = load_mult.get(ld.profile_id, 1.0)
        S[ld.node.index] -= complex(ld.base_p_kw * m, ld.base_q_kvar * m)
    si_q_kvar = si_q_kvar or {}
    for pv in model.pv_units:
        p = pv.available_p_kw(pv_kw.get(pv.id, 0.0))
        S[pv.node.index] += complex(p, si_q_kvar.get(pv.id, 0.0))
    S /= model.s_base_kva
    S[model.slack_nodes] = 0.0
    return InjectionSpec(S)


@dataclass
class OperatingPoint:
    V0: np.ndarray
    I0: np.ndarray
    taps: dict[str, float]
    converged: bool
    mismatch: float
    iterations: int
    S: np.ndarray

    @property
    def vmag(self) -> np.ndarray:
        return np.abs(self.V0)


def no_load_voltages(adm: AdmittanceMatrix, v_slack: np.ndarray, n: int) -> np.ndarray:
    V = np.zeros(n, dtype=complex)
    V[adm.slack] = v_slack
    V[adm.nonslack] = adm.solve_nn(-(adm.Yns @ v_slack))
    return V


def solve_powerflow(
    model: FeederModel,
    taps: TapRatioSet | None,
    inj: InjectionSpec,
    v_init: np.ndarray | None = None,
    *,
    adm: AdmittanceMatrix | None = None,
    tol: float = TOL,
    max_iter: int = MAX_ITER,
) -> OperatingPoint:
    """Fixed-point current-injection power flow.

    Raises
    ------
    PowerFlowError
        On non-convergence after ``max_iter`` iterations or if any voltage
        magnitude drops below 0.5 p.u. during iteration (``collapse=True``).
        The last iterate is attached as ``operating_point``.
    """
    if adm is None:
        adm = assemble_ybus(model, taps)
    taps = dict(adm.taps)
    n = model.n_nodes
    v_s = model.source_voltage()
    ns = adm.nonslack
    S = np.asarray(inj.S, dtype=complex).copy()
    if np.any(S[adm.slack] != 0):
        raise ValueError("slack nodes cannot carry injections")
    S_n = S[ns]
    rhs_s = adm.Yns @ v_s

    if v_init is None:
        V = no_load_voltages(adm, v_s, n)
    else:
        V = np.array(v_init, dtype=complex)
        V[adm.slack] = v_s

    Y = adm.Y
    mismatch = np.inf
    for it in range(max_iter + 1):
        I_calc = Y @ V
        mismatch = float(np.max(np.abs(V[ns] * np.conj(I_calc[ns]) - S_n), initial=0.0))
        if mismatch <= tol:
            return OperatingPoint(V, I_calc, taps, True, mismatch, it, S)
        if it == max_iter:
            break
        V[ns] = adm.solve_nn(np.conj(S_n / V[ns]) - rhs_s)
        vmin = float(np.min(np.abs(V[ns]), initial=np.inf))
        if vmin < COLLAPSE_V:
            op = OperatingPoint(V, Y @ V, taps, False, mismatch, it + 1, S)
            raise PowerFlowError(f"voltage collapse: min |V| = {vmin:.4f} p.u. at iteration {it + 1}", op, collapse=True)

    op = OperatingPoint(V, Y @ V, taps, False, mismatch, max_iter, S)
    raise PowerFlowError(f"power flow did not converge in {max_iter} iterations (mismatch {mismatch:.3e} p.u.)", op)


def voltage_magnitudes(op: OperatingPoint) -> np.ndarray:
    return np.sqrt(op.V0.real**2 + op.V0.imag**2)


def nodal_mismatch(adm: AdmittanceMatrix, op: OperatingPoint) -> np.ndarray:
    """|S_computed - S_specified| at every non-slack node."""
    ns = adm.nonslack
    I = adm.Y @ op.V0
    return np.abs(op.V0[ns] * np.conj(I[ns]) - op.S[ns])
