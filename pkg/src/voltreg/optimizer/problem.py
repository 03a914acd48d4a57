"""
Dispatch problem over a horizon and its LP assembly.

Two equivalent formulations are built:

``assemble``
    The full form. Per step and non-slack node it keeps ``dVd, dVq, dId, dIq``,
    the linearized magnitude ``vm`` and the deviation ``d``; per OLTC and step the
    relaxed ratio ``a``, the integer position ``tau`` and the move ``m``.
``condense``
    The load and PV power equalities are eliminated exactly, leaving
    ``vm = vm0 + A da + B (q - q0)`` with ``q`` the reactive output at PV nodes and
    ``q0`` the output already present at the linearization point. Only
    ``tau``, ``m``, ``q`` and ``d`` remain. This is what the controllers use.

Both share the objective ``w1 * sum(d) + w2 * sum(m)``. The move auxiliary of the
first step measures the change from the position entering the horizon.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from ..linmodel import FixedPowerResponse, SensitivityModel, fixed_power_response
from ..netmodel import FeederModel, OltcDevice
from .lp import LpInstance

MAX_RAMP = 10


def ramp_limit(dev: OltcDevice, dt: float) -> int:
    """Tap moves allowed per step: one move per 30 s of step length, capped at 10."""
    return int(min(MAX_RAMP, max(1, int(dt // 30)) * dev.delta_to_max))


@dataclass
class DispatchStep:
    """Linearization and reactive capability for one horizon step."""

    sens: SensitivityModel
    q_max: np.ndarray  # per PV node, p.u.
    q0: np.ndarray | None = None  # SI reactive output inside ``sens``, per PV node, p.u.
    _resp: FixedPowerResponse | None = field(default=None, repr=False)


@dataclass
class DispatchProblem:
    model: FeederModel
    steps: list[DispatchStep]
    tau_prev: dict[str, int]
    w1: float = 1.0
    w2: float = 0.15
    dt: float = 30.0
    ramp: dict[str, int] | None = None
    pv_nodes: np.ndarray | None = None

    def __post_init__(self):
        if not self.steps:
            raise ValueError("dispatch horizon is empty")
        if self.w1 < 0 or self.w2 < 0:
            raise ValueError("weights must be non-negative")
        if self.pv_nodes is None:
            self.pv_nodes = pv_node_indices(self.model)
        self.pv_nodes = np.asarray(self.pv_nodes, dtype=int)
        K = len(self.pv_nodes)
        n = len(self.model.nonslack_nodes)
        for t, st in enumerate(self.steps):
            st.q_max = np.asarray(st.q_max, dtype=float)
            if st.q_max.shape != (K,):
                raise ValueError(f"step {t}: q_max has shape {st.q_max.shape}, expected ({K},)")
            if np.any(st.q_max < 0):
                raise ValueError(f"step {t}: negative q_max")
            st.q0 = np.zeros(K) if st.q0 is None else np.asarray(st.q0, dtype=float)
            if st.q0.shape != (K,):
                raise ValueError(f"step {t}: q0 has shape {st.q0.shape}, expected ({K},)")
            if len(st.sens.nonslack) != n:
                raise ValueError(f"step {t}: sensitivity model has {len(st.sens.nonslack)} non-slack nodes, expected {n}")
        for dev in self.model.oltcs:
            tp = self.tau_prev.get(dev.id)
            if tp is None or not dev.tau_min <= tp <= dev.tau_max:
                raise ValueError(f"OLTC {dev.id}: tau_prev {tp} missing or outside [{dev.tau_min}, {dev.tau_max}]")
        if self.ramp is None:
            self.ramp = {dev.id: ramp_limit(dev, self.dt) for dev in self.model.oltcs}

    @property
    def T(self) -> int:
        return len(self.steps)

    @property
    def P(self) -> int:
        return len(self.model.oltcs)

    @property
    def K(self) -> int:
        return len(self.pv_nodes)

    @property
    def N(self) -> int:
        return len(self.model.nonslack_nodes)

    def response(self, t: int) -> FixedPowerResponse:
        st = self.steps[t]
        if st._resp is None:
            st._resp = fixed_power_response(st.sens, self.pv_nodes)
        return st._resp

    def a0(self, t: int) -> np.ndarray:
        return np.array([ts.a0 for ts in self.steps[t].sens.tap_sens])


def pv_node_indices(model: FeederModel) -> np.ndarray:
    return np.array(sorted({pv.node.index for pv in model.pv_units}), dtype=int)


def pv_q_max(model: FeederModel, pv_kw: Mapping[str, float], pv_nodes: np.ndarray | None = None) -> np.ndarray:
    """Reactive capability per PV node (p.u.) for the given real outputs."""
    if pv_nodes is None:
        pv_nodes = pv_node_indices(model)
    pos = {int(g): k for k, g in enumerate(pv_nodes)}
    q = np.zeros(len(pv_nodes))
    for pv in model.pv_units:
        q[pos[pv.node.index]] += pv.q_max_kvar(pv_kw.get(pv.id, 0.0)) / model.s_base_kva
    return q


class _Rows:
    """Accumulates sparse rows as COO triplets."""

    def __init__(self, n_vars: int):
        self.n = n_vars
        self.r, self.c, self.v, self.b, self.names = [], [], [], [], []

    def add(self, cols, vals, rhs, name):
        i = len(self.b)
        cols = np.asarray(cols, dtype=int).ravel()
        vals = np.asarray(vals, dtype=float).ravel()
        keep = vals != 0
        self.r.append(np.full(int(keep.sum()), i))
        self.c.append(cols[keep])
        self.v.append(vals[keep])
        self.b.append(float(rhs))
        self.names.append(name)

    def add_block(self, rows_cols, vals, rhs, names):
        """Add many rows at once: ``rows_cols`` is (row_offsets, cols) with dense ``vals``."""
        i0 = len(self.b)
        r, c = rows_cols
        self.r.append(np.asarray(r) + i0)
        self.c.append(np.asarray(c))
        self.v.append(np.asarray(vals, dtype=float))
        self.b.extend(np.asarray(rhs, dtype=float).tolist())
        self.names.extend(names)

    def matrix(self) -> sp.csr_matrix:
        m = len(self.b)
        if not m:
            return sp.csr_matrix((0, self.n))
        A = sp.coo_matrix((np.concatenate(self.v), (np.concatenate(self.r), np.concatenate(self.c))), shape=(m, self.n))
        A = A.tocsr()
        A.eliminate_zeros()
        return A


def _dense_block(M: np.ndarray, col_idx: np.ndarray, extra=None):
    """Triplets for rows ``M @ x[col_idx]`` (optionally appending one column per row)."""
    nr, nc = M.shape
    r = np.repeat(np.arange(nr), nc)
    c = np.tile(col_idx, nr)
    v = M.ravel()
    if extra is not None:
        ecols, evals = extra
        r = np.concatenate([r, np.arange(nr)])
        c = np.concatenate([c, ecols])
        v = np.concatenate([v, evals])
    keep = v != 0
    return (r[keep], c[keep]), v[keep]


@dataclass
class Layout:
    """Variable indices of an assembled instance."""

    formulation: str
    tau: np.ndarray  # (P, T)
    m: np.ndarray  # (P, T)
    d: np.ndarray  # (T, N)
    q: np.ndarray | None = None  # (T, K), condensed form
    a: np.ndarray | None = None  # (P, T), full form
    vm: np.ndarray | None = None  # (T, N), full form
    dvd: np.ndarray | None = None
    dvq: np.ndarray | None = None
    did: np.ndarray | None = None
    diq: np.ndarray | None = None


def _tap_rows(prob: DispatchProblem, ub: _Rows, L: Layout):
    for p, dev in enumerate(prob.model.oltcs):
        tp = prob.tau_prev[dev.id]
        R = prob.ramp[dev.id]
        for t in range(prob.T):
            cur, mv = L.tau[p, t], L.m[p, t]
            if t == 0:
                ub.add([cur, mv], [1, -1], tp, f"mv_up_{dev.id}_{t}")
                ub.add([cur, mv], [-1, -1], -tp, f"mv_dn_{dev.id}_{t}")
                ub.add([cur], [1], tp + R, f"ramp_up_{dev.id}_{t}")
                ub.add([cur], [-1], R - tp, f"ramp_dn_{dev.id}_{t}")
            else:
                prev = L.tau[p, t - 1]
                ub.add([cur, prev, mv], [1, -1, -1], 0, f"mv_up_{dev.id}_{t}")
                ub.add([cur, prev, mv], [-1, 1, -1], 0, f"mv_dn_{dev.id}_{t}")
                ub.add([cur, prev], [1, -1], R, f"ramp_up_{dev.id}_{t}")
                ub.add([cur, prev], [-1, 1], R, f"ramp_dn_{dev.id}_{t}")


def condense(prob: DispatchProblem) -> tuple[LpInstance, Layout]:
    """Reduced LP: ``tau, m`` per OLTC-step, ``q`` per PV node-step, ``d`` per node-step."""
    T, P, K, N = prob.T, prob.P, prob.K, prob.N
    o = 0
    tau = np.arange(o, o + P * T).reshape(P, T); o += P * T
    m = np.arange(o, o + P * T).reshape(P, T); o += P * T
    q = np.arange(o, o + T * K).reshape(T, K); o += T * K
    d = np.arange(o, o + T * N).reshape(T, N); o += T * N
    L = Layout("condensed", tau=tau, m=m, d=d, q=q)
    nv = o

    names = [""] * nv
    lb = np.zeros(nv)
    ub_ = np.full(nv, np.inf)
    integ = np.zeros(nv, dtype=bool)
    c = np.zeros(nv)
    labels = [prob.model.nodes[g].label for g in prob.model.nonslack_nodes]
    pv_labels = [prob.model.nodes[g].label for g in prob.pv_nodes]
    for p, dev in enumerate(prob.model.oltcs):
        for t in range(T):
            names[tau[p, t]] = f"tau_{dev.id}_{t}"
            names[m[p, t]] = f"m_{dev.id}_{t}"
            lb[tau[p, t]], ub_[tau[p, t]] = dev.tau_min, dev.tau_max
            integ[tau[p, t]] = True
            c[m[p, t]] = prob.w2
    for t in range(T):
        qm = prob.steps[t].q_max
        for k in range(K):
            names[q[t, k]] = f"q_{pv_labels[k]}_{t}"
            lb[q[t, k]], ub_[q[t, k]] = -qm[k], qm[k]
        for i in range(N):
            names[d[t, i]] = f"d_{labels[i]}_{t}"
        c[d[t]] = prob.w1
    names = [s.replace(".", "_") for s in names]

    ub = _Rows(nv)
    steps = np.array([dev.tap_step for dev in prob.model.oltcs])
    for t in range(T):
        r = prob.response(t)
        # vm = vm0 + A (s*tau + 1 - a0) + B (q - q0)
        A = r.vmag_tap * steps[None, :] if P else np.zeros((N, 0))
        base = r.vmag0 + (r.vmag_tap @ (1.0 - prob.a0(t)) if P else 0.0) - r.vmag_q @ prob.steps[t].q0
        cols = np.concatenate([tau[:, t], q[t]])
        M = np.hstack([A, r.vmag_q])
        rc, v = _dense_block(M, cols, extra=(d[t], -np.ones(N)))
        ub.add_block(rc, v, 1.0 - base, [f"dev_hi_{s}_{t}" for s in labels])
        rc, v = _dense_block(-M, cols, extra=(d[t], -np.ones(N)))
        ub.add_block(rc, v, base - 1.0, [f"dev_lo_{s}_{t}" for s in labels])
    _tap_rows(prob, ub, L)

    lp = LpInstance(c=c, A_ub=ub.matrix(), b_ub=np.array(ub.b), A_eq=None, b_eq=np.zeros(0),
                    lb=lb, ub=ub_, integrality=integ, names=names,
                    ub_rows=[s.replace(".", "_") for s in ub.names])
    return lp, L


def assemble(prob: DispatchProblem) -> tuple[LpInstance, Layout]:
    """Full LP with explicit voltage and current perturbations per node and step."""
    T, P, N = prob.T, prob.P, prob.N
    model = prob.model
    ns = model.nonslack_nodes
    pv_pos = {int(g): k for k, g in enumerate(prob.pv_nodes)}
    o = 0
    blocks = {}
    for key in ("dvd", "dvq", "did", "diq", "vm", "d"):
        blocks[key] = np.arange(o, o + T * N).reshape(T, N)
        o += T * N
    a = np.arange(o, o + P * T).reshape(P, T); o += P * T
    tau = np.arange(o, o + P * T).reshape(P, T); o += P * T
    m = np.arange(o, o + P * T).reshape(P, T); o += P * T
    nv = o
    L = Layout("full", tau=tau, m=m, d=blocks["d"], a=a, vm=blocks["vm"], dvd=blocks["dvd"],
               dvq=blocks["dvq"], did=blocks["did"], diq=blocks["diq"])

    labels = [model.nodes[g].label.replace(".", "_") for g in ns]
    names = [""] * nv
    lb = np.full(nv, -np.inf)
    ub_ = np.full(nv, np.inf)
    integ = np.zeros(nv, dtype=bool)
    c = np.zeros(nv)
    for key, idx in blocks.items():
        for t in range(T):
            for i in range(N):
                names[idx[t, i]] = f"{key}_{labels[i]}_{t}"
    lb[blocks["d"].ravel()] = 0.0
    c[blocks["d"].ravel()] = prob.w1
    for p, dev in enumerate(model.oltcs):
        for t in range(T):
            names[a[p, t]] = f"a_{dev.id}_{t}"
            names[tau[p, t]] = f"tau_{dev.id}_{t}"
            names[m[p, t]] = f"m_{dev.id}_{t}"
            lb[a[p, t]], ub_[a[p, t]] = dev.ratio(dev.tau_min), dev.ratio(dev.tau_max)
            lb[tau[p, t]], ub_[tau[p, t]] = dev.tau_min, dev.tau_max
            integ[tau[p, t]] = True
            lb[m[p, t]] = 0.0
            c[m[p, t]] = prob.w2
    names = [s.replace(".", "_") for s in names]

    eq = _Rows(nv)
    ub = _Rows(nv)
    for t in range(T):
        sm = prob.steps[t].sens
        Z = sm.z0_dense()
        W = sm.tap_matrix()[ns]
        a0 = prob.a0(t)
        dvd, dvq, did, diq = (blocks[k][t] for k in ("dvd", "dvq", "did", "diq"))
        vm, d = blocks["vm"][t], blocks["d"][t]
        # dVd - Re(W) a - ReZ dId + ImZ dIq = -Re(W) a0
        M = np.hstack([-W.real, -Z.real, Z.imag]) if P else np.hstack([-Z.real, Z.imag])
        cols = np.concatenate([a[:, t], did, diq])
        rc, v = _dense_block(M, cols, extra=(dvd, np.ones(N)))
        eq.add_block(rc, v, -(W.real @ a0) if P else np.zeros(N), [f"vd_{s}_{t}" for s in labels])
        M = np.hstack([-W.imag, -Z.imag, -Z.real]) if P else np.hstack([-Z.imag, -Z.real])
        rc, v = _dense_block(M, cols, extra=(dvq, np.ones(N)))
        eq.add_block(rc, v, -(W.imag @ a0) if P else np.zeros(N), [f"vq_{s}_{t}" for s in labels])

        Vd, Vq = sm.V0.real[ns], sm.V0.imag[ns]
        Id, Iq = sm.I0.real[ns], sm.I0.imag[ns]
        qmax, q0 = prob.steps[t].q_max, prob.steps[t].q0
        for i in range(N):
            cols = [did[i], dvd[i], diq[i], dvq[i]]
            # dP = Vd dId + Id dVd + Vq dIq + Iq dVq ; dQ = Vq dId + Id dVq - Vd dIq - Iq dVd
            eq.add(cols, [Vd[i], Id[i], Vq[i], Iq[i]], 0.0, f"dp_{labels[i]}_{t}")
            qv = [Vq[i], -Iq[i], -Vd[i], Id[i]]
            k = pv_pos.get(int(ns[i]))
            if k is None:
                eq.add(cols, qv, 0.0, f"dq_{labels[i]}_{t}")
            else:
                ub.add(cols, qv, qmax[k] - q0[k], f"dq_hi_{labels[i]}_{t}")
                ub.add(cols, np.negative(qv), qmax[k] + q0[k], f"dq_lo_{labels[i]}_{t}")
            coeff = sm.vmag_coeff[ns[i]]
            eq.add([vm[i], dvd[i], dvq[i]], [1.0, -coeff[0], -coeff[1]], sm.vmag0[ns[i]], f"vm_{labels[i]}_{t}")
            ub.add([vm[i], d[i]], [1.0, -1.0], 1.0, f"dev_hi_{labels[i]}_{t}")
            ub.add([vm[i], d[i]], [-1.0, -1.0], -1.0, f"dev_lo_{labels[i]}_{t}")
        for p, dev in enumerate(model.oltcs):
            eq.add([a[p, t], tau[p, t]], [1.0, -dev.tap_step], 1.0, f"ratio_{dev.id}_{t}")
    _tap_rows(prob, ub, L)

    lp = LpInstance(c=c, A_ub=ub.matrix(), b_ub=np.array(ub.b), A_eq=eq.matrix(), b_eq=np.array(eq.b),
                    lb=lb, ub=ub_, integrality=integ, names=names,
                    ub_rows=[s.replace(".", "_") for s in ub.names], eq_rows=[s.replace(".", "_") for s in eq.names])
    return lp, L


def predicted_state(prob: DispatchProblem, L: Layout, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(taps (P,T) int, q (T,K) p.u., vmag (T,N))`` from an LP solution; ``q`` is absolute."""
    taps = np.rint(x[L.tau]).astype(int) if prob.P else np.zeros((0, prob.T), dtype=int)
    T, K, N = prob.T, prob.K, prob.N
    steps = np.array([dev.tap_step for dev in prob.model.oltcs])
    vm = np.zeros((T, N))
    dq = np.zeros((T, K))
    ns = prob.model.nonslack_nodes
    pos = {int(g): i for i, g in enumerate(ns)}
    for t in range(T):
        da = steps * taps[:, t] + 1.0 - prob.a0(t) if prob.P else np.zeros(0)
        if L.formulation == "condensed":
            dq[t] = x[L.q[t]]
            vm[t] = prob.response(t).vmag(da, dq[t] - prob.steps[t].q0)
        else:
            sm = prob.steps[t].sens
            dI = x[L.did[t]] + 1j * x[L.diq[t]]
            dV = x[L.dvd[t]] + 1j * x[L.dvq[t]]
            rows = [pos[int(g)] for g in prob.pv_nodes]
            V0, I0 = sm.V0[ns][rows], sm.I0[ns][rows]
            dVk, dIk = dV[rows], dI[rows]
            dq[t] = V0.imag * dIk.real + dVk.imag * I0.real - V0.real * dIk.imag - dVk.real * I0.imag
            dq[t] += prob.steps[t].q0
            vm[t] = x[L.vm[t]]
    return taps, dq, vm
