"""
Linear programs: container, solvers, feasibility check, LP-format export.

``solve_lp`` uses the HiGHS simplex shipped with SciPy. ``dense_simplex`` is an
independent two-phase tableau simplex (Bland's rule) kept as a reference for
cross-checking small instances; it is slow and only meant for a few hundred
variables.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

FEAS_TOL = 1e-7
OPT_TOL = 1e-7


class LpError(RuntimeError):
    pass


class LpInfeasible(LpError):
    def __init__(self, msg: str, row: str | None = None):
        super().__init__(msg)
        self.row = row


class LpUnbounded(LpError):
    pass


@dataclass
class LpInstance:
    """``min c@x + c0`` s.t. ``A_ub x <= b_ub``, ``A_eq x = b_eq``, ``lb <= x <= ub``."""

    c: np.ndarray
    A_ub: sp.csr_matrix
    b_ub: np.ndarray
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    integrality: np.ndarray
    names: list[str] = field(default_factory=list)
    ub_rows: list[str] = field(default_factory=list)
    eq_rows: list[str] = field(default_factory=list)
    c0: float = 0.0

    def __post_init__(self):
        n = len(self.c)
        self.c = np.asarray(self.c, dtype=float)
        self.A_ub = sp.csr_matrix(self.A_ub, shape=(len(self.b_ub), n)) if self.A_ub is not None else sp.csr_matrix((0, n))
        self.A_eq = sp.csr_matrix(self.A_eq, shape=(len(self.b_eq), n)) if self.A_eq is not None else sp.csr_matrix((0, n))
        self.b_ub = np.asarray(self.b_ub, dtype=float).reshape(-1)
        self.b_eq = np.asarray(self.b_eq, dtype=float).reshape(-1)
        self.lb = np.asarray(self.lb, dtype=float)
        self.ub = np.asarray(self.ub, dtype=float)
        self.integrality = np.asarray(self.integrality, dtype=bool)
        if not self.names:
            self.names = [f"x{i}" for i in range(n)]
        if not self.ub_rows:
            self.ub_rows = [f"u{i}" for i in range(len(self.b_ub))]
        if not self.eq_rows:
            self.eq_rows = [f"e{i}" for i in range(len(self.b_eq))]
        for arr, what in ((self.lb, "lb"), (self.ub, "ub"), (self.integrality, "integrality")):
            if arr.shape != (n,):
                raise ValueError(f"{what} has shape {arr.shape}, expected ({n},)")
        if self.A_ub.shape[1] != n or self.A_eq.shape[1] != n:
            raise ValueError("constraint matrices do not match the number of variables")

    @property
    def n_vars(self) -> int:
        return len(self.c)

    def objective(self, x: np.ndarray) -> float:
        return float(self.c @ x + self.c0)

    def max_violation(self, x: np.ndarray) -> float:
        """Largest violation of any row or bound at ``x``."""
        v = [0.0]
        if self.A_ub.shape[0]:
            v.append(float(np.max(self.A_ub @ x - self.b_ub)))
        if self.A_eq.shape[0]:
            v.append(float(np.max(np.abs(self.A_eq @ x - self.b_eq))))
        v.append(float(np.max(self.lb - x, initial=0.0)))
        v.append(float(np.max(x - self.ub, initial=0.0)))
        return max(v)


@dataclass
class LpResult:
    x: np.ndarray
    objective: float
    iterations: int = 0


def _elastic_row(lp: LpInstance, lb: np.ndarray, ub: np.ndarray) -> str | None:
    """Row needing the largest elastic slack, used as the infeasibility witness."""
    mu, me = lp.A_ub.shape[0], lp.A_eq.shape[0]
    n = lp.n_vars
    if mu + me == 0:
        return None
    A_ub = sp.hstack([lp.A_ub, -sp.identity(mu), sp.csr_matrix((mu, 2 * me))]) if mu else None
    A_eq = sp.hstack([lp.A_eq, sp.csr_matrix((me, mu)), sp.identity(me), -sp.identity(me)]) if me else None
    c = np.concatenate([np.zeros(n), np.ones(mu + 2 * me)])
    bounds = np.column_stack([np.concatenate([lb, np.zeros(mu + 2 * me)]), np.concatenate([ub, np.full(mu + 2 * me, np.inf)])])
    res = linprog(c, A_ub=A_ub, b_ub=lp.b_ub if mu else None, A_eq=A_eq, b_eq=lp.b_eq if me else None,
                  bounds=bounds, method="highs")
    if res.status != 0:
        return None
    s = res.x[n:]
    slack = np.concatenate([s[:mu], s[mu : mu + me] + s[mu + me :]])
    k = int(np.argmax(slack))
    if slack[k] <= FEAS_TOL:
        return None
    return lp.ub_rows[k] if k < mu else lp.eq_rows[k - mu]


def solve_lp(lp: LpInstance, lb: np.ndarray | None = None, ub: np.ndarray | None = None) -> LpResult:
    """Solve the continuous relaxation (integrality ignored).

    ``lb``/``ub`` override the instance bounds (used by branch-and-bound).

    Raises
    ------
    LpInfeasible
        With ``row`` naming the constraint that needs the largest elastic slack.
    LpUnbounded
    """
    lb = lp.lb if lb is None else lb
    ub = lp.ub if ub is None else ub
    if np.any(lb > ub + FEAS_TOL):
        k = int(np.argmax(lb - ub))
        raise LpInfeasible(f"empty bound interval on {lp.names[k]}", lp.names[k])
    res = linprog(
        lp.c,
        A_ub=lp.A_ub if lp.A_ub.shape[0] else None,
        b_ub=lp.b_ub if lp.A_ub.shape[0] else None,
        A_eq=lp.A_eq if lp.A_eq.shape[0] else None,
        b_eq=lp.b_eq if lp.A_eq.shape[0] else None,
        bounds=np.column_stack([lb, ub]),
        method="highs-ds",
        options={"primal_feasibility_tolerance": FEAS_TOL, "dual_feasibility_tolerance": OPT_TOL, "presolve": True},
    )
    if res.status == 0:
        return LpResult(res.x, float(res.fun + lp.c0), int(getattr(res, "nit", 0)))
    if res.status == 2:
        row = _elastic_row(lp, lb, ub)
        raise LpInfeasible(f"LP infeasible (witness row {row})", row)
    if res.status == 3:
        raise LpUnbounded("LP unbounded; every physical variable should be boxed by assembly")
    raise LpError(f"LP solver failed: {res.message}")


def dense_simplex(lp: LpInstance, lb: np.ndarray | None = None, ub: np.ndarray | None = None,
                  tol: float = 1e-9, max_iter: int = 50_000) -> LpResult:
    """Reference two-phase tableau simplex on the dense standard form."""
    lb = np.asarray(lp.lb if lb is None else lb, dtype=float)
    ub = np.asarray(lp.ub if ub is None else ub, dtype=float)
    n = lp.n_vars
    if np.any(lb > ub + tol):
        raise LpInfeasible("empty bound interval")
    A_ub = lp.A_ub.toarray()
    A_eq = lp.A_eq.toarray()

    # x = shift + T y, y >= 0
    cols, shift = [], np.zeros(n)
    extra_ub = []
    for j in range(n):
        lo, hi = lb[j], ub[j]
        if np.isfinite(lo):
            shift[j] = lo
            cols.append((j, 1.0))
            if np.isfinite(hi):
                extra_ub.append((len(cols) - 1, hi - lo))
        elif np.isfinite(hi):
            shift[j] = hi
            cols.append((j, -1.0))
        else:
            cols.append((j, 1.0))
            cols.append((j, -1.0))
    m_y = len(cols)
    T = np.zeros((n, m_y))
    for k, (j, s) in enumerate(cols):
        T[j, k] = s

    rows, rhs, kinds = [], [], []
    for i in range(A_ub.shape[0]):
        rows.append(A_ub[i] @ T)
        rhs.append(lp.b_ub[i] - A_ub[i] @ shift)
        kinds.append("le")
    for k, cap in extra_ub:
        r = np.zeros(m_y)
        r[k] = 1.0
        rows.append(r)
        rhs.append(cap)
        kinds.append("le")
    for i in range(A_eq.shape[0]):
        rows.append(A_eq[i] @ T)
        rhs.append(lp.b_eq[i] - A_eq[i] @ shift)
        kinds.append("eq")
    m = len(rows)
    n_slack = sum(k == "le" for k in kinds)
    width = m_y + n_slack + m  # y, slacks, artificials
    tab = np.zeros((m, width + 1))
    s_col = m_y
    for i, (r, b, kind) in enumerate(zip(rows, rhs, kinds)):
        tab[i, :m_y] = r
        if kind == "le":
            tab[i, s_col] = 1.0
            s_col += 1
        if b < 0:
            tab[i, :width] *= -1
            b = -b
        tab[i, -1] = b
        tab[i, m_y + n_slack + i] = 1.0
    basis = list(range(m_y + n_slack, width))
    cost_y = T.T @ lp.c

    def pivot(r, c):
        tab[r] /= tab[r, c]
        for i in range(m):
            if i != r and tab[i, c] != 0.0:
                tab[i] -= tab[i, c] * tab[r]
        basis[r] = c

    def run(cost, allowed):
        it = 0
        while True:
            cb = cost[basis]
            reduced = cost[:width] - cb @ tab[:, :width]
            enter = next((j for j in range(width) if allowed[j] and reduced[j] < -tol), None)
            if enter is None:
                return it
            colv = tab[:, enter]
            ratios = [(tab[i, -1] / colv[i], basis[i], i) for i in range(m) if colv[i] > tol]
            if not ratios:
                raise LpUnbounded("dense simplex: unbounded direction")
            best = min(r[0] for r in ratios)
            leave = min((r for r in ratios if r[0] <= best + tol), key=lambda r: r[1])[2]
            pivot(leave, enter)
            it += 1
            if it > max_iter:
                raise LpError("dense simplex: iteration limit")

    allowed = np.ones(width, dtype=bool)
    phase1 = np.zeros(width)
    phase1[m_y + n_slack :] = 1.0
    it1 = run(phase1, allowed)
    if tab[:, -1] @ phase1[basis] > 1e-7:
        raise LpInfeasible("dense simplex: phase 1 optimum positive")
    # drive artificials out of the basis where possible
    for r in range(m):
        if basis[r] >= m_y + n_slack:
            nz = [j for j in range(m_y + n_slack) if abs(tab[r, j]) > tol]
            if nz:
                pivot(r, nz[0])
    allowed[m_y + n_slack :] = False
    cost2 = np.zeros(width)
    cost2[:m_y] = cost_y
    it2 = run(cost2, allowed)
    y = np.zeros(width)
    for r, b in enumerate(basis):
        y[b] = tab[r, -1]
    x = shift + T @ y[:m_y]
    return LpResult(x, float(lp.c @ x + lp.c0), it1 + it2)


def write_lp_format(lp: LpInstance, path: str | Path) -> None:
    """Write the instance in CPLEX LP text format."""
    def expr(coefs, idx):
        parts = []
        for a, j in zip(coefs, idx):
            if a == 0:
                continue
            sign = "-" if a < 0 else "+"
            parts.append(f"{sign} {abs(a):.17g} {lp.names[j]}")
        return " ".join(parts) if parts else "0 " + lp.names[0]

    out = ["\\ objective constant %.17g" % lp.c0, "Minimize", " obj: " + expr(lp.c, range(lp.n_vars)), "Subject To"]
    for A, b, names, op in ((lp.A_ub, lp.b_ub, lp.ub_rows, "<="), (lp.A_eq, lp.b_eq, lp.eq_rows, "=")):
        A = A.tocsr()
        for i in range(A.shape[0]):
            row = A.getrow(i)
            out.append(f" {names[i]}: {expr(row.data, row.indices)} {op} {b[i]:.17g}")
    out.append("Bounds")
    for j in range(lp.n_vars):
        lo = "-inf" if not np.isfinite(lp.lb[j]) else f"{lp.lb[j]:.17g}"
        hi = "+inf" if not np.isfinite(lp.ub[j]) else f"{lp.ub[j]:.17g}"
        out.append(f" {lo} <= {lp.names[j]} <= {hi}")
    ints = [lp.names[j] for j in np.flatnonzero(lp.integrality)]
    if ints:
        out.append("General")
        out.append(" " + " ".join(ints))
    out.append("End")
    Path(path).write_text("\n".join(out) + "\n")
