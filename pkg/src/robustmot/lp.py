"""Small linear-programming layer.

Every LP in the package goes through :func:`solve_lp`, which minimises
``c @ x`` subject to ``A_eq x = b_eq``, ``A_ub x <= b_ub`` and per-variable
bounds.  Two backends are available:

* ``"simplex"``: a dense two-phase primal simplex using Bland's rule.  This
  is the reference implementation; it also produces Farkas certificates
  directly from the phase-one duals.
* ``"highs"``: scipy's HiGHS interface, used as an independent cross-check
  and for instances where the dense tableau is too slow.

Both return duals with the same sign convention: ``eq_duals`` and
``ub_duals`` are the derivatives of the optimal value with respect to the
right-hand sides (so ``ub_duals <= 0`` for a minimisation).
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"

_DEFAULT_BACKEND = os.environ.get("ROBUSTMOT_LP_BACKEND", "auto")
# tableau cells above which "auto" hands the problem to HiGHS
_AUTO_SIMPLEX_CELLS = 400_000


class LPError(RuntimeError):
    """Raised when a backend fails for reasons other than infeasibility or unboundedness."""


@dataclass
class LPResult:
    status: str
    x: Optional[np.ndarray] = None
    value: Optional[float] = None
    eq_duals: Optional[np.ndarray] = None
    ub_duals: Optional[np.ndarray] = None
    # y = (y_eq, y_ub) with y_ub >= 0, y^T A >= 0 on nonnegative columns,
    # = 0 on free columns, and y^T b < 0.  Only set when infeasible.
    farkas: Optional[np.ndarray] = None
    backend: str = ""
    iterations: int = 0
    info: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


def _as2d(A, n, keep_sparse=False):
    if A is None:
        return np.zeros((0, n))
    if sparse.issparse(A):
        return sparse.csr_matrix(A, dtype=float) if keep_sparse else A.toarray().astype(float)
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        A = A.reshape(1, -1)
    return A


def _as1d(b, m):
    if b is None:
        return np.zeros(m)
    return np.asarray(b, dtype=float).reshape(-1)


def solve_lp(
    c,
    A_eq=None,
    b_eq=None,
    A_ub=None,
    b_ub=None,
    bounds: Optional[Sequence[tuple]] = None,
    backend: Optional[str] = None,
    tol: float = 1e-9,
    max_iter: int = 200_000,
) -> LPResult:
    """Minimise ``c @ x`` subject to equality, inequality and bound constraints.

    ``bounds`` is a list of ``(lo, hi)`` pairs with ``None`` meaning
    unbounded; the default is ``x >= 0`` for every variable.
    """
    c = np.asarray(c, dtype=float).reshape(-1)
    n = c.size
    backend = backend or _DEFAULT_BACKEND
    A_eq = _as2d(A_eq, n, keep_sparse=True)
    A_ub = _as2d(A_ub, n, keep_sparse=True)
    b_eq = _as1d(b_eq, A_eq.shape[0])
    b_ub = _as1d(b_ub, A_ub.shape[0])
    if bounds is None:
        bounds = [(0.0, None)] * n
    if len(bounds) != n:
        raise ValueError("bounds must have one entry per variable")
    if backend == "auto":
        rows = A_eq.shape[0] + A_ub.shape[0] + sum(1 for lo, hi in bounds if hi is not None)
        cols = 2 * n + 2 * rows
        backend = "simplex" if rows * cols <= _AUTO_SIMPLEX_CELLS else "highs"
    if backend == "simplex":
        A_eq = A_eq.toarray() if sparse.issparse(A_eq) else A_eq
        A_ub = A_ub.toarray() if sparse.issparse(A_ub) else A_ub
        return _solve_simplex(c, A_eq, b_eq, A_ub, b_ub, bounds, tol, max_iter)
    if backend == "highs":
        return _solve_highs(c, A_eq, b_eq, A_ub, b_ub, bounds, tol)
    raise ValueError(f"unknown LP backend {backend!r}")


# ---------------------------------------------------------------------------
# reference backend: dense tableau simplex with Bland's rule
# ---------------------------------------------------------------------------

def _standardise(c, A_eq, b_eq, A_ub, b_ub, bounds):
    """Rewrite as min c's z, A z = b, z >= 0.

    Returns the standard-form data plus a map back to the original
    variables (x = P z + shift) and the row bookkeeping needed for duals.
    """
    n = c.size
    cols = []  # (orig var, sign)
    shift = np.zeros(n)
    extra_ub_rows = []
    extra_ub_rhs = []
    for j, (lo, hi) in enumerate(bounds):
        if lo is None:
            cols.append((j, 1.0))
            cols.append((j, -1.0))
        elif lo == 0.0:
            cols.append((j, 1.0))
        else:
            # general finite lower bound: substitute x = lo + z
            shift[j] = lo
            cols.append((j, 1.0))
        if hi is not None:
            row = np.zeros(n)
            row[j] = 1.0
            extra_ub_rows.append(row)
            extra_ub_rhs.append(hi)
    if extra_ub_rows:
        A_ub_all = np.vstack([A_ub, np.array(extra_ub_rows)])
        b_ub_all = np.concatenate([b_ub, np.array(extra_ub_rhs)])
    else:
        A_ub_all, b_ub_all = A_ub, b_ub
    P = np.zeros((n, len(cols)))
    for k, (j, s) in enumerate(cols):
        P[j, k] = s
    m_eq, m_ub = A_eq.shape[0], A_ub_all.shape[0]
    nz = len(cols)
    A = np.zeros((m_eq + m_ub, nz + m_ub))
    A[:m_eq, :nz] = A_eq @ P
    A[m_eq:, :nz] = A_ub_all @ P
    A[m_eq:, nz:] = np.eye(m_ub)
    b = np.concatenate([b_eq - A_eq @ shift, b_ub_all - A_ub_all @ shift])
    cz = np.concatenate([P.T @ c, np.zeros(m_ub)])
    return A, b, cz, P, shift, m_eq, A_ub.shape[0], nz


class _Tableau:
    def __init__(self, A, b, tol):
        m, n = A.shape
        self.m, self.n = m, n
        self.tol = tol
        sign = np.where(b < 0, -1.0, 1.0)
        self.sign = sign
        T = np.zeros((m + 1, n + m + 1))
        T[:m, :n] = A * sign[:, None]
        T[:m, n : n + m] = np.eye(m)
        T[:m, -1] = b * sign
        self.T = T
        self.T0 = T[:m].copy()  # original rows, used to refactorise
        self.basis = np.arange(n, n + m)
        self.cost = np.zeros(n + m)
        self.iterations = 0
        self.refactor_every = max(50, m)

    def refactor(self):
        """Rebuild the tableau from the original rows and the current basis,
        which stops rounding drift from accumulating over many pivots."""
        m = self.m
        try:
            self.T[:m] = np.linalg.solve(self.T0[:, self.basis], self.T0)
        except np.linalg.LinAlgError:
            return
        rhs = self.T[:m, -1]
        rhs[(rhs < 0) & (rhs > -self.tol)] = 0.0
        self.set_cost(self.cost)

    def pivot(self, r, j):
        T = self.T
        T[r] /= T[r, j]
        col = T[:, j].copy()
        col[r] = 0.0
        T -= np.outer(col, T[r])
        self.basis[r] = j
        self.iterations += 1

    def run(self, allowed: np.ndarray, max_iter: int) -> str:
        """Bland's rule on the cost row; ``allowed`` masks entering columns."""
        T = self.T
        tol = self.tol
        m = self.m
        while True:
            if self.iterations > max_iter:
                raise LPError("simplex iteration limit reached")
            if self.iterations and self.iterations % self.refactor_every == 0:
                self.refactor()
            red = T[m, :-1]
            cand = np.flatnonzero((red < -tol) & allowed)
            if cand.size == 0:
                return OPTIMAL
            j = cand[0]
            col = T[:m, j]
            pos = col > tol
            if not pos.any():
                return UNBOUNDED
            ratios = np.full(m, np.inf)
            ratios[pos] = T[:m, -1][pos] / col[pos]
            best = ratios.min()
            ties = np.flatnonzero(ratios <= best + tol * max(1.0, abs(best)))
            r = ties[np.argmin(self.basis[ties])]
            self.pivot(r, j)

    def set_cost(self, cost):
        """Install a cost vector (length n + m) and price out the basis."""
        T = self.T
        m = self.m
        self.cost = cost
        T[m, :-1] = cost
        T[m, -1] = 0.0
        cb = cost[self.basis]
        T[m] -= cb @ T[:m]


def _solve_simplex(c, A_eq, b_eq, A_ub, b_ub, bounds, tol, max_iter) -> LPResult:
    A, b, cz, P, shift, m_eq, m_ub_orig, nz = _standardise(c, A_eq, b_eq, A_ub, b_ub, bounds)
    m, n = A.shape
    if m == 0:
        # only bounds: optimum at zero unless some cost is negative
        if (cz < -tol).any():
            return LPResult(UNBOUNDED, backend="simplex")
        x = P @ np.zeros(nz) + shift
        return LPResult(OPTIMAL, x=x, value=float(c @ x), eq_duals=np.zeros(0),
                        ub_duals=np.zeros(m_ub_orig), backend="simplex")
    scale = max(1.0, np.abs(A).max(initial=0.0), np.abs(b).max(initial=0.0))
    tab = _Tableau(A, b, tol)
    art = np.zeros(n + m, dtype=bool)
    art[n:] = True

    # phase one: minimise the sum of artificials
    phase1 = np.concatenate([np.zeros(n), np.ones(m)])
    tab.set_cost(phase1)
    tab.run(np.ones(n + m, dtype=bool), max_iter)
    infeas = -tab.T[m, -1]
    if infeas > tol * scale * max(1, m) ** 0.5:
        # phase-one duals: y1 = c_B B^{-1}; the artificial block holds B^{-1}
        y1 = phase1[n:] - tab.T[m, n : n + m]
        farkas = -y1 * tab.sign
        return LPResult(INFEASIBLE, farkas=farkas, backend="simplex",
                        iterations=tab.iterations, info={"phase1": infeas})

    # drive zero-level artificials out of the basis where possible
    for r in range(m):
        if tab.basis[r] >= n:
            row = tab.T[r, :n]
            nzj = np.flatnonzero(np.abs(row) > 1e-9)
            if nzj.size:
                tab.pivot(r, nzj[0])

    cost = np.concatenate([cz, np.zeros(m)])
    tab.set_cost(cost)
    status = tab.run(~art, max_iter)
    if status == UNBOUNDED:
        return LPResult(UNBOUNDED, backend="simplex", iterations=tab.iterations)

    # polish: recompute the basic solution and duals from the original data
    basis = tab.basis
    B = np.zeros((m, m))
    for k, j in enumerate(basis):
        if j < n:
            B[:, k] = A[:, j]
        else:
            B[j - n, k] = 1.0
    cb = cost[basis]
    try:
        xb = np.linalg.solve(B, b)
        y = np.linalg.solve(B.T, cb)
    except np.linalg.LinAlgError:
        xb = tab.T[:m, -1] * 1.0
        y = -(tab.T[m, n : n + m]) * tab.sign
    z = np.zeros(n + m)
    z[basis] = xb
    z = np.maximum(z, 0.0)
    zx = z[:nz]
    x = P @ zx + shift
    eq_duals = y[:m_eq]
    ub_duals = y[m_eq : m_eq + m_ub_orig]
    return LPResult(OPTIMAL, x=x, value=float(c @ x), eq_duals=eq_duals,
                    ub_duals=ub_duals, backend="simplex", iterations=tab.iterations)


# ---------------------------------------------------------------------------
# cross-check backend: scipy HiGHS
# ---------------------------------------------------------------------------

def _solve_highs(c, A_eq, b_eq, A_ub, b_ub, bounds, tol) -> LPResult:
    kw = {}
    if A_eq.shape[0]:
        kw["A_eq"], kw["b_eq"] = A_eq, b_eq
    if A_ub.shape[0]:
        kw["A_ub"], kw["b_ub"] = A_ub, b_ub
    res = linprog(c, bounds=list(bounds), method="highs",
                  options={"primal_feasibility_tolerance": 1e-10,
                           "dual_feasibility_tolerance": 1e-10}, **kw)
    if res.status == 0:
        eq = np.asarray(res.eqlin.marginals) if A_eq.shape[0] else np.zeros(0)
        ub = np.asarray(res.ineqlin.marginals) if A_ub.shape[0] else np.zeros(0)
        return LPResult(OPTIMAL, x=np.asarray(res.x), value=float(res.fun),
                        eq_duals=eq, ub_duals=ub, backend="highs",
                        iterations=int(getattr(res, "nit", 0)))
    if res.status == 2:
        y = farkas_certificate(A_eq, b_eq, A_ub, b_ub, bounds)
        return LPResult(INFEASIBLE, farkas=y, backend="highs")
    if res.status == 3:
        return LPResult(UNBOUNDED, backend="highs")
    raise LPError(f"HiGHS failed: {res.message}")


def farkas_certificate(A_eq, b_eq, A_ub, b_ub, bounds):
    """Find y = (y_eq, y_ub, y_hi) proving infeasibility, or None.

    Solves the alternative system: y_ub >= 0, y_hi >= 0 (for finite upper
    bounds), y^T A >= 0 on columns with lower bound 0 (after shifting finite
    lower bounds), = 0 on free columns, and y^T b = -1.
    """
    A_eq = A_eq.toarray() if sparse.issparse(A_eq) else A_eq
    A_ub = A_ub.toarray() if sparse.issparse(A_ub) else A_ub
    n = A_eq.shape[1] if A_eq.shape[0] else A_ub.shape[1]
    rows = [A_eq, A_ub]
    rhs = [b_eq, b_ub]
    shift = np.array([0.0 if lo is None else lo for lo, _ in bounds])
    hi_rows = []
    hi_rhs = []
    for j, (lo, hi) in enumerate(bounds):
        if hi is not None:
            r = np.zeros(n)
            r[j] = 1.0
            hi_rows.append(r)
            hi_rhs.append(hi)
    if hi_rows:
        rows.append(np.array(hi_rows))
        rhs.append(np.array(hi_rhs))
    A = np.vstack(rows)
    b = np.concatenate(rhs) - A @ shift
    m_eq = A_eq.shape[0]
    m = A.shape[0]
    ybounds = [(None, None)] * m_eq + [(0, None)] * (m - m_eq)
    # constraints on columns
    free = np.array([lo is None for lo, _ in bounds])
    A_ub2 = -A.T[~free]  # -(y^T A_j) <= 0
    A_eq2 = np.vstack([A.T[free], b.reshape(1, -1)])
    b_eq2 = np.concatenate([np.zeros(int(free.sum())), [-1.0]])
    res = linprog(np.zeros(m), A_ub=A_ub2 if A_ub2.size else None,
                  b_ub=np.zeros(A_ub2.shape[0]) if A_ub2.size else None,
                  A_eq=A_eq2, b_eq=b_eq2, bounds=ybounds, method="highs")
    if res.status != 0:
        return None
    return np.asarray(res.x)
