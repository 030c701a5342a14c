"""Finite lattice martingale optimal transport.

A ``LatticeModel`` enumerates every grid-valued path from the root (1, ..., 1)
on a finite time grid.  On that path set:

* ``primal_solve`` maximises E_q[G] over martingale measures q that
  (approximately) reprice the quoted options and charge the prediction set;
* ``dual_solve`` minimises the cost of a semi-static superhedge with
  path-dependent positions, either penalising paths by N * lambda or
  requiring domination only on a fattened prediction set.

Martingale constraints are imposed per history prefix (non-recombining),
matching path-dependent trading positions.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse

from .discretise import (PiecewiseConstantPath, Q, _frac, extend_payoff, is_member_Dhat,
                         lebesgue_partition)
from .lp import INFEASIBLE, OPTIMAL, UNBOUNDED, LPResult, solve_lp
from .marginals import DiscreteMarginal, bl_distance
from .paths import (ALL, AllPaths, GridPath, InfoSpace, PredictionSet,
                    set_distance)
from .payoffs import Payoff, call, put

DEFAULT_PATH_BUDGET = 200_000


class BudgetExceeded(RuntimeError):
    """The lattice has more paths than the configured budget."""


class DualityGapError(RuntimeError):
    """Primal and dual optimal values of the same LP disagree."""


class ConstructionError(RuntimeError):
    """No mean-preserving jump distribution exists at some node."""


# ---------------------------------------------------------------------------
# options and lattices
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuotedOption:
    payoff: Payoff
    price: float
    name: str = ""


def quoted_put(strike: float, price: float, asset: int = 0, maturity: Optional[float] = None) -> QuotedOption:
    return QuotedOption(put(strike, asset, maturity), float(price), f"put(K={strike},asset={asset},T={maturity})")


def quoted_call(strike: float, price: float, asset: int = 0, maturity: Optional[float] = None) -> QuotedOption:
    return QuotedOption(call(strike, asset, maturity), float(price), f"call(K={strike},asset={asset},T={maturity})")


def pinning_puts(mu: DiscreteMarginal, strikes: Sequence[float], asset: int = 0,
                 maturity: Optional[float] = None) -> List[QuotedOption]:
    """Puts at every strike priced under mu; on a grid containing mu's support
    these fix the marginal completely (given total mass one)."""
    return [quoted_put(float(K), float(mu.put(K)), asset, maturity) for K in strikes]


def _grid_list(grids, m, dim):
    """Check grids[k-1][i] (step-major) and convert to float arrays."""
    out = []
    for step in grids:
        if len(step) != dim:
            raise ValueError(f"each step needs {dim} coordinate grids, got {len(step)}")
        out.append([np.asarray(g, dtype=float).reshape(-1) for g in step])
    if len(out) != m:
        raise ValueError(f"expected grids for {m} steps, got {len(out)}")
    return out


class LatticeModel:
    """All grid-valued paths from the root on the time grid ``times``.

    ``grids[k-1][i]`` lists the values coordinate i may take at time
    ``times[k]``.  ``band`` (optional) bounds the max-coordinate move per
    step.  With continuously traded options (``info.K > 0``) only paths whose
    terminal option coordinates match their payoffs are kept.
    """

    def __init__(self, times: Sequence[float], grids, maturity_indices: Optional[Sequence[int]] = None,
                 info: Optional[InfoSpace] = None, band: Optional[float] = None,
                 budget: int = DEFAULT_PATH_BUDGET, dim: Optional[int] = None):
        self.times = np.asarray(times, dtype=float)
        m = self.times.size - 1
        if m < 1 or self.times[0] != 0 or np.any(np.diff(self.times) <= 0):
            raise ValueError("lattice times must increase from 0 with at least one step")
        if dim is None:
            dim = info.dim if info is not None else len(grids[0])
        self.dim = dim
        self.grids = _grid_list(grids, m, dim)
        for step in self.grids:
            if len(step) != dim:
                raise ValueError("every step needs one grid per coordinate")
            for g in step:
                if g.size == 0 or np.any(g < 0):
                    raise ValueError("grids must be nonempty and nonnegative")
        self.m = m
        self.maturity_indices = tuple(maturity_indices) if maturity_indices is not None else (m,)
        if any(not 1 <= k <= m for k in self.maturity_indices) or self.maturity_indices[-1] != m or \
                any(b <= a for a, b in zip(self.maturity_indices, self.maturity_indices[1:])):
            raise ValueError("maturity indices must be increasing, within the grid, and end at the horizon")
        self.info = info if info is not None else InfoSpace(dim, (), tuple(self.times[list(self.maturity_indices)]))
        if self.info.dim != dim:
            raise ValueError("information space dimension does not match the grids")
        self.band = band
        self.budget = budget
        self._paths = None
        self._prefix = None

    # -- enumeration -------------------------------------------------------
    def _successors(self, k: int) -> np.ndarray:
        return np.array(list(itertools.product(*self.grids[k - 1])), dtype=float).reshape(-1, self.dim)

    def _terminal_ok(self, pts: np.ndarray) -> np.ndarray:
        info = self.info
        if info.K == 0:
            return np.ones(pts.shape[0], dtype=bool)
        target = np.array([info.option_coordinates(x[: info.d]) for x in pts])
        return np.all(np.abs(pts[:, info.d :] - target) <= 1e-9, axis=1)

    def _allowed(self, cur: np.ndarray, succ: np.ndarray) -> np.ndarray:
        """Boolean matrix (len(cur), len(succ))."""
        if self.band is None:
            return np.ones((cur.shape[0], succ.shape[0]), dtype=bool)
        jump = np.abs(succ[None, :, :] - cur[:, None, :]).max(axis=2)
        return jump <= self.band + 1e-12

    def count_paths(self) -> int:
        nodes = {tuple(np.ones(self.dim)): 1}
        for k in range(1, self.m + 1):
            succ = self._successors(k)
            if k == self.m:
                succ = succ[self._terminal_ok(succ)]
            keys = list(nodes)
            cur = np.array(keys, dtype=float).reshape(-1, self.dim)
            allow = self._allowed(cur, succ)
            new = {}
            for a, key in enumerate(keys):
                for b in np.flatnonzero(allow[a]):
                    s = tuple(succ[b])
                    new[s] = new.get(s, 0) + nodes[key]
            nodes = new
        return int(sum(nodes.values()))

    @property
    def paths(self) -> np.ndarray:
        if self._paths is None:
            n = self.count_paths()
            if n > self.budget:
                raise BudgetExceeded(f"lattice has {n} paths, budget is {self.budget}")
            if n == 0:
                raise ValueError("lattice has no admissible path")
            P = np.ones((1, 1, self.dim))
            for k in range(1, self.m + 1):
                succ = self._successors(k)
                if k == self.m:
                    succ = succ[self._terminal_ok(succ)]
                allow = self._allowed(P[:, -1, :], succ)
                ia, ib = np.nonzero(allow)
                P = np.concatenate([P[ia], succ[ib][:, None, :]], axis=1)
            P.setflags(write=False)
            self._paths = P
        return self._paths

    @property
    def n_paths(self) -> int:
        return self.paths.shape[0]

    def grid_path(self, i: int) -> GridPath:
        return GridPath(self.times, self.paths[i])

    def grid_paths(self) -> List[GridPath]:
        return [self.grid_path(i) for i in range(self.n_paths)]

    def prefix_ids(self, k: int) -> Tuple[np.ndarray, int]:
        """Class index of every path's history up to time index k, and the class count."""
        if self._prefix is None:
            P = self.paths
            n = P.shape[0]
            out = []
            for j in range(self.m):
                _, inv = np.unique(P[:, : j + 1, :].reshape(n, -1), axis=0, return_inverse=True)
                inv = inv.reshape(-1)
                out.append((inv, int(inv.max()) + 1))
            self._prefix = out
        return self._prefix[k]

    def increments(self) -> np.ndarray:
        """(n_paths, m, dim) array of S_{k+1} - S_k."""
        return np.diff(self.paths, axis=1)

    def payoff_values(self, G: Union[Payoff, np.ndarray, Sequence[float]]) -> np.ndarray:
        if isinstance(G, Payoff):
            return G.evaluate_lattice(self.times, self.paths)
        g = np.asarray(G, dtype=float).reshape(-1)
        if g.size != self.n_paths:
            raise ValueError("payoff vector length does not match the path count")
        return g

    def distances(self, pset: PredictionSet, bound: str = "lower") -> np.ndarray:
        if isinstance(pset, AllPaths):
            return np.zeros(self.n_paths)
        return np.array([set_distance(pset, self.grid_path(i), bound) for i in range(self.n_paths)])

    def maturity_time(self, j: int) -> float:
        return float(self.times[self.maturity_indices[j]])


def _option_matrix(model: LatticeModel, options: Sequence[QuotedOption]) -> Tuple[np.ndarray, np.ndarray]:
    if not options:
        return np.zeros((0, model.n_paths)), np.zeros(0)
    X = np.vstack([model.payoff_values(o.payoff) for o in options])
    P = np.array([o.price for o in options], dtype=float)
    return X, P


def _martingale_rows(model: LatticeModel) -> sparse.csr_matrix:
    """Rows sum_{w in h} q(w) (S_{k+1}(w) - S_k(h)) for every prefix h and coordinate."""
    inc = model.increments()
    n = model.n_paths
    blocks = []
    for k in range(model.m):
        ids, cnt = model.prefix_ids(k)
        for i in range(model.dim):
            vals = inc[:, k, i]
            M = sparse.csr_matrix((vals, (ids, np.arange(n))), shape=(cnt, n))
            blocks.append(M)
    A = sparse.vstack(blocks).tocsr()
    A.eliminate_zeros()
    # drop empty rows (prefixes whose children all share the parent's value)
    keep = np.diff(A.indptr) > 0
    return A[keep]


# ---------------------------------------------------------------------------
# primal
# ---------------------------------------------------------------------------

@dataclass
class MartingaleLPSolution:
    status: str
    value: Optional[float]
    weights: Optional[np.ndarray]
    certificate: Optional[np.ndarray] = None
    lp: Optional[LPResult] = None
    notes: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL

    def measure(self, tol: float = 0.0) -> Dict[int, float]:
        """path index -> probability (entries above tol)."""
        if self.weights is None:
            return {}
        return {i: float(w) for i, w in enumerate(self.weights) if w > tol}


def primal_solve(model: LatticeModel, G, options: Sequence[QuotedOption] = (),
                 pset: PredictionSet = ALL, eta: float = 0.0, backend: Optional[str] = None,
                 distance_bound: str = "lower") -> MartingaleLPSolution:
    """max sum_w q(w) G(w) over calibrated lattice martingale measures.

    Option prices are matched to within eta (exactly when eta = 0) and the
    mass outside the eta-fattened prediction set is at most eta.
    """
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    g = model.payoff_values(G)
    n = model.n_paths
    X, P = _option_matrix(model, options)
    eq_rows = [sparse.csr_matrix(np.ones((1, n)))]
    eq_rhs = [np.ones(1)]
    mart = _martingale_rows(model)
    eq_rows.append(mart)
    eq_rhs.append(np.zeros(mart.shape[0]))
    ub_rows, ub_rhs = [], []
    if X.shape[0]:
        if eta == 0:
            eq_rows.append(sparse.csr_matrix(X))
            eq_rhs.append(P)
        else:
            ub_rows += [sparse.csr_matrix(X), sparse.csr_matrix(-X)]
            ub_rhs += [P + eta, -(P - eta)]
    notes = []
    if not isinstance(pset, AllPaths):
        dist = model.distances(pset, distance_bound)
        outside = dist > eta
        if outside.any():
            ub_rows.append(sparse.csr_matrix(outside.astype(float).reshape(1, -1)))
            ub_rhs.append(np.array([eta]))
    A_eq = sparse.vstack(eq_rows).tocsr()
    b_eq = np.concatenate(eq_rhs)
    A_ub = sparse.vstack(ub_rows).tocsr() if ub_rows else None
    b_ub = np.concatenate(ub_rhs) if ub_rows else None
    res = solve_lp(-g, A_eq, b_eq, A_ub, b_ub, backend=backend)
    if res.status == OPTIMAL:
        q = np.maximum(res.x, 0.0)
        if eta > 0 and X.shape[0] and np.any(np.abs(X @ q - P) >= eta - 1e-12):
            notes.append("calibration constraint active at the eta boundary (strict inequality relaxed)")
        return MartingaleLPSolution(OPTIMAL, float(-res.value), q, None, res, notes)
    if res.status == INFEASIBLE:
        return MartingaleLPSolution(INFEASIBLE, None, None, res.farkas, res)
    return MartingaleLPSolution(res.status, None, None, None, res)


# ---------------------------------------------------------------------------
# dual
# ---------------------------------------------------------------------------

@dataclass
class SuperhedgeLPSolution:
    status: str
    value: Optional[float]
    a0: Optional[float] = None
    static: Optional[np.ndarray] = None  # net coefficient per quoted option
    positions: Optional[np.ndarray] = None  # (n_paths, m, dim) position held over (u_k, u_{k+1}]
    slacks: Optional[np.ndarray] = None  # per path; nan for paths out of scope
    scope: Optional[np.ndarray] = None
    certificate: Optional[np.ndarray] = None
    lp: Optional[LPResult] = None

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL

    @property
    def worst_slack(self) -> float:
        if self.slacks is None:
            return float("nan")
        s = self.slacks[self.scope]
        return float(s.min()) if s.size else float("inf")


def rebalance_mask(model: LatticeModel, mesh_N: int) -> np.ndarray:
    """allowed[w, k]: may positions change at lattice time u_k on path w?

    Time 0 is always allowed.  Later, rebalancing at u_k needs a Lebesgue
    time of some mesh 2^-N', N' <= mesh_N, in (u_{k-1}, u_k]; taking the union
    over coarser meshes makes the allowed sets grow with mesh_N.
    """
    n, m = model.n_paths, model.m
    allowed = np.zeros((n, m), dtype=bool)
    allowed[:, 0] = True
    u = [Fraction(float(t)) for t in model.times]
    for w in range(n):
        gp = GridPath(model.times, model.paths[w], normalised=False)
        hits = set()
        for Np in range(1, mesh_N + 1):
            for tau in lebesgue_partition(gp, Np).taus[1:]:
                hits.add(tau)
        ts = sorted(hits)
        for k in range(1, m):
            lo, hi = u[k - 1], u[k]
            allowed[w, k] = any(lo < t <= hi for t in ts)
    return allowed


def _position_variables(model: LatticeModel, allowed: Optional[np.ndarray]):
    """Map (path, step k) -> index of the position variable vector (dim entries each)."""
    n, m = model.n_paths, model.m
    var = np.empty((n, m), dtype=np.int64)
    keys: Dict[Tuple[int, int], int] = {}
    for k in range(m):
        ids, _ = model.prefix_ids(k)
        for w in range(n):
            if allowed is None or allowed[w, k]:
                key = (k, int(ids[w]))
                if key not in keys:
                    keys[key] = len(keys)
                var[w, k] = keys[key]
            else:
                var[w, k] = var[w, k - 1]
    return var, len(keys)


def dual_solve(model: LatticeModel, G, options: Sequence[QuotedOption] = (),
               pset: PredictionSet = ALL, penalty_N: Optional[float] = None,
               eps: Optional[float] = None, eta: float = 0.0, backend: Optional[str] = None,
               distance_bound: str = "upper", rebalance: Optional[np.ndarray] = None) -> SuperhedgeLPSolution:
    """min a_0 + sum_X a_X P(X) over semi-static lattice superhedges.

    Penalty mode (``penalty_N`` given): dominate G - N * lambda on every path.
    Hard mode: dominate G on paths in the eps-fattened set (eps defaults to
    eta).  With eta > 0 the dual matches the eta-relaxed primal exactly:
    each |a_X| costs eta, and in hard mode paths outside the set may fall
    short by a common amount z >= 0 that costs eta.
    ``rebalance`` (n_paths, m) restricts when positions may change.
    Distances default to the oracle's upper bound so that the hedge is safe;
    pass ``distance_bound="lower"`` to match the primal's path scope.
    """
    if eta < 0 or (penalty_N is not None and penalty_N < 0):
        raise ValueError("eta and penalty_N must be nonnegative")
    g = model.payoff_values(G)
    n, m, dim = model.n_paths, model.m, model.dim
    X, P = _option_matrix(model, options)
    nx = X.shape[0]
    inc = model.increments()
    var, nv = _position_variables(model, rebalance)

    if penalty_N is not None:
        lam = np.minimum(1.0, model.distances(pset, distance_bound))
        target = g - penalty_N * lam
        scope = np.ones(n, dtype=bool)
        soft = np.zeros(n, dtype=bool)
    else:
        e = eta if eps is None else eps
        if isinstance(pset, AllPaths):
            scope = np.ones(n, dtype=bool)
        else:
            scope = model.distances(pset, distance_bound) <= e
        target = g
        soft = (~scope) if (eta > 0 and not isinstance(pset, AllPaths)) else np.zeros(n, dtype=bool)

    # variable layout: a0 | a+ (nx) | a- (nx, only when eta > 0) | delta (nv*dim) | z
    split = eta > 0
    na = nx * (2 if split else 1)
    use_z = bool(soft.any())
    off = 1 + na
    nvar = off + nv * dim + (1 if use_z else 0)
    c = np.zeros(nvar)
    c[0] = 1.0
    c[1 : 1 + nx] = P + eta
    if split:
        c[1 + nx : off] = -(P - eta)
    if use_z:
        c[-1] = eta

    rows = np.flatnonzero(scope | soft)
    R = rows.size
    # -(a0 + X a + sum_k delta . dS) [- z on soft rows] <= -target
    blocks = [sparse.csr_matrix(-np.ones((R, 1)))]
    if nx:
        Xr = X[:, rows].T
        blocks.append(sparse.csr_matrix(-Xr))
        if split:
            blocks.append(sparse.csr_matrix(Xr))
    if nv:
        ri = np.repeat(np.arange(R), m * dim)
        ci = (var[rows][:, :, None] * dim + np.arange(dim)[None, None, :]).reshape(-1)
        vv = -inc[rows].reshape(-1)
        blocks.append(sparse.csr_matrix((vv, (ri, ci)), shape=(R, nv * dim)))
    if use_z:
        blocks.append(sparse.csr_matrix(-soft[rows].astype(float).reshape(-1, 1)))
    A_ub = sparse.hstack(blocks).tocsr()
    A_ub.eliminate_zeros()
    b_ub = -target[rows]
    bounds = [(None, None)] + ([(0.0, None)] * na if split else [(None, None)] * nx)
    bounds += [(None, None)] * (nv * dim)
    if use_z:
        bounds.append((0.0, None))
    res = solve_lp(c, A_ub=A_ub, b_ub=b_ub, bounds=bounds, backend=backend)
    if res.status != OPTIMAL:
        cert = None
        if res.status == UNBOUNDED:
            pr = primal_solve(model, g, options, pset, eta, backend=backend, distance_bound=distance_bound)
            cert = pr.certificate
        return SuperhedgeLPSolution(res.status, None, certificate=cert, lp=res)
    x = res.x
    a0 = float(x[0])
    static = x[1 : 1 + nx] - x[1 + nx : off] if split else x[1 : 1 + nx]
    delta = x[off : off + nv * dim].reshape(nv, dim) if nv else np.zeros((0, dim))
    positions = delta[var] if nv else np.zeros((n, m, dim))
    gains = np.einsum("wki,wki->w", positions, inc)
    lhs = a0 + static @ X + gains
    slack = np.full(n, np.nan)
    slack[scope] = (lhs - target)[scope]
    return SuperhedgeLPSolution(OPTIMAL, float(res.value), a0, static, positions, slack, scope, None, res)


# ---------------------------------------------------------------------------
# sweeps and reports
# ---------------------------------------------------------------------------

def penalty_sweep(model: LatticeModel, G, options: Sequence[QuotedOption], pset: PredictionSet,
                  N_list: Sequence[float], eta: float = 0.0, backend: Optional[str] = None,
                  distance_bound: str = "upper") -> List[float]:
    """Penalty-mode dual values for each N (nonincreasing in N)."""
    if any(b <= a for a, b in zip(N_list, N_list[1:])):
        raise ValueError("N_list must be increasing")
    g = model.payoff_values(G)
    out = []
    for N in N_list:
        sol = dual_solve(model, g, options, pset, penalty_N=N, eta=eta, backend=backend,
                         distance_bound=distance_bound)
        out.append(sol.value if sol.ok else (-math.inf if sol.status == UNBOUNDED else math.nan))
    return out


@dataclass
class GapRow:
    eta: float
    primal_status: str
    primal: Optional[float]
    dual_status: str
    dual: Optional[float]
    penalty_N: Optional[float]
    penalty_dual: Optional[float]

    @property
    def gap(self) -> Optional[float]:
        if self.primal is None or self.dual is None:
            return None
        return self.dual - self.primal


@dataclass
class DualityReport:
    rows: List[GapRow]

    @property
    def first_feasible_eta(self) -> Optional[float]:
        for r in self.rows:
            if r.primal_status == OPTIMAL:
                return r.eta
        return None

    @property
    def transitions(self) -> List[float]:
        """eta values at which primal feasibility switches on."""
        out = []
        prev = None
        for r in self.rows:
            feas = r.primal_status == OPTIMAL
            if prev is False and feas:
                out.append(r.eta)
            prev = feas
        return out


def default_penalty_N(eta: float) -> Optional[float]:
    return None if eta <= 0 else float(math.ceil(1.0 / eta))


def duality_gap(model: LatticeModel, G, options: Sequence[QuotedOption], pset: PredictionSet,
                eta_schedule: Sequence[float], penalty_N_of_eta: Callable[[float], Optional[float]] = default_penalty_N,
                tol: float = 1e-6, backend: Optional[str] = None) -> DualityReport:
    """Primal, hard-mode dual (same scope) and penalty dual for each eta.

    Raises DualityGapError if primal and hard-mode dual are both optimal and
    differ by more than ``tol``.
    """
    g = model.payoff_values(G)
    rows = []
    for eta in eta_schedule:
        pr = primal_solve(model, g, options, pset, eta, backend=backend)
        du = dual_solve(model, g, options, pset, eta=eta, backend=backend, distance_bound="lower")
        N = penalty_N_of_eta(eta)
        pen = None
        if N is not None:
            ps = dual_solve(model, g, options, pset, penalty_N=N, eta=eta, backend=backend,
                            distance_bound="lower")
            pen = ps.value if ps.ok else None
        row = GapRow(eta, pr.status, pr.value, du.status, du.value, N, pen)
        if row.gap is not None and abs(row.gap) > tol:
            raise DualityGapError(f"eta={eta}: primal {pr.value} vs dual {du.value}")
        rows.append(row)
    return DualityReport(rows)


# ---------------------------------------------------------------------------
# eta-membership
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EtaMembership:
    member: bool
    radius: float
    calibration_error: float
    outside_mass: float


def _outside_mass(q: np.ndarray, dist: np.ndarray, eta: float) -> float:
    return float(q[dist > eta].sum())


def _radius(q: np.ndarray, dist: np.ndarray, calib: float) -> float:
    """inf{eta >= calib : q(dist > eta) <= eta}.  q(dist > .) is a right-continuous
    step function dropping at the distinct distances."""
    levels = np.unique(np.concatenate([[0.0], dist]))
    for a, b in zip(levels, list(levels[1:]) + [np.inf]):
        mass = _outside_mass(q, dist, a)
        cand = max(a, calib, mass)
        if cand < b:
            return float(cand)
    return float(max(calib, levels[-1]))


def eta_membership(model: LatticeModel, q, options: Sequence[QuotedOption], pset: PredictionSet,
                   eta: float, distance_bound: str = "lower") -> EtaMembership:
    """Strict membership: every option mispriced by less than eta and
    q(eta-fattened set) > 1 - eta.  ``radius`` is the infimum of such eta."""
    q = np.asarray(q, dtype=float)
    X, P = _option_matrix(model, options)
    calib = float(np.abs(X @ q - P).max()) if X.shape[0] else 0.0
    dist = model.distances(pset, distance_bound)
    out = _outside_mass(q, dist, eta)
    member = calib < eta and out < eta
    return EtaMembership(member, _radius(q, dist, calib), calib, out)


def lattice_marginal(model: LatticeModel, q, asset: int, time_index: int) -> DiscreteMarginal:
    q = np.asarray(q, dtype=float)
    vals = model.paths[:, time_index, asset]
    acc: Dict[float, float] = {}
    for v, w in zip(vals, q):
        if w > 0:
            acc[float(v)] = acc.get(float(v), 0.0) + float(w)
    pts = sorted(acc)
    tot = sum(acc.values())
    return DiscreteMarginal(tuple(pts), tuple(acc[x] / tot for x in pts))


@dataclass(frozen=True)
class MarginalMembership:
    member: bool
    terminal_match: bool
    distances: Dict[Tuple[int, int], float]
    outside_mass: float


def _same_law(a: DiscreteMarginal, b: DiscreteMarginal, tol: float) -> bool:
    pa = dict(zip(map(float, a.support), map(float, a.probs)))
    pb = dict(zip(map(float, b.support), map(float, b.probs)))
    return all(abs(pa.get(x, 0.0) - pb.get(x, 0.0)) <= tol for x in set(pa) | set(pb))


def marginal_eta_membership(model: LatticeModel, q, mus: Dict[Tuple[int, int], DiscreteMarginal],
                            pset: PredictionSet, eta: float, tol: float = 1e-9,
                            distance_bound: str = "lower") -> MarginalMembership:
    """``mus[(asset, j)]`` is the target law of asset at the j-th maturity.

    Terminal marginals must match (within ``tol``), intermediate ones within
    eta in the bounded-Lipschitz metric, and q(eta-fattened set) >= 1 - eta.
    """
    q = np.asarray(q, dtype=float)
    last = len(model.maturity_indices) - 1
    term_ok = True
    dists = {}
    for (i, j), mu in mus.items():
        law = lattice_marginal(model, q, i, model.maturity_indices[j])
        if j == last:
            term_ok &= _same_law(law, mu, tol)
        else:
            dists[(i, j)] = bl_distance(law, mu)
    out = _outside_mass(q, model.distances(pset, distance_bound), eta)
    member = term_ok and all(v <= eta + 1e-12 for v in dists.values()) and out <= eta
    return MarginalMembership(member, term_ok, dists, out)


# ---------------------------------------------------------------------------
# superhedging on the countable path class with a drift penalty
# ---------------------------------------------------------------------------

@dataclass
class DiscretePrior:
    """Finitely many piecewise-constant paths with exact probabilities."""

    paths: List[PiecewiseConstantPath]
    probs: List[Fraction]
    grid: Tuple = ()  # the allowed jump times used to build it

    def martingale_residual(self) -> Fraction:
        """Largest |sum_{w in h} p(w) (X_{s'} - X_s)| over histories h on the
        allowed-time grid (exact)."""
        times = [Fraction(0)] + [Fraction(t) for t in self.grid] if self.grid else \
            sorted({Fraction(t) for f in self.paths for t in f.jump_times})
        worst = Fraction(0)
        for a in range(len(times) - 1):
            groups: Dict[tuple, List[int]] = {}
            for w, f in enumerate(self.paths):
                key = tuple(f.at(t) for t in times[: a + 1])
                groups.setdefault(key, []).append(w)
            for members in groups.values():
                dim = self.paths[members[0]].dim
                for i in range(dim):
                    s = sum(self.probs[w] * (self.paths[w].at(times[a + 1])[i] - self.paths[w].at(times[a])[i])
                            for w in members)
                    worst = max(worst, abs(s))
        return worst


def build_full_support_prior(N: int, max_jumps: int, allowed_times: Sequence, info: Optional[InfoSpace] = None,
                             max_increment: int = 1, d: int = 1, horizon=None,
                             max_paths: int = 100_000) -> DiscretePrior:
    """A martingale measure charging every path of a truncated discretised class.

    At each allowed time (increasing) a path that has made k < max_jumps jumps
    draws an increment per coordinate, uniformly from
    {j / 2^{N+k+1} : |j| <= max_increment}; an all-zero draw means no jump.  Coordinates at the floor -2^{-N+3} (or, for option
    coordinates, at the cap kappa + 1) are absorbed.  Near a bound the
    symmetric range is shrunk so the draw stays mean zero and in range.
    """
    dim = info.dim if info is not None else d
    dd = info.d if info is not None else dim
    cap = (_frac(info.kappa) + 1) if info is not None else None
    floor = -Fraction(8, 2 ** N)
    ts = sorted(_frac(t) for t in allowed_times)
    T = _frac(horizon) if horizon is not None else (_frac(info.horizon) if info is not None else _frac(1))
    if any(t <= 0 or t >= T for t in ts):
        raise ValueError("allowed times must lie strictly inside (0, T)")
    if max_jumps < 0:
        raise ValueError("max_jumps must be nonnegative")
    one = tuple(_frac(1) for _ in range(dim))
    # state: (jump times, values, prob)
    states = [((Q(0),), (one,), Fraction(1))]
    for s in ts:
        nxt = []
        for jt, vals, pr in states:
            k = len(jt) - 1
            v = vals[-1]
            absorbed = any(x == floor for x in v) or (cap is not None and any(x == cap for x in v[dd:]))
            if k >= max_jumps or absorbed:
                nxt.append((jt, vals, pr))
                continue
            unit = Fraction(1, 2 ** (N + k + 1))
            choices = []
            for i, x in enumerate(v):
                room = max_increment
                down = (Fraction(x) - floor) / unit
                room = min(room, math.floor(down))
                if cap is not None and i >= dd:
                    up = (cap - Fraction(x)) / unit
                    room = min(room, math.floor(up))
                if room <= 0:
                    at_bound = x == floor or (cap is not None and i >= dd and x == cap)
                    if not at_bound:
                        raise ConstructionError(
                            f"no mean-preserving jump at time {s}, value {tuple(map(str, v))}, coordinate {i}")
                    room = 0
                choices.append([j * unit for j in range(-room, room + 1)])
            sizes = [len(c) for c in choices]
            for combo in itertools.product(*choices):
                p = pr
                for sz in sizes:
                    p = p / sz
                if all(x == 0 for x in combo):
                    nxt.append((jt, vals, p))
                else:
                    newv = tuple(Q(a + b) for a, b in zip(v, combo))
                    nxt.append((jt + (Q(s),), vals + (newv,), p))
        # merge identical states (zero draws at different times coincide)
        merged: Dict[tuple, Fraction] = {}
        for jt, vals, p in nxt:
            merged[(jt, vals)] = merged.get((jt, vals), Fraction(0)) + p
        states = [(jt, vals, p) for (jt, vals), p in merged.items()]
        if len(states) > max_paths:
            raise BudgetExceeded(f"prior has more than {max_paths} paths")
    paths = [PiecewiseConstantPath(jt, vals, T, N) for jt, vals, _ in states]
    probs = [p for _, _, p in states]
    prior = DiscretePrior(paths, probs, tuple(ts))
    for f in paths:
        res = is_member_Dhat(f, info, N)
        if not res.ok:
            raise ConstructionError(f"constructed path violates condition {res.condition}: {res.reason}")
    if prior.martingale_residual() != 0:
        raise ConstructionError("constructed prior is not a martingale")
    return prior


@dataclass(frozen=True)
class PenalisedDuality:
    hedge_value: float
    penalised_value: float

    @property
    def gap(self) -> float:
        return self.hedge_value - self.penalised_value


def _jump_nodes(support: Sequence[PiecewiseConstantPath]):
    """(path, jump k) -> node id, keyed by (v_0..v_{k-1}, t_1..t_k): the
    history plus the time of the upcoming jump."""
    nodes: Dict[tuple, int] = {}
    entries = []
    for w, f in enumerate(support):
        for k in range(1, f.n_segments):
            key = (f.values[:k], f.jump_times[1 : k + 1])
            if key not in nodes:
                nodes[key] = len(nodes)
            inc = tuple(float(a - b) for a, b in zip(f.values[k], f.values[k - 1]))
            entries.append((w, nodes[key], inc))
    return nodes, entries


def discrete_superhedge_penalised(support: Sequence[PiecewiseConstantPath], prior: Optional[Sequence] = None,
                                  G_hat=None, bound_N: float = 0.0, info: Optional[InfoSpace] = None,
                                  tol: float = 1e-6, backend: Optional[str] = None) -> PenalisedDuality:
    """Superhedging price on a finite support with positions bounded by N, and
    the drift-penalised sup over measures on the same support.

    Left: min x s.t. x + sum_k g_k . (v_k - v_{k-1}) >= G_hat on every path,
    |g| <= N, where g_k depends on the history and the time of jump k.
    Right: max sum q G_hat - N sum_{nodes, i} |sum_{w in node} q(w) dv^i(w)|.
    """
    support = list(support)
    if not support:
        raise ValueError("support must be nonempty")
    if prior is not None:
        if len(prior) != len(support) or any(p <= 0 for p in prior):
            raise ValueError("prior must charge every support element")
    if G_hat is None:
        raise ValueError("a payoff is required")
    if isinstance(G_hat, Payoff):
        g = np.array([extend_payoff(G_hat, f, info) for f in support])
    else:
        g = np.array([float(G_hat(f)) for f in support])
    n = len(support)
    dim = support[0].dim
    nodes, entries = _jump_nodes(support)
    nn = len(nodes)

    # left: variables x | gamma (nn*dim) in [-N, N]
    nvar = 1 + nn * dim
    A = np.zeros((n, nvar))
    A[:, 0] = -1.0
    for w, h, inc in entries:
        for i in range(dim):
            A[w, 1 + h * dim + i] -= inc[i]
    c = np.zeros(nvar)
    c[0] = 1.0
    bounds = [(None, None)] + [(-bound_N, bound_N)] * (nn * dim)
    left = solve_lp(c, A_ub=A, b_ub=-g, bounds=bounds, backend=backend)

    # right: variables q (n) | t (nn*dim) >= 0
    nvar2 = n + nn * dim
    c2 = np.zeros(nvar2)
    c2[:n] = -g
    c2[n:] = bound_N
    rows = np.zeros((2 * nn * dim, nvar2))
    for w, h, inc in entries:
        for i in range(dim):
            r = h * dim + i
            rows[2 * r, w] += inc[i]
            rows[2 * r + 1, w] -= inc[i]
    for r in range(nn * dim):
        rows[2 * r, n + r] = -1.0
        rows[2 * r + 1, n + r] = -1.0
    A_eq = np.zeros((1, nvar2))
    A_eq[0, :n] = 1.0
    right = solve_lp(c2, A_eq=A_eq, b_eq=[1.0], A_ub=rows if nn else None,
                     b_ub=np.zeros(2 * nn * dim) if nn else None, backend=backend)
    if not (left.ok and right.ok):
        raise RuntimeError(f"penalised duality LPs failed: {left.status}, {right.status}")
    out = PenalisedDuality(float(left.value), float(-right.value))
    if abs(out.gap) > tol:
        raise DualityGapError(f"hedge {out.hedge_value} vs penalised {out.penalised_value}")
    return out
