"""Pathwise semi-static strategies.

A dynamic rule maps a path to a rebalancing schedule: times
0 = r_0 < r_1 < ... and positions, ``positions[j]`` being held on
(r_j, r_{j+1}] (the last one up to the horizon).  The position held over
(r_j, r_{j+1}] may only depend on the path up to r_j.  Integrals against
such rules are finite sums, so they are exact up to floating point.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from .discretise import Q, _frac, hat_pipeline
from .paths import ALL, ContractError, GridPath, InfoSpace, PredictionSet, in_fattened_set
from .payoffs import Clipped, Payoff

INTEGRAL_AGREEMENT_TOL = 1e-12


@dataclass(frozen=True)
class Schedule:
    times: np.ndarray  # rebalance times, starting at 0
    positions: np.ndarray  # (len(times), dim)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float).reshape(-1)
        x = np.asarray(self.positions, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if t.size == 0 or t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise ContractError("rebalance times must increase strictly from 0")
        if x.shape[0] != t.size:
            raise ContractError("one position per rebalance time is required")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "positions", x)

    def position_at(self, t: float) -> np.ndarray:
        """Position held at time t: positions[j] for t in (r_j, r_{j+1}]; at t = 0 the initial one."""
        j = max(int(np.searchsorted(self.times, t, side="left")) - 1, 0)
        return self.positions[j]


class DynamicRule:
    """Base class for adapted piecewise-constant trading rules."""

    def schedule(self, p: GridPath) -> Schedule:
        raise NotImplementedError

    def position_at(self, p: GridPath, t: float) -> np.ndarray:
        return self.schedule(p).position_at(t)


class ConstantRule(DynamicRule):
    def __init__(self, position):
        self.position = np.atleast_1d(np.asarray(position, dtype=float))

    def schedule(self, p):
        if self.position.size == 1 and p.dim > 1:
            pos = np.full(p.dim, self.position[0])
        else:
            pos = self.position
        return Schedule(np.zeros(1), pos.reshape(1, -1))


class StepRule(DynamicRule):
    """Deterministic positions switched at fixed times."""

    def __init__(self, times: Sequence[float], positions):
        self._s = Schedule(times, positions)

    def schedule(self, p):
        keep = self._s.times < p.horizon
        return Schedule(self._s.times[keep], self._s.positions[keep])


class FunctionRule(DynamicRule):
    """Wraps a user function path -> Schedule.  Adaptedness is the caller's
    responsibility; ``prefix_test`` checks it empirically."""

    def __init__(self, fn: Callable[[GridPath], Schedule]):
        self.fn = fn

    def schedule(self, p):
        s = self.fn(p)
        return s if isinstance(s, Schedule) else Schedule(*s)


class LatticeRule(DynamicRule):
    """Positions indexed by lattice history: ``table[(k, history)]`` is held on
    (u_k, u_{k+1}], history = values at u_0..u_k (flattened tuple)."""

    def __init__(self, times: Sequence[float], table: Dict[Tuple[int, tuple], np.ndarray], dim: int):
        self.times = np.asarray(times, dtype=float)
        self.table = table
        self.dim = dim

    @classmethod
    def from_positions(cls, times, paths: np.ndarray, positions: np.ndarray) -> "LatticeRule":
        table = {}
        n, m1, dim = paths.shape
        for w in range(n):
            for k in range(m1 - 1):
                key = (k, tuple(paths[w, : k + 1].reshape(-1).tolist()))
                table[key] = np.array(positions[w, k], dtype=float)
        return cls(times, table, dim)

    def schedule(self, p):
        if p.horizon != self.times[-1]:
            raise ContractError("path horizon differs from the lattice")
        vals = p.on_grid(self.times)
        pos = []
        for k in range(self.times.size - 1):
            key = (k, tuple(vals[: k + 1].reshape(-1).tolist()))
            if key not in self.table:
                raise ContractError(f"history at lattice step {k} is not in the table")
            pos.append(self.table[key])
        return Schedule(self.times[:-1], np.array(pos))


class TabulatedRule(DynamicRule):
    """Per-path schedules keyed by path id (used for strategies read from CSV).
    Adaptedness across paths is not checked."""

    def __init__(self, schedules: Dict[int, Schedule], key: Callable[[GridPath], int]):
        self.schedules = schedules
        self.key = key

    def schedule(self, p):
        k = self.key(p)
        if k not in self.schedules:
            raise ContractError(f"no schedule for path {k}")
        return self.schedules[k]


@dataclass
class SemiStaticStrategy:
    """a_0 in cash, a_i units of each quoted option, and a dynamic rule.

    ``cost`` is a_0 + sum a_i P(X_i); the terminal wealth is
    a_0 + sum a_i X_i(S) + int gamma dS.  (M, growth_p) is the admissibility
    floor; growth_p = 0 encodes the bounded floor.
    """

    a0: float
    static: Sequence[Tuple[object, float]] = ()  # (QuotedOption, coefficient)
    rule: Optional[DynamicRule] = None
    M: float = 0.0
    growth_p: float = 0.0

    @property
    def cost(self) -> float:
        return float(self.a0 + sum(c * o.price for o, c in self.static))

    def static_payoff(self, p: GridPath) -> float:
        return float(self.a0 + sum(c * o.payoff.evaluate(p) for o, c in self.static))

    def wealth(self, p: GridPath) -> float:
        gain = pathwise_integral(self.rule, p, p.horizon) if self.rule is not None else 0.0
        return self.static_payoff(p) + gain


# ---------------------------------------------------------------------------
# integrals
# ---------------------------------------------------------------------------

def _integral_terms(s: Schedule, p: GridPath, t: float) -> Tuple[float, float]:
    r = s.times[s.times < t]
    pos = s.positions[: r.size]
    if r.size == 0:
        return 0.0, 0.0
    ends = np.append(r[1:], t)
    S_r = p.on_grid(r)
    S_e = p.on_grid(ends)
    tele = float(np.sum(pos * (S_e - S_r)))
    # integration by parts: gamma_t S_t - gamma_0 S_0 - sum_j S(r_j) (gamma_j - gamma_{j-1})
    S_t = p.at(t)
    jumps = np.diff(pos, axis=0)
    ibp = float(pos[-1] @ S_t - pos[0] @ S_r[0] - np.sum(S_r[1:] * jumps))
    return tele, ibp


def pathwise_integral(rule: DynamicRule, p: GridPath, t: Optional[float] = None,
                      tol: float = INTEGRAL_AGREEMENT_TOL) -> float:
    """int_0^t gamma dS for a piecewise-constant rule, computed both as the
    telescoping sum and by integration by parts; they must agree."""
    t = p.horizon if t is None else float(t)
    if not 0 <= t <= p.horizon:
        raise ValueError(f"time {t} outside [0, {p.horizon}]")
    s = rule.schedule(p)
    if s.positions.shape[1] != p.dim:
        raise ContractError(f"rule trades {s.positions.shape[1]} assets, path has {p.dim}")
    tele, ibp = _integral_terms(s, p, t)
    scale = max(1.0, abs(tele))
    if abs(tele - ibp) > tol * scale:
        raise ContractError(f"telescoping sum {tele} and integration by parts {ibp} disagree")
    return tele


def running_integral(rule: DynamicRule, p: GridPath) -> Tuple[np.ndarray, np.ndarray]:
    """(times, values) of t -> int_0^t gamma dS at every knot where its
    minimum can sit: rebalance times and path grid times (it is piecewise
    linear in between)."""
    s = rule.schedule(p)
    ts = np.union1d(s.times, p.times)
    ts = ts[ts <= p.horizon]
    vals = np.array([_integral_terms(s, p, t)[0] for t in ts])
    return ts, vals


# ---------------------------------------------------------------------------
# admissibility and superhedging
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdmissibilityReport:
    ok: bool
    worst_slack: float
    worst_path: Optional[int]
    first_breach_time: Optional[float]


def check_admissible(strategy: SemiStaticStrategy, paths: Sequence[GridPath], M: Optional[float] = None,
                     growth_p: Optional[float] = None, tol: float = 1e-12) -> AdmissibilityReport:
    """Minimal slack of int_0^t gamma dS + M (1 + [p > 0] sup_{s<=t} |S_s|^p)
    over the family and over t.  The first breach time is reported for the
    worst path."""
    M = strategy.M if M is None else M
    gp = strategy.growth_p if growth_p is None else growth_p
    worst, worst_w, breach = np.inf, None, None
    for w, p in enumerate(paths):
        if strategy.rule is None:
            ts, vals = np.array([0.0]), np.array([0.0])
        else:
            ts, vals = running_integral(strategy.rule, p)
        if gp > 0:
            run = np.array([p.sup_norm(t) for t in ts])
            floor = -M * (1 + run ** gp)
        else:
            floor = -M * np.ones_like(vals)
        slack = vals - floor
        j = int(np.argmin(slack))
        if slack[j] < worst:
            worst, worst_w = float(slack[j]), w
            bad = np.flatnonzero(slack < -tol)
            breach = None
            if bad.size:
                b = int(bad[0])
                breach = float(ts[b]) if b == 0 else _breach_time(strategy.rule, p, M, gp, ts[b - 1], ts[b], tol)
    return AdmissibilityReport(worst >= -tol, float(worst), worst_w, breach)


def _breach_time(rule, p, M, gp, lo, hi, tol, iters=80) -> float:
    """Bisect for the first time the slack drops below -tol inside (lo, hi]."""
    s = rule.schedule(p)

    def slack(t):
        floor = -M * (1 + p.sup_norm(t) ** gp) if gp > 0 else -M
        return _integral_terms(s, p, t)[0] - floor

    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if slack(mid) < -tol:
            hi = mid
        else:
            lo = mid
    return float(hi)


@dataclass(frozen=True)
class SuperhedgeReport:
    ok: bool
    worst_slack: float
    worst_path: Optional[int]
    slacks: np.ndarray  # nan for paths out of scope


def verify_superhedge(strategy: SemiStaticStrategy, G: Payoff, paths: Sequence[GridPath],
                      pset: PredictionSet = ALL, eps: float = 0.0, info: Optional[InfoSpace] = None,
                      tol: float = 1e-8, bound: str = "upper") -> SuperhedgeReport:
    """Slack wealth - G on every path in the eps-fattened set (within the
    information space when ``info`` is given)."""
    slacks = np.full(len(paths), np.nan)
    for w, p in enumerate(paths):
        inf_ = info if info is not None else InfoSpace(p.dim, (), (p.horizon,))
        if not in_fattened_set(pset, inf_, p, eps, bound=bound):
            continue
        slacks[w] = strategy.wealth(p) - G.evaluate(p)
    scope = ~np.isnan(slacks)
    if not scope.any():
        return SuperhedgeReport(True, np.inf, None, slacks)
    w = int(np.nanargmin(slacks))
    return SuperhedgeReport(bool(slacks[w] >= -tol), float(slacks[w]), w, slacks)


def strategy_from_dual(model, sol, options) -> SemiStaticStrategy:
    """The semi-static strategy encoded in a lattice superhedging solution."""
    if not sol.ok:
        raise ValueError(f"dual solution is {sol.status}")
    rule = LatticeRule.from_positions(model.times, model.paths, sol.positions)
    static = [(o, float(c)) for o, c in zip(options, sol.static)]
    return SemiStaticStrategy(sol.a0, static, rule)


def clip_payoff(G: Payoff, D: float) -> Payoff:
    """G clipped to [-D, D]."""
    return Clipped(G, D)


# ---------------------------------------------------------------------------
# progressive measurability
# ---------------------------------------------------------------------------

def branch_after(p: GridPath, t: float, rng: np.random.Generator, n_knots: int = 3,
                 scale: float = 0.5) -> GridPath:
    """A copy of p that agrees with it on [0, t] and moves randomly afterwards."""
    T = p.horizon
    keep = p.times < t
    times = list(p.times[keep]) + [t]
    vals = list(p.values[keep]) + [p.at(t)]
    if t < T:
        extra = np.sort(rng.uniform(t, T, size=n_knots))
        extra = extra[(extra > t) & (extra < T)]
        for s in list(extra) + [T]:
            if s <= times[-1]:
                continue
            step = rng.normal(scale=scale, size=p.dim)
            times.append(s)
            vals.append(np.maximum(vals[-1] + step, 0.0))
    return GridPath(np.array(times), np.array(vals), normalised=p.normalised)


@dataclass(frozen=True)
class PrefixTestReport:
    trials: int
    failures: int
    first_failure: Optional[Tuple[int, float]]

    @property
    def ok(self) -> bool:
        return self.failures == 0


def prefix_test(rule: DynamicRule, paths: Sequence[GridPath], trials: int, rng: np.random.Generator,
                raise_on_failure: bool = False) -> PrefixTestReport:
    """Branch random paths after a random time t and compare positions at t
    exactly (no tolerance)."""
    fails, first = 0, None
    for _ in range(trials):
        w = int(rng.integers(len(paths)))
        p = paths[w]
        t = float(rng.uniform(0, p.horizon))
        q = branch_after(p, t, rng)
        a, b = rule.position_at(p, t), rule.position_at(q, t)
        if not np.array_equal(a, b):
            fails += 1
            if first is None:
                first = (w, t)
    if fails and raise_on_failure:
        raise ContractError(f"rule looks ahead: {fails} of {trials} prefix tests failed (path {first[0]}, t={first[1]})")
    return PrefixTestReport(trials, fails, first)


# ---------------------------------------------------------------------------
# lifting discrete strategies
# ---------------------------------------------------------------------------

GammaHat = Callable[[Tuple[Q, ...], Tuple[Tuple[Q, ...], ...]], Sequence[float]]


def _gamma_value(gamma_hat: GammaHat, jt, vals, N: float, dim: int) -> np.ndarray:
    g = np.atleast_1d(np.asarray(gamma_hat(jt, vals), dtype=float))
    if g.size == 1 and dim > 1:
        g = np.full(dim, g[0])
    if g.size != dim:
        raise ContractError(f"discrete rule returned {g.size} positions, expected {dim}")
    if np.any(np.abs(g) > N):
        raise ContractError(f"discrete rule exceeds the bound {N}")
    return g


class LiftedRule(DynamicRule):
    """Continuous-time rule built from a rule on discretised paths.

    ``gamma_hat(jump_times, values)`` receives (t_1..t_k, v_0..v_{k-1}) of the
    discretised path and returns the position for its k-th jump.  Jump k
    mirrors the path's move over (tau_k, tau_{k+1}], so the lifted rule holds
    gamma_hat(t_1..t_k, v_0..v_{k-1}) on that interval; on (0, tau_1] it holds
    gamma_hat((), ()).
    """

    def __init__(self, gamma_hat: GammaHat, N: int, info: Optional[InfoSpace] = None, bound: Optional[float] = None):
        self.gamma_hat = gamma_hat
        self.N = N
        self.info = info
        self.bound = float(N) if bound is None else float(bound)

    def discretise(self, p: GridPath):
        return hat_pipeline(p, self.info, self.N)

    def schedule(self, p):
        hp = self.discretise(p)
        taus = hp.partition.taus
        hat = hp.hat
        m = len(taus) - 1
        times, pos = [], []
        for k in range(m):
            jt, vals = hat.prefix(k)
            times.append(float(taus[k]))
            pos.append(_gamma_value(self.gamma_hat, jt, vals, self.bound, p.dim))
        return Schedule(np.array(times), np.array(pos))


def lift_strategy(gamma_hat: GammaHat, N: int, info: Optional[InfoSpace] = None,
                  bound: Optional[float] = None) -> LiftedRule:
    return LiftedRule(gamma_hat, N, info, bound)


@dataclass(frozen=True)
class MimicReport:
    errors: Tuple[float, ...]  # per k = 1..m
    bound_inner: float  # 5 (d+K) N / 2^N, for k < m
    bound_all: float  # 6 (d+K) N / 2^N, including the last interval

    @property
    def max_inner(self) -> float:
        return max(self.errors[:-1], default=0.0)

    @property
    def max_all(self) -> float:
        return max(self.errors, default=0.0)

    @property
    def ok(self) -> bool:
        return self.max_inner <= self.bound_inner and self.max_all <= self.bound_all


def integral_mimic_error(gamma_hat: GammaHat, p: GridPath, N: int, info: Optional[InfoSpace] = None,
                         bound: Optional[float] = None) -> MimicReport:
    """|int_0^{tau_k} gamma^(N) dS - int_0^{that_k} gamma_hat dF_hat| for every k,
    in exact arithmetic (positions are converted exactly from floats).  The
    last entry compares the two integrals over the whole horizon."""
    lifted = LiftedRule(gamma_hat, N, info, bound)
    hp = lifted.discretise(p)
    taus, pts = hp.partition.taus, hp.partition.points
    hat = hp.hat
    m = len(taus) - 1
    dim = p.dim
    gam = []
    for k in range(m):
        jt, vals = hat.prefix(k)
        gam.append(tuple(_frac(float(x)) for x in _gamma_value(gamma_hat, jt, vals, lifted.bound, dim)))
    cont = [Q(0)]
    for k in range(m):
        cont.append(cont[-1] + sum(g * (b - a) for g, a, b in zip(gam[k], pts[k], pts[k + 1])))
    disc = [Q(0)]
    for k in range(1, hat.n_segments):
        disc.append(disc[-1] + sum(g * (b - a) for g, a, b in zip(gam[k], hat.values[k - 1], hat.values[k])))
    # disc[k] integrates through jump k (at that_k); the hat path has m - 1 jumps
    errors = []
    for k in range(1, m + 1):
        dk = disc[min(k, len(disc) - 1)]
        errors.append(float(abs(cont[k] - dk)))
    scale = Fraction(dim * N, 2 ** N)
    return MimicReport(tuple(errors), float(5 * scale), float(6 * scale))
