"""Path discretisation on dyadic grids.

Pipeline for a continuous path S and mesh 2^-N:

* ``lebesgue_partition``: successive times at which S has moved by 2^-N
  (max-coordinate norm) since the previous such time.
* ``naive_discretise`` (F): hold S(tau_k) on [tau_k, tau_{k+1}).
* ``check_discretise`` (F-check): same jump times, values projected onto
  staged dyadic grids, with a constant offset so the path starts at 1.
* ``hat_discretise`` (F-hat): jump times moved to the simplest rational in
  (tau_{k-1}, tau_k], giving an element of a countable path class.
* ``lift_continuous``: linear interpolation back to a continuous path.

All times and values are exact rationals (gmpy2 ``mpq``, which compares and
hashes equal to ``fractions.Fraction``).  Floating-point grid
paths are converted exactly (every float is a dyadic rational), so the
error bounds can be checked without tolerances.
"""
from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass
from fractions import Fraction

from gmpy2 import mpq
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .paths import GridPath, InfoSpace

Q = type(mpq(0))
Vec = Tuple[Q, ...]
RATIONAL_TYPES = (Q, Fraction)


class DiscretisationError(RuntimeError):
    """The discretised path failed its own membership check."""


def _frac(x) -> Q:
    if isinstance(x, Q):
        return x
    if isinstance(x, Fraction):
        return mpq(x.numerator, x.denominator)
    if isinstance(x, (int, np.integer)):
        return mpq(int(x))
    if isinstance(x, str):
        return mpq(x)
    return mpq(float(x))


def _vec(x) -> Vec:
    if isinstance(x, (int, float, Q, Fraction, np.floating, np.integer, str)):
        return (_frac(x),)
    return tuple(_frac(v) for v in x)


def _vmax_abs(v: Iterable[Q]) -> Q:
    return max(abs(x) for x in v)


def _sub(a: Vec, b: Vec) -> Vec:
    return tuple(x - y for x, y in zip(a, b))


def _add(a: Vec, b: Vec) -> Vec:
    return tuple(x + y for x, y in zip(a, b))


# ---------------------------------------------------------------------------
# exact piecewise-linear paths
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExactPath:
    """Piecewise-linear path with rational knots."""

    times: Tuple[Q, ...]
    values: Tuple[Vec, ...]

    def __post_init__(self):
        t = tuple(_frac(x) for x in self.times)
        v = tuple(_vec(x) for x in self.values)
        if len(t) < 2 or len(v) != len(t):
            raise ValueError("need at least two knots, one value per knot")
        if t[0] != 0 or any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError("knot times must increase strictly from 0")
        if len({len(x) for x in v}) != 1:
            raise ValueError("inconsistent dimensions")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_grid(cls, p: GridPath) -> "ExactPath":
        return cls(tuple(mpq(float(t)) for t in p.times),
                   tuple(tuple(mpq(float(x)) for x in row) for row in p.values))

    @property
    def horizon(self) -> Q:
        return self.times[-1]

    @property
    def dim(self) -> int:
        return len(self.values[0])

    def at(self, t) -> Vec:
        t = _frac(t)
        i = bisect_right(self.times, t) - 1
        if i >= len(self.times) - 1:
            return self.values[-1]
        t0, t1 = self.times[i], self.times[i + 1]
        w = (t - t0) / (t1 - t0)
        return tuple(a + w * (b - a) for a, b in zip(self.values[i], self.values[i + 1]))

    def clip_nonneg(self) -> "ExactPath":
        times = [self.times[0]]
        vals = [tuple(max(x, mpq(0)) for x in self.values[0])]
        for a in range(len(self.times) - 1):
            t0, t1 = self.times[a], self.times[a + 1]
            x0, x1 = self.values[a], self.values[a + 1]
            cross = set()
            for i in range(len(x0)):
                if (x0[i] < 0 < x1[i]) or (x1[i] < 0 < x0[i]):
                    cross.add(t0 + x0[i] / (x0[i] - x1[i]) * (t1 - t0))
            for tc in sorted(cross):
                w = (tc - t0) / (t1 - t0)
                times.append(tc)
                vals.append(tuple(max(u + w * (v - u), mpq(0)) for u, v in zip(x0, x1)))
            times.append(t1)
            vals.append(tuple(max(x, mpq(0)) for x in x1))
        return ExactPath(tuple(times), tuple(vals))

    def to_grid(self, normalised: bool = False) -> GridPath:
        return GridPath(np.array([float(t) for t in self.times]),
                        np.array([[float(x) for x in v] for v in self.values]),
                        normalised=normalised)


PathLike = Union[GridPath, ExactPath]


def as_exact(p: PathLike) -> ExactPath:
    if isinstance(p, ExactPath):
        return p
    if isinstance(p, GridPath):
        return ExactPath.from_grid(p)
    raise TypeError(f"expected a path, got {type(p).__name__}")


# ---------------------------------------------------------------------------
# piecewise-constant paths
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PiecewiseConstantPath:
    """Cadlag step path: ``values[k]`` is held on [jump_times[k], jump_times[k+1]),
    the last one up to the horizon; ``terminal`` is the value at the horizon
    (defaults to the last held value)."""

    jump_times: Tuple[Q, ...]
    values: Tuple[Vec, ...]
    horizon: Q
    N: Optional[int] = None
    terminal: Optional[Vec] = None

    def __post_init__(self):
        t = tuple(_frac(x) for x in self.jump_times)
        v = tuple(_vec(x) for x in self.values)
        T = _frac(self.horizon)
        if not t or len(t) != len(v):
            raise ValueError("one value per jump time is required")
        if t[0] != 0 or any(b <= a for a, b in zip(t, t[1:])) or t[-1] >= T:
            raise ValueError("jump times must increase strictly from 0 and stay below the horizon")
        term = v[-1] if self.terminal is None else _vec(self.terminal)
        object.__setattr__(self, "jump_times", t)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "horizon", T)
        object.__setattr__(self, "terminal", term)

    @property
    def dim(self) -> int:
        return len(self.values[0])

    @property
    def n_segments(self) -> int:
        return len(self.values)

    def at(self, t) -> Vec:
        t = _frac(t)
        if t >= self.horizon:
            return self.terminal
        return self.values[bisect_right(self.jump_times, t) - 1]

    def left_limit(self, t) -> Vec:
        t = _frac(t)
        i = bisect_right(self.jump_times, t) - 1
        if i > 0 and self.jump_times[i] == t:
            i -= 1
        return self.values[i]

    def increments(self) -> List[Vec]:
        return [_sub(b, a) for a, b in zip(self.values, self.values[1:])]

    def prefix(self, k: int) -> Tuple[Tuple[Q, ...], Tuple[Vec, ...]]:
        """(t_1..t_k, v_0..v_{k-1}): the first k jump times and the values held
        before the k-th jump, i.e. what a discrete strategy may use when
        choosing its position for jump k."""
        return self.jump_times[1 : k + 1], self.values[:k]

    def to_float(self) -> Tuple[np.ndarray, np.ndarray]:
        return (np.array([float(t) for t in self.jump_times]),
                np.array([[float(x) for x in v] for v in self.values]))


# ---------------------------------------------------------------------------
# Lebesgue partitions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LebesguePartition:
    N: int
    taus: Tuple[Q, ...]
    points: Tuple[Vec, ...]  # path values at the taus

    @property
    def m(self) -> int:
        return len(self.taus) - 1


def _crossings(path: ExactPath, h: Q) -> Tuple[List[Q], List[Vec]]:
    times, vals = path.times, path.values
    taus = [times[0]]
    pts = [vals[0]]
    c = vals[0]
    for a in range(len(times) - 1):
        t0, t1 = times[a], times[a + 1]
        x0, x1 = vals[a], vals[a + 1]
        delta = _sub(x1, x0)
        dmax = _vmax_abs(delta)
        if dmax == 0:
            continue
        dt = t1 - t0
        # first crossing on this segment: deviation from the anchor c is
        # x0 - c + s*delta for s in [0, 1]; it starts strictly inside the band
        best = None
        for i, di in enumerate(delta):
            if di == 0:
                continue
            target = h if di > 0 else -h
            r = (target - (x0[i] - c[i])) / di
            if 0 < r <= 1 and (best is None or r < best):
                best = r
        if best is None:
            continue
        # after a reset the deviation is zero in every coordinate, so the
        # fastest coordinate hits next, at equal steps h/dmax
        step = h / dmax
        s = best
        while s <= 1:
            pt = tuple(u + s * d for u, d in zip(x0, delta))
            taus.append(t0 + s * dt)
            pts.append(pt)
            c = pt
            s = s + step
    if taus[-1] != times[-1]:
        taus.append(times[-1])
        pts.append(vals[-1])
    return taus, pts


def lebesgue_partition(p: PathLike, N: int) -> LebesguePartition:
    """Successive 2^-N moves of the path in max-coordinate norm; the last time is T."""
    if N < 1:
        raise ValueError("N must be a positive integer")
    taus, pts = _crossings(as_exact(p), mpq(1, 2 ** N))
    return LebesguePartition(N, tuple(taus), tuple(pts))


def naive_discretise(p: PathLike, N: int) -> PiecewiseConstantPath:
    ex = as_exact(p)
    part = lebesgue_partition(ex, N)
    return PiecewiseConstantPath(part.taus[:-1], part.points[:-1], ex.horizon, N,
                                 terminal=ex.values[-1])


def grid_project(x, N: int):
    """Coordinatewise ceiling onto the 2^-N grid (exact)."""
    scale = 2 ** N
    if isinstance(x, (int, float, Q, Fraction, np.floating, np.integer)):
        return mpq(math.ceil(_frac(x) * scale), scale)
    return tuple(mpq(math.ceil(_frac(v) * scale), scale) for v in x)


def shift_interval_rational(a, b) -> Q:
    """The rational p/q in (a, b] with p, q >= 1 and p + q minimal.

    Found by Stern-Brocot descent with whole runs of identical moves taken in
    one step.  The simplest rational of an interval minimises numerator and
    denominator simultaneously, so the minimiser of p + q is unique.
    Negative ``a`` is treated as 0 since p/q is positive.
    """
    a, b = _frac(a), _frac(b)
    if a >= b:
        raise ValueError(f"empty interval ({a}, {b}]")
    if b <= 0:
        raise ValueError("interval contains no positive rational")
    a = max(a, mpq(0))
    lp, lq, rp, rq = 0, 1, 1, 0
    while True:
        mp, mq = lp + rp, lq + rq
        med = mpq(mp, mq)
        if med <= a:
            k = math.floor((a * lq - lp) / (rp - a * rq))
            lp, lq = lp + k * rp, lq + k * rq
        elif med > b:
            k = math.ceil((rp - b * rq) / (b * lq - lp)) - 1
            rp, rq = rp + k * lp, rq + k * lq
        else:
            return med


@dataclass(frozen=True)
class HatDiscretisation:
    """All intermediate objects of the F -> F-check -> F-hat pipeline."""

    partition: LebesguePartition
    naive: PiecewiseConstantPath
    check: PiecewiseConstantPath
    hat: PiecewiseConstantPath


def _staged_values(part: LebesguePartition, N: int) -> List[Vec]:
    m = part.m
    proj = [grid_project(part.points[k + 1], N + k + 1) for k in range(m)]
    offset = _sub(part.points[0], proj[0])
    return [_add(offset, pk) for pk in proj]


def check_discretise(p: PathLike, N: int) -> PiecewiseConstantPath:
    ex = as_exact(p)
    part = lebesgue_partition(ex, N)
    vals = _staged_values(part, N)
    return PiecewiseConstantPath(part.taus[:-1], tuple(vals), ex.horizon, N)


def shifted_times(taus: Sequence[Q]) -> List[Q]:
    """Rational jump times with tau_{k-1} < that_k <= tau_k for k < m."""
    m = len(taus) - 1
    out = [mpq(0)]
    for k in range(1, m):
        prev = out[-1]
        out.append(prev + shift_interval_rational(taus[k - 1] - prev, taus[k] - prev))
    return out


def hat_pipeline(p: PathLike, info: Optional[InfoSpace], N: int, verify: bool = True) -> HatDiscretisation:
    if N < 4:
        raise ValueError("hat discretisation needs N >= 4")
    ex = as_exact(p)
    part = lebesgue_partition(ex, N)
    vals = tuple(_staged_values(part, N))
    T = ex.horizon
    naive = PiecewiseConstantPath(part.taus[:-1], part.points[:-1], T, N, terminal=ex.values[-1])
    check = PiecewiseConstantPath(part.taus[:-1], vals, T, N)
    hat = PiecewiseConstantPath(tuple(shifted_times(part.taus)), vals, T, N)
    if verify:
        res = is_member_Dhat(hat, info, N)
        if not res.ok:
            raise DiscretisationError(
                f"discretised path violates condition {res.condition}: {res.reason}")
    return HatDiscretisation(part, naive, check, hat)


def hat_discretise(p: PathLike, info: Optional[InfoSpace], N: int) -> PiecewiseConstantPath:
    return hat_pipeline(p, info, N).hat


# ---------------------------------------------------------------------------
# membership in the countable class
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Membership:
    ok: bool
    condition: Optional[int] = None
    reason: str = ""

    def __bool__(self):
        return self.ok


def increment_bound(k: int) -> int:
    """Largest |j| allowed for the k-th jump, measured in units of 2^-(N+k+1).

    The staged projection makes the k-th jump a difference of a point on the
    2^-(N+k+1) grid and one on the 2^-(N+k) grid whose underlying path values
    differ by at most 2^-N; rounding adds less than one unit on the upper side
    and less than two on the lower side.
    """
    return 2 ** (k + 1) + 1


def is_member_Dhat(f: PiecewiseConstantPath, info: Optional[InfoSpace], N: int) -> Membership:
    """Check the seven defining conditions with exact arithmetic.

    ``info`` may be None, in which case every coordinate is an underlying
    (K = 0).
    """
    d = f.dim if info is None else info.d
    kappa = mpq(0) if info is None else _frac(info.kappa)
    if info is not None and f.dim != info.dim:
        return Membership(False, 2, f"path has {f.dim} coordinates, expected {info.dim}")
    one = mpq(1)
    if any(x != one for x in f.values[0]):
        return Membership(False, 1, "does not start at (1, ..., 1)")
    if not all(isinstance(t, RATIONAL_TYPES) for t in f.jump_times):
        return Membership(False, 2, "jump times are not rational")
    if f.terminal != f.values[-1]:
        return Membership(False, 2, "value at the horizon differs from the last held value")
    incs = f.increments()
    for k, inc in enumerate(incs, start=1):
        unit = mpq(1, 2 ** (N + k + 1))
        bound = increment_bound(k)
        for i, x in enumerate(inc):
            j = x / unit
            if j.denominator != 1:
                return Membership(False, 3, f"jump {k}, coordinate {i}: {x} not on the 2^-{N + k + 1} grid")
            if abs(j.numerator) > bound:
                return Membership(False, 3, f"jump {k}, coordinate {i}: |j| = {abs(j.numerator)} > {bound}")
    floor = -mpq(8, 2 ** N)
    for k, v in enumerate(f.values):
        if min(v) < floor:
            return Membership(False, 4, f"value {k} below the floor {floor}")
    cap = kappa + 1
    for k, v in enumerate(f.values):
        if any(abs(x) > cap for x in v[d:]):
            return Membership(False, 5, f"option coordinate of value {k} exceeds kappa + 1")
    last = len(f.values) - 1
    for k, v in enumerate(f.values):
        if k < last and any(x == floor for x in v):
            return Membership(False, 6, f"path moves after hitting the floor at jump {k}")
        if k < last and any(x == cap for x in v[d:]):
            return Membership(False, 7, f"path moves after hitting the cap at jump {k}")
    return Membership(True)


# ---------------------------------------------------------------------------
# lifting back to continuous paths
# ---------------------------------------------------------------------------

def lift_exact(f: PiecewiseConstantPath) -> ExactPath:
    times = list(f.jump_times) + [f.horizon]
    vals = list(f.values) + [f.values[-1]]
    return ExactPath(tuple(times), tuple(vals))


def lift_continuous(f: PiecewiseConstantPath, info: Optional[InfoSpace] = None,
                    N: Optional[int] = None) -> GridPath:
    """Linear interpolation through (t_k, v_k), constant after the last jump.

    The result may dip slightly below zero; apply ``clip_nonneg`` before
    evaluating payoffs.
    """
    N = f.N if N is None else N
    if N is None:
        raise ValueError("mesh exponent unknown")
    res = is_member_Dhat(f, info, N)
    if not res.ok:
        raise ValueError(f"not a member of the discretised class (condition {res.condition}: {res.reason})")
    return lift_exact(f).to_grid(normalised=False)


def extend_payoff(G, f: PiecewiseConstantPath, info: Optional[InfoSpace] = None) -> float:
    """G evaluated on the nonnegative part of the lifted path."""
    lifted = lift_continuous(f, info)
    return G.evaluate(lifted.clip_nonneg())


def count_steps_on_lift(f: PiecewiseConstantPath, D: int) -> int:
    if D < 1:
        raise ValueError("D must be a positive integer")
    return lebesgue_partition(lift_exact(f).clip_nonneg(), D).m


# ---------------------------------------------------------------------------
# exact sup-norm distances
# ---------------------------------------------------------------------------

def _right_value(x, u: Q) -> Vec:
    return x.at(u)


def _left_limit(x, w: Q) -> Vec:
    if isinstance(x, PiecewiseConstantPath):
        if w >= x.horizon:
            return x.values[-1]
        return x.left_limit(w)
    return x.at(w)


def _breaks(x) -> Tuple[Q, ...]:
    if isinstance(x, PiecewiseConstantPath):
        return x.jump_times + (x.horizon,)
    return x.times


def exact_sup_distance(a, b) -> Q:
    """sup_t |a_t - b_t| for exact piecewise-linear or piecewise-constant paths.

    On each cell of the merged grid the difference is affine, so the
    supremum over the cell is reached at its ends (as a limit at the right
    end).  The value at the horizon is checked separately.
    """
    if not isinstance(a, (ExactPath, PiecewiseConstantPath)):
        a = as_exact(a)
    if not isinstance(b, (ExactPath, PiecewiseConstantPath)):
        b = as_exact(b)
    grid = sorted(set(_breaks(a)) | set(_breaks(b)))
    best = mpq(0)
    for u, w in zip(grid, grid[1:]):
        best = max(best, _vmax_abs(_sub(_right_value(a, u), _right_value(b, u))),
                   _vmax_abs(_sub(_left_limit(a, w), _left_limit(b, w))))
    T = grid[-1]
    best = max(best, _vmax_abs(_sub(a.at(T), b.at(T))))
    return best
