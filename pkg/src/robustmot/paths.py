"""Continuous paths, the information space and prediction sets.

Paths are piecewise linear on a finite time grid.  This keeps sup-norm
distances, running maxima and level-crossing times exactly computable.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

DEFAULT_INFO_TOL = 1e-9


class PathError(ValueError):
    """Malformed path or time change."""


class ContractError(RuntimeError):
    """A user-supplied oracle broke its documented contract."""


@dataclass(frozen=True, eq=False)
class GridPath:
    """Piecewise-linear path in R_+^{dim} on a strictly increasing time grid.

    ``normalised=False`` skips the start-at-one and nonnegativity checks; it
    is used for intermediate objects such as lifted paths before they are
    truncated at zero.
    """

    times: np.ndarray
    values: np.ndarray
    normalised: bool = field(default=True, repr=False)

    def __post_init__(self):
        t = np.array(self.times, dtype=float).reshape(-1)
        v = np.array(self.values, dtype=float)
        if v.ndim == 1:
            v = v.reshape(-1, 1)
        if t.size < 2:
            raise PathError("a path needs at least two grid times")
        if v.shape[0] != t.size:
            raise PathError("one value per grid time is required")
        if t[0] != 0.0:
            raise PathError("grid must start at time 0")
        if np.any(np.diff(t) <= 0):
            raise PathError("grid times must be strictly increasing")
        if not np.all(np.isfinite(v)):
            raise PathError("path values must be finite")
        if self.normalised:
            if np.any(v[0] != 1.0):
                raise PathError("path must start at (1, ..., 1)")
            if np.any(v < 0):
                raise PathError("path values must be nonnegative")
        t.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def terminal(self) -> np.ndarray:
        return self.values[-1]

    def at(self, t: float) -> np.ndarray:
        """Linear interpolation at time ``t``."""
        if t < 0 or t > self.horizon:
            raise PathError(f"time {t} outside [0, {self.horizon}]")
        return np.array([np.interp(t, self.times, self.values[:, i]) for i in range(self.dim)])

    def on_grid(self, grid: np.ndarray) -> np.ndarray:
        return np.stack([np.interp(grid, self.times, self.values[:, i]) for i in range(self.dim)], axis=1)

    def sup_norm(self, upto: Optional[float] = None) -> float:
        """max_i sup_{s <= upto} |S^i_s| (exact: attained at grid times)."""
        if upto is None:
            return float(np.abs(self.values).max())
        mask = self.times <= upto
        vals = np.abs(self.values[mask])
        last = np.abs(self.at(upto))
        return float(max(vals.max(), last.max()))

    def clip_nonneg(self) -> "GridPath":
        """Coordinatewise positive part, with zero crossings inserted as knots."""
        times = [self.times[0]]
        vals = [np.maximum(self.values[0], 0.0)]
        for a in range(len(self.times) - 1):
            t0, t1 = self.times[a], self.times[a + 1]
            x0, x1 = self.values[a], self.values[a + 1]
            cross = []
            for i in range(self.dim):
                if (x0[i] < 0 < x1[i]) or (x1[i] < 0 < x0[i]):
                    s = x0[i] / (x0[i] - x1[i])
                    cross.append(t0 + s * (t1 - t0))
            for tc in sorted(set(cross)):
                if t0 < tc < t1 and tc > times[-1]:
                    w = (tc - t0) / (t1 - t0)
                    times.append(tc)
                    vals.append(np.maximum(x0 + w * (x1 - x0), 0.0))
            times.append(t1)
            vals.append(np.maximum(x1, 0.0))
        return GridPath(np.array(times), np.array(vals), normalised=bool(np.all(vals[0] == 1.0)))

    def __repr__(self):
        return f"GridPath(n={self.times.size}, dim={self.dim}, T={self.horizon})"


def constant_path(dim: int, horizon: float = 1.0) -> GridPath:
    return GridPath(np.array([0.0, horizon]), np.ones((2, dim)))


def linear_path(end: Sequence[float] | float, horizon: float = 1.0) -> GridPath:
    end = np.atleast_1d(np.asarray(end, dtype=float))
    return GridPath(np.array([0.0, horizon]), np.vstack([np.ones_like(end), end]))


def merged_grid(a: GridPath, b: GridPath) -> np.ndarray:
    return np.union1d(a.times, b.times)


def sup_norm_distance(a: GridPath, b: GridPath) -> float:
    """sup_t max_i |a_t^i - b_t^i|; the difference is piecewise linear so the
    supremum sits on the merged grid."""
    if a.horizon != b.horizon:
        raise PathError("paths live on different horizons")
    if a.dim != b.dim:
        raise PathError("paths have different dimensions")
    grid = merged_grid(a, b)
    return float(np.abs(a.on_grid(grid) - b.on_grid(grid)).max())


# ---------------------------------------------------------------------------
# information space
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ContinuousOption:
    """A continuously traded option with terminal payoff on the d underlyings.

    ``bound`` is sup |payoff|; it feeds the cap kappa of the discretised
    option coordinates.
    """

    payoff: Callable[[np.ndarray], float]
    price: float
    bound: float
    name: str = ""

    def __post_init__(self):
        if not self.price > 0:
            raise ValueError("continuously traded option prices must be strictly positive")
        if not self.bound >= 0:
            raise ValueError("payoff bound must be nonnegative")


def put_option(strike: float, price: float, asset: int = 0) -> ContinuousOption:
    return ContinuousOption(lambda s: max(strike - s[asset], 0.0), price, strike, f"put{strike}")


@dataclass(frozen=True)
class InfoSpace:
    """The underlyings plus K continuously traded options.

    ``maturities`` are the times T_1 < ... < T_n; the last is the horizon.
    """

    d: int
    options: Tuple[ContinuousOption, ...] = ()
    maturities: Tuple[float, ...] = (1.0,)

    def __post_init__(self):
        object.__setattr__(self, "options", tuple(self.options))
        object.__setattr__(self, "maturities", tuple(float(t) for t in self.maturities))
        if self.d < 1:
            raise ValueError("need at least one underlying")
        if any(b <= a for a, b in zip(self.maturities, self.maturities[1:])) or not self.maturities:
            raise ValueError("maturities must be strictly increasing and nonempty")

    @property
    def K(self) -> int:
        return len(self.options)

    @property
    def dim(self) -> int:
        return self.d + self.K

    @property
    def horizon(self) -> float:
        return self.maturities[-1]

    @property
    def kappa(self) -> float:
        if not self.options:
            return 0.0
        return max(o.bound / o.price for o in self.options)

    def option_coordinates(self, terminal_underlyings: np.ndarray) -> np.ndarray:
        """Normalised option values X_i(s)/P(X_i) forced at the horizon."""
        s = np.asarray(terminal_underlyings, dtype=float)
        return np.array([o.payoff(s) / o.price for o in self.options])


def in_info_space(p: GridPath, info: InfoSpace, tol: float = DEFAULT_INFO_TOL) -> bool:
    if p.dim != info.dim:
        raise PathError(f"path has {p.dim} coordinates, information space expects {info.dim}")
    if info.K == 0:
        return True
    term = p.terminal
    target = info.option_coordinates(term[: info.d])
    return bool(np.all(np.abs(term[info.d :] - target) <= tol))


# ---------------------------------------------------------------------------
# prediction sets
# ---------------------------------------------------------------------------

class PredictionSet:
    """Base class.  ``distance_bounds`` returns (lower, upper) bounds on the
    uncapped sup-norm distance from a path in the information space to the set."""

    exact = True

    def distance_bounds(self, p: GridPath) -> Tuple[float, float]:
        raise NotImplementedError

    def contains(self, p: GridPath) -> bool:
        raise NotImplementedError


@dataclass(frozen=True)
class AllPaths(PredictionSet):
    """The whole information space."""

    def distance_bounds(self, p):
        return 0.0, 0.0

    def contains(self, p):
        return True


@dataclass(frozen=True)
class SupNormBall(PredictionSet):
    """{omega : ||omega|| <= b}.  The distance is exact: clamping omega at b gives
    a ball member at distance max(0, ||omega|| - b), and no ball member can do
    better at the time where omega peaks."""

    b: float

    def __post_init__(self):
        if not self.b >= 1:
            raise ValueError("ball radius must be at least 1 (paths start at 1)")

    def distance(self, p: GridPath) -> float:
        return max(0.0, float(p.values.max()) - self.b)

    def distance_bounds(self, p):
        d = self.distance(p)
        return d, d

    def contains(self, p):
        return float(p.values.max()) <= self.b


@dataclass(frozen=True)
class CustomSet(PredictionSet):
    """User-defined set: a membership predicate plus a distance-bound oracle."""

    member: Callable[[GridPath], bool]
    oracle: Callable[[GridPath], Tuple[float, float]]
    exact = False

    def distance_bounds(self, p):
        if self.member(p):
            return 0.0, 0.0
        lo, hi = self.oracle(p)
        if lo > hi or lo < 0:
            raise ContractError(f"distance oracle returned lower {lo} > upper {hi}")
        return float(lo), float(hi)

    def contains(self, p):
        return bool(self.member(p))


ALL = AllPaths()


def _pick(bounds: Tuple[float, float], which: str) -> float:
    if which == "lower":
        return bounds[0]
    if which == "upper":
        return bounds[1]
    raise ValueError("bound must be 'lower' or 'upper'")


def set_distance(pset: PredictionSet, p: GridPath, bound: str = "lower") -> float:
    return _pick(pset.distance_bounds(p), bound)


def lambda_penalty(pset: PredictionSet, info: InfoSpace, p: GridPath, bound: str = "lower") -> float:
    """inf over the set of ||p - v||, capped at 1.

    For sets with only distance bounds, ``bound`` selects which one is used.
    """
    return min(1.0, set_distance(pset, p, bound))


def in_fattened_set(pset: PredictionSet, info: InfoSpace, p: GridPath, eps: float,
                    bound: str = "lower", tol: float = DEFAULT_INFO_TOL) -> bool:
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    if not in_info_space(p, info, tol):
        return False
    return set_distance(pset, p, bound) <= eps


# ---------------------------------------------------------------------------
# time changes
# ---------------------------------------------------------------------------

def time_change(p: GridPath, knots_t: Sequence[float], knots_f: Sequence[float],
                maturities: Sequence[float] = ()) -> GridPath:
    """Return t -> p(f(t)) for the piecewise-linear map f through the knots.

    f must be nondecreasing with f(0) = 0 and f(T_i) = T_i at every maturity
    (the horizon included).
    """
    s = np.asarray(knots_t, dtype=float)
    f = np.asarray(knots_f, dtype=float)
    T = p.horizon
    if s.size < 2 or s[0] != 0.0 or s[-1] != T or np.any(np.diff(s) <= 0):
        raise PathError("time-change knots must increase from 0 to the horizon")
    if np.any(np.diff(f) < 0):
        raise PathError("time change must be nondecreasing")
    if f[0] != 0.0 or abs(f[-1] - T) > 0:
        raise PathError("time change must fix 0 and the horizon")
    for Ti in maturities:
        if abs(np.interp(Ti, s, f) - Ti) > 1e-12:
            raise PathError(f"time change moves maturity {Ti}")
    new_t = set(s.tolist())
    for a in range(s.size - 1):
        f0, f1 = f[a], f[a + 1]
        if f1 <= f0:
            continue
        for g in p.times:
            if f0 < g < f1:
                new_t.add(s[a] + (g - f0) / (f1 - f0) * (s[a + 1] - s[a]))
    grid = np.array(sorted(new_t))
    mapped = np.clip(np.interp(grid, s, f), 0.0, T)
    vals = p.on_grid(mapped)
    vals[0] = p.values[0]
    return GridPath(grid, vals, normalised=p.normalised)
