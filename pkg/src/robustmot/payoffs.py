"""Payoffs with regularity metadata.

Each payoff can be evaluated on a continuous ``GridPath``, on a
``PiecewiseConstantPath`` (used by the time-continuity check), and in
vectorised form on an array of lattice paths.  Metadata:

* ``kappa``: bound on |G| (None if unbounded),
* ``modulus``: nondecreasing f_e with |G(w) - G(v)| <= f_e(||w - v||),
* ``growth``: (L, p) with |G(S)| <= L (1 + ||S||^p),
* ``time_continuity_L``: constant of the time-continuity inequality.

Set ``ROBUSTMOT_DEBUG=1`` to assert |G| <= kappa on every evaluation.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
from gmpy2 import mpq

from .discretise import PiecewiseConstantPath
from .paths import GridPath

DEBUG_CHECKS = os.environ.get("ROBUSTMOT_DEBUG", "") not in ("", "0")


class PayoffDomainError(ValueError):
    """Payoff queried on a path it is not defined for."""


def _identity(x):
    return x


class Payoff:
    kind = "payoff"

    def __init__(self, kappa: Optional[float] = None, modulus: Optional[Callable[[float], float]] = None,
                 growth: Optional[Tuple[float, float]] = None, time_continuity_L: Optional[float] = None):
        self.kappa = kappa
        self.modulus = modulus
        self.growth = growth
        self.time_continuity_L = time_continuity_L

    # subclasses implement these
    def _evaluate(self, p: GridPath) -> float:
        raise NotImplementedError

    def _evaluate_pc(self, f: PiecewiseConstantPath) -> float:
        raise PayoffDomainError(f"{self.kind} has no piecewise-constant evaluation")

    def _evaluate_lattice(self, times: np.ndarray, paths: np.ndarray) -> np.ndarray:
        return np.array([self._evaluate(GridPath(times, w, normalised=False)) for w in paths])

    def _check(self, v):
        if DEBUG_CHECKS and self.kappa is not None:
            assert np.all(np.abs(v) <= self.kappa + 1e-12), f"{self.kind}: |G| exceeds kappa"
        return v

    def evaluate(self, p: GridPath) -> float:
        return self._check(float(self._evaluate(p)))

    def evaluate_pc(self, f: PiecewiseConstantPath) -> float:
        return self._check(float(self._evaluate_pc(f)))

    def evaluate_lattice(self, times, paths) -> np.ndarray:
        """Values on an array of paths shaped (n_paths, n_times, dim)."""
        paths = np.asarray(paths, dtype=float)
        return self._check(np.asarray(self._evaluate_lattice(np.asarray(times, dtype=float), paths), dtype=float))

    def __call__(self, p):
        if isinstance(p, PiecewiseConstantPath):
            return self.evaluate_pc(p)
        return self.evaluate(p)

    def __add__(self, other):
        return SumPayoff([(1.0, self), (1.0, _as_payoff(other))])

    __radd__ = __add__

    def __mul__(self, c):
        return SumPayoff([(float(c), self)])

    __rmul__ = __mul__

    def __neg__(self):
        return SumPayoff([(-1.0, self)])

    def __sub__(self, other):
        return self + (-1.0) * _as_payoff(other)


def _as_payoff(x) -> Payoff:
    if isinstance(x, Payoff):
        return x
    return Constant(float(x))


def _pc_at(f: PiecewiseConstantPath, t: float) -> np.ndarray:
    return np.array([float(x) for x in f.at(Fraction(t))])


def _time_index(times: np.ndarray, t: float) -> Optional[int]:
    hit = np.flatnonzero(np.isclose(times, t, rtol=0, atol=1e-15))
    return int(hit[0]) if hit.size else None


def _lattice_at(times, paths, t) -> np.ndarray:
    k = _time_index(times, t)
    if k is not None:
        return paths[:, k, :]
    out = np.empty((paths.shape[0], paths.shape[2]))
    for i in range(paths.shape[2]):
        out[:, i] = np.array([np.interp(t, times, w) for w in paths[:, :, i]])
    return out


class Constant(Payoff):
    kind = "constant"

    def __init__(self, c: float):
        super().__init__(kappa=abs(c), modulus=lambda x: 0.0, growth=(abs(c), 0.0), time_continuity_L=0.0)
        self.c = float(c)

    def _evaluate(self, p):
        return self.c

    def _evaluate_pc(self, f):
        return self.c

    def _evaluate_lattice(self, times, paths):
        return np.full(paths.shape[0], self.c)


class European(Payoff):
    """f(S_T) for a function of the full coordinate vector at time ``maturity``
    (None means the horizon)."""

    kind = "european"

    def __init__(self, f: Callable[[np.ndarray], float], maturity: Optional[float] = None,
                 vectorised: Optional[Callable[[np.ndarray], np.ndarray]] = None, **meta):
        meta.setdefault("time_continuity_L", 0.0)
        super().__init__(**meta)
        self.f = f
        self.vf = vectorised
        self.maturity = maturity

    def _t(self, horizon):
        return horizon if self.maturity is None else self.maturity

    def _evaluate(self, p):
        return self.f(p.at(self._t(p.horizon)))

    def _evaluate_pc(self, f):
        return self.f(_pc_at(f, self._t(float(f.horizon))))

    def _evaluate_lattice(self, times, paths):
        x = _lattice_at(times, paths, self._t(times[-1]))
        if self.vf is not None:
            return self.vf(x)
        return np.array([self.f(row) for row in x])


def call(strike: float, asset: int = 0, maturity: Optional[float] = None) -> European:
    return European(lambda s: max(s[asset] - strike, 0.0), maturity,
                    vectorised=lambda x: np.maximum(x[:, asset] - strike, 0.0),
                    modulus=_identity, growth=(1.0, 1.0))


def put(strike: float, asset: int = 0, maturity: Optional[float] = None) -> European:
    return European(lambda s: max(strike - s[asset], 0.0), maturity,
                    vectorised=lambda x: np.maximum(strike - x[:, asset], 0.0),
                    kappa=float(strike), modulus=_identity, growth=(float(strike), 0.0))


def forward(asset: int = 0, maturity: Optional[float] = None) -> European:
    return European(lambda s: float(s[asset]), maturity, vectorised=lambda x: x[:, asset].copy(),
                    modulus=_identity, growth=(1.0, 1.0))


class Basket(Payoff):
    """sum_i w_i S^i_T, or its positive part above ``strike`` if given."""

    kind = "basket"

    def __init__(self, weights: Sequence[float], maturity: Optional[float] = None,
                 strike: Optional[float] = None):
        w = np.asarray(weights, dtype=float)
        l1 = float(np.abs(w).sum())
        super().__init__(modulus=lambda x: l1 * x, growth=(l1 + abs(strike or 0.0), 1.0),
                         time_continuity_L=0.0)
        self.weights = w
        self.maturity = maturity
        self.strike = strike

    def _value(self, x):
        v = x[..., : self.weights.size] @ self.weights
        return v if self.strike is None else np.maximum(v - self.strike, 0.0)

    def _t(self, horizon):
        return horizon if self.maturity is None else self.maturity

    def _evaluate(self, p):
        return float(self._value(p.at(self._t(p.horizon))))

    def _evaluate_pc(self, f):
        return float(self._value(_pc_at(f, self._t(float(f.horizon)))))

    def _evaluate_lattice(self, times, paths):
        return self._value(_lattice_at(times, paths, self._t(times[-1])))


class LookbackMax(Payoff):
    """sup_t S^asset_t; exact on piecewise-linear paths (attained at a knot)."""

    kind = "lookback_max"

    def __init__(self, asset: int = 0):
        super().__init__(modulus=_identity, growth=(1.0, 1.0), time_continuity_L=0.0)
        self.asset = asset

    def _evaluate(self, p):
        return float(p.values[:, self.asset].max())

    def _evaluate_pc(self, f):
        return float(max(max(v[self.asset] for v in f.values), f.terminal[self.asset]))

    def _evaluate_lattice(self, times, paths):
        return paths[:, :, self.asset].max(axis=1)


class AsianAverage(Payoff):
    """Average of S^asset over ``sampling_times``, or the continuous time average
    (1/T) int_0^T S_t dt when ``sampling_times`` is None."""

    kind = "asian_average"

    def __init__(self, asset: int = 0, sampling_times: Optional[Sequence[float]] = None,
                 horizon: float = 1.0):
        continuous = sampling_times is None
        super().__init__(modulus=_identity, growth=(1.0, 1.0),
                         time_continuity_L=(1.0 / horizon) if continuous else None)
        self.asset = asset
        self.sampling_times = None if continuous else tuple(float(t) for t in sampling_times)

    def _evaluate(self, p):
        x = p.values[:, self.asset]
        if self.sampling_times is None:
            return float(np.sum(np.diff(p.times) * (x[1:] + x[:-1]) / 2) / p.horizon)
        return float(np.mean([np.interp(t, p.times, x) for t in self.sampling_times]))

    def _evaluate_pc(self, f):
        if self.sampling_times is None:
            t = list(f.jump_times) + [f.horizon]
            tot = sum((t[k + 1] - t[k]) * f.values[k][self.asset] for k in range(len(f.values)))
            return float(tot / f.horizon)
        return float(np.mean([_pc_at(f, t)[self.asset] for t in self.sampling_times]))

    def _evaluate_lattice(self, times, paths):
        x = paths[:, :, self.asset]
        if self.sampling_times is None:
            return (x[:, 1:] + x[:, :-1]) / 2 @ np.diff(times) / times[-1]
        cols = [np.array([np.interp(t, times, w) for w in x]) for t in self.sampling_times]
        return np.mean(cols, axis=0)


class TableGrid(Payoff):
    """Arbitrary values on the paths of one lattice, keyed by the path's values."""

    kind = "table"

    def __init__(self, times: Sequence[float], table: Mapping[Tuple[float, ...], float]):
        vals = np.array(list(table.values()), dtype=float)
        bound = float(np.abs(vals).max()) if vals.size else 0.0
        super().__init__(kappa=bound)
        self.times = np.asarray(times, dtype=float)
        self.table: Dict[Tuple[float, ...], float] = {tuple(map(float, k)): float(v) for k, v in table.items()}

    @classmethod
    def from_values(cls, times, paths: np.ndarray, values: Sequence[float]) -> "TableGrid":
        return cls(times, {tuple(w.reshape(-1)): v for w, v in zip(np.asarray(paths, dtype=float), values)})

    def _lookup(self, times, w):
        if times.shape != self.times.shape or np.any(times != self.times):
            raise PayoffDomainError("table payoff queried on a different time grid")
        key = tuple(np.asarray(w, dtype=float).reshape(-1).tolist())
        try:
            return self.table[key]
        except KeyError:
            raise PayoffDomainError("table payoff queried off its lattice") from None

    def _evaluate(self, p):
        return self._lookup(p.times, p.values)

    def _evaluate_lattice(self, times, paths):
        return np.array([self._lookup(times, w) for w in paths])


class Clipped(Payoff):
    """G clipped to [-D, D]."""

    kind = "clipped"

    def __init__(self, G: Payoff, D: float):
        if not D > 0:
            raise ValueError("clip level must be positive")
        super().__init__(kappa=float(D), modulus=G.modulus, growth=(float(D), 0.0),
                         time_continuity_L=G.time_continuity_L)
        self.G = G
        self.D = float(D)

    def _evaluate(self, p):
        return float(np.clip(self.G._evaluate(p), -self.D, self.D))

    def _evaluate_pc(self, f):
        return float(np.clip(self.G._evaluate_pc(f), -self.D, self.D))

    def _evaluate_lattice(self, times, paths):
        return np.clip(self.G._evaluate_lattice(times, paths), -self.D, self.D)


class SumPayoff(Payoff):
    kind = "sum"

    def __init__(self, terms: Sequence[Tuple[float, Payoff]]):
        flat = []
        for c, g in terms:
            if isinstance(g, SumPayoff):
                flat.extend((c * c2, g2) for c2, g2 in g.terms)
            else:
                flat.append((c, g))
        self.terms = flat
        kap = [g.kappa for _, g in flat]
        kappa = sum(abs(c) * k for (c, _), k in zip(flat, kap)) if all(k is not None for k in kap) else None
        mods = [g.modulus for _, g in flat]
        modulus = None
        if all(m is not None for m in mods):
            def modulus(x, _t=tuple(flat)):
                return sum(abs(c) * g.modulus(x) for c, g in _t)
        tcs = [g.time_continuity_L for _, g in flat]
        tc = sum(abs(c) * t for (c, _), t in zip(flat, tcs)) if all(t is not None for t in tcs) else None
        grs = [g.growth for _, g in flat]
        growth = None
        if all(gr is not None for gr in grs):
            growth = (sum(abs(c) * gr[0] for (c, _), gr in zip(flat, grs)), max(gr[1] for gr in grs))
        super().__init__(kappa=kappa, modulus=modulus, growth=growth, time_continuity_L=tc)

    def _evaluate(self, p):
        return sum(c * g._evaluate(p) for c, g in self.terms)

    def _evaluate_pc(self, f):
        return sum(c * g._evaluate_pc(f) for c, g in self.terms)

    def _evaluate_lattice(self, times, paths):
        return sum(c * g._evaluate_lattice(times, paths) for c, g in self.terms)


class AlphaTail(Payoff):
    """The tail functional (M^p + 1) 1{M + 1 >= D} + M^p / D with M the running
    max over the first d coordinates."""

    kind = "alpha_tail"

    def __init__(self, D: float, growth_p: float, d: int = 1):
        super().__init__(growth=(1.0 + 1.0 / D, growth_p))
        self.D, self.p, self.d = float(D), float(growth_p), int(d)

    def _value(self, M):
        Mp = M ** self.p
        return (Mp + 1.0) * (M + 1.0 >= self.D) + Mp / self.D

    def _evaluate(self, p):
        return float(self._value(np.abs(p.values[:, : self.d]).max()))

    def _evaluate_lattice(self, times, paths):
        return self._value(np.abs(paths[:, :, : self.d]).max(axis=(1, 2)))


# ---------------------------------------------------------------------------
# regularity checks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModulusReport:
    ok: bool
    worst_ratio: float
    violations: int
    worst_index: Optional[int]


def validate_modulus(G: Payoff, pairs: Sequence[Tuple[GridPath, GridPath]], tol: float = 1e-12) -> ModulusReport:
    """Check |G(a) - G(b)| <= f_e(||a - b||) on every pair; report the worst ratio."""
    from .paths import sup_norm_distance

    if G.modulus is None:
        raise ValueError("payoff declares no modulus of continuity")
    worst, worst_i, bad = 0.0, None, 0
    for i, (a, b) in enumerate(pairs):
        diff = abs(G.evaluate(a) - G.evaluate(b))
        bound = G.modulus(sup_norm_distance(a, b))
        if diff > bound + tol:
            bad += 1
        ratio = diff / bound if bound > 0 else (0.0 if diff <= tol else np.inf)
        if ratio > worst or worst_i is None:
            worst, worst_i = ratio, i
    return ModulusReport(bad == 0, float(worst), bad, worst_i)


@dataclass(frozen=True)
class TimeContinuityReport:
    ok: bool
    lhs: float
    rhs: float


def _segments(f: PiecewiseConstantPath, maturities: Sequence[Fraction]):
    """Split [0, T] at jump times and maturities; return per-maturity lists of
    (length, value)."""
    cuts = sorted(set(f.jump_times) | set(maturities) | {f.horizon})
    per = [[] for _ in maturities]
    for a, b in zip(cuts, cuts[1:]):
        i = next(k for k, T in enumerate(maturities) if b <= T)
        per[i].append((b - a, f.at(a)))
    return per


def check_time_continuity(G: Payoff, base: PiecewiseConstantPath, perturbed: PiecewiseConstantPath,
                          maturities: Optional[Sequence[float]] = None, tol: float = 1e-12) -> TimeContinuityReport:
    """|G(base) - G(perturbed)| <= L ||v||^p sum |dt - dt'| for paths with the same
    values on corresponding segments of every maturity interval."""
    if G.time_continuity_L is None or G.growth is None:
        raise ValueError("payoff declares no time-continuity constant / growth exponent")
    if base.horizon != perturbed.horizon:
        raise ValueError("paths live on different horizons")
    T = base.horizon
    mats = [T] if maturities is None else sorted({mpq(t) for t in maturities if mpq(t) < T} | {T})
    sa, sb = _segments(base, mats), _segments(perturbed, mats)
    total = mpq(0)
    for A, B in zip(sa, sb):
        # merge zero-information cuts: consecutive segments with equal values
        A2, B2 = _merge_equal(A), _merge_equal(B)
        if len(A2) != len(B2) or any(va != vb for (_, va), (_, vb) in zip(A2, B2)):
            raise ValueError("paths do not share jump values within each maturity interval")
        total += sum(abs(la - lb) for (la, _), (lb, _) in zip(A2, B2))
    if base.terminal != perturbed.terminal:
        raise ValueError("paths have different terminal values")
    norm = max(max(abs(float(x)) for x in v) for v in base.values + (base.terminal,))
    p = G.growth[1]
    rhs = G.time_continuity_L * norm ** p * float(total)
    lhs = abs(G.evaluate_pc(base) - G.evaluate_pc(perturbed))
    return TimeContinuityReport(lhs <= rhs + tol, lhs, rhs)


def _merge_equal(segs):
    out = []
    for length, v in segs:
        if out and out[-1][1] == v:
            out[-1] = (out[-1][0] + length, v)
        else:
            out.append((length, v))
    return out
