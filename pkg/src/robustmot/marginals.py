"""Finitely supported marginals and measure-level tools.

Arithmetic is generic: marginals built from ``Fraction`` inputs stay exact
through the put-price inversion, so round trips can be checked with ``==``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .lp import solve_lp
from .paths import GridPath, InfoSpace

PROB_TOL = 1e-12


class ArbitrageError(ValueError):
    """Put prices admit a static arbitrage (non-convex, slope outside [0, 1], ...)."""


class MarginalInfeasible(ValueError):
    """A requested construction has no solution (e.g. terminal mean != 1)."""


def _is_exact(x) -> bool:
    return not isinstance(x, (float, np.floating))


def _close(a, b, tol=PROB_TOL) -> bool:
    if _is_exact(a) and _is_exact(b):
        return a == b
    return abs(float(a) - float(b)) <= tol


@dataclass(frozen=True)
class DiscreteMarginal:
    support: Tuple
    probs: Tuple

    def __post_init__(self):
        s = tuple(self.support)
        p = tuple(self.probs)
        if len(s) == 0 or len(s) != len(p):
            raise ValueError("support and probs must be nonempty and of equal length")
        if any(x < 0 for x in s):
            raise ValueError("support must be nonnegative")
        if any(b <= a for a, b in zip(s, s[1:])):
            raise ValueError("support must be strictly increasing")
        if any(q < -PROB_TOL for q in p):
            raise ValueError("probabilities must be nonnegative")
        if not _close(sum(p), 1):
            raise ValueError(f"probabilities sum to {sum(p)}, not 1")
        object.__setattr__(self, "support", s)
        object.__setattr__(self, "probs", p)

    @classmethod
    def dirac(cls, x=1.0) -> "DiscreteMarginal":
        return cls((x,), (1 if _is_exact(x) else 1.0,))

    @classmethod
    def from_atoms(cls, atoms: Iterable[Tuple], tol: float = 0.0) -> "DiscreteMarginal":
        """Merge (point, mass) pairs into a marginal; masses <= tol are dropped."""
        acc = {}
        for x, q in atoms:
            acc[x] = acc.get(x, 0) + q
        pts = sorted(k for k, v in acc.items() if v > tol)
        return cls(tuple(pts), tuple(acc[k] for k in pts))

    def mean(self):
        return sum(x * q for x, q in zip(self.support, self.probs))

    def moment(self, p: float) -> float:
        return float(sum(abs(float(x)) ** p * float(q) for x, q in zip(self.support, self.probs)))

    def put(self, K):
        return sum(q * max(K - x, 0) for x, q in zip(self.support, self.probs))

    def call(self, K):
        return sum(q * max(x - K, 0) for x, q in zip(self.support, self.probs))

    def is_calibrated(self, tol: float = PROB_TOL) -> bool:
        return _close(self.mean(), 1, tol)

    def arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.array(self.support, dtype=float), np.array(self.probs, dtype=float)


@dataclass(frozen=True)
class PutPriceCurve:
    """Piecewise-linear put prices through (0, 0) and the quoted (strike, price)
    pairs, extended linearly beyond the last strike."""

    strikes: Tuple
    prices: Tuple

    def __post_init__(self):
        k = tuple(self.strikes)
        p = tuple(self.prices)
        if len(k) == 0 or len(k) != len(p):
            raise ValueError("strikes and prices must be nonempty and of equal length")
        if any(x < 0 for x in k) or any(b <= a for a, b in zip(k, k[1:])):
            raise ValueError("strikes must be nonnegative and strictly increasing")
        object.__setattr__(self, "strikes", k)
        object.__setattr__(self, "prices", p)

    def knots(self) -> Tuple[List, List]:
        ks, ps = list(self.strikes), list(self.prices)
        if ks[0] != 0:
            zero = 0 if _is_exact(ks[0]) else 0.0
            ks.insert(0, zero)
            ps.insert(0, zero)
        return ks, ps

    def __call__(self, K):
        ks, ps = self.knots()
        if K >= ks[-1]:
            if len(ks) == 1:
                return ps[-1]
            s = (ps[-1] - ps[-2]) / (ks[-1] - ks[-2])
            return ps[-1] + s * (K - ks[-1])
        for a in range(len(ks) - 1):
            if ks[a] <= K <= ks[a + 1]:
                w = (K - ks[a]) / (ks[a + 1] - ks[a])
                return ps[a] + w * (ps[a + 1] - ps[a])
        raise ValueError("strike outside the curve")


def marginal_from_puts(curve: PutPriceCurve, tol: float = PROB_TOL) -> DiscreteMarginal:
    """Read the marginal off the right derivative of the put curve.

    mu([0, K]) = p'(K+), so each kink carries an atom equal to the slope jump.
    """
    ks, ps = curve.knots()
    if len(ks) < 2:
        raise ArbitrageError("need at least one segment to read a slope")
    if not _close(ps[0], 0, tol):
        raise ArbitrageError("put price at strike 0 must be 0")
    for K, P in zip(ks, ps):
        if P < -tol or P > K + tol:
            raise ArbitrageError(f"put price {P} at strike {K} outside [0, K]")
    slopes = [(ps[a + 1] - ps[a]) / (ks[a + 1] - ks[a]) for a in range(len(ks) - 1)]
    for a, s in enumerate(slopes):
        if s < -tol or s > 1 + tol:
            raise ArbitrageError(f"slope {s} on [{ks[a]}, {ks[a + 1]}] outside [0, 1]")
    for a in range(len(slopes) - 1):
        if slopes[a + 1] < slopes[a] - tol:
            raise ArbitrageError(f"put curve not convex at strike {ks[a + 1]}")
    if not _close(slopes[-1], 1, tol):
        raise ArbitrageError(f"final slope {slopes[-1]} != 1: implied total mass is not 1")
    atoms = [(ks[0], slopes[0])]
    for a in range(1, len(slopes)):
        atoms.append((ks[a], slopes[a] - slopes[a - 1]))
    exact = all(_is_exact(x) for x in ks + ps)
    atoms = [(x, m) for x, m in atoms if (m != 0 if exact else m > tol)]
    if not exact:
        total = sum(m for _, m in atoms)
        atoms = [(x, m / total) for x, m in atoms]
    return DiscreteMarginal(tuple(x for x, _ in atoms), tuple(m for _, m in atoms))


def puts_from_marginal(mu: DiscreteMarginal, strikes: Optional[Sequence] = None) -> PutPriceCurve:
    """Put prices E[(K - X)^+] at the given strikes.

    The default strikes are the atoms plus one strike above the top atom, which
    is what ``marginal_from_puts`` needs to see a final slope of 1.
    """
    if strikes is None:
        top = mu.support[-1]
        strikes = list(mu.support) + [top + 1]
    return PutPriceCurve(tuple(strikes), tuple(mu.put(K) for K in strikes))


def convex_order_leq(mu: DiscreteMarginal, nu: DiscreteMarginal, tol: float = PROB_TOL) -> bool:
    """mu <= nu in convex order: equal means and dominated call prices at all kinks."""
    if not _close(mu.mean(), nu.mean(), tol):
        return False
    for K in sorted(set(mu.support) | set(nu.support)):
        cm, cn = mu.call(K), nu.call(K)
        if (cm > cn) if (_is_exact(cm) and _is_exact(cn)) else (float(cm) > float(cn) + tol):
            return False
    return True


def strassen_feasible(mus: Sequence[Sequence[DiscreteMarginal]], tol: float = PROB_TOL) -> bool:
    """Every marginal has mean 1 and each asset's sequence increases in convex order."""
    for seq in mus:
        if not seq:
            raise ValueError("each asset needs at least one marginal")
        if not all(m.is_calibrated(tol) for m in seq):
            return False
        if not all(convex_order_leq(a, b, tol) for a, b in zip(seq, seq[1:])):
            return False
    return True


def martingale_coupling_feasible(mu: DiscreteMarginal, nu: DiscreteMarginal, backend=None) -> bool:
    """Is there a one-step martingale transport from mu to nu?  Solved as an LP."""
    x, p = mu.arrays()
    y, q = nu.arrays()
    n, m = x.size, y.size
    rows, rhs = [], []
    for i in range(n):
        r = np.zeros(n * m)
        r[i * m : (i + 1) * m] = 1.0
        rows.append(r)
        rhs.append(p[i])
        r = np.zeros(n * m)
        r[i * m : (i + 1) * m] = y - x[i]
        rows.append(r)
        rhs.append(0.0)
    for j in range(m):
        r = np.zeros(n * m)
        r[j::m] = 1.0
        rows.append(r)
        rhs.append(q[j])
    res = solve_lp(np.zeros(n * m), np.array(rows), np.array(rhs), backend=backend)
    return res.ok


def bl_distance(mu: DiscreteMarginal, nu: DiscreteMarginal, backend=None) -> float:
    """sup |int f dnu - int f dmu| over f with |f| <= 1 and Lipschitz constant 1.

    On the union support only adjacent Lipschitz constraints matter (the
    triangle inequality along the line gives the rest), and any feasible
    values extend to the line piecewise linearly.
    """
    pts = sorted(set(float(x) for x in mu.support) | set(float(x) for x in nu.support))
    idx = {x: k for k, x in enumerate(pts)}
    w = np.zeros(len(pts))
    for x, q in zip(nu.support, nu.probs):
        w[idx[float(x)]] += float(q)
    for x, q in zip(mu.support, mu.probs):
        w[idx[float(x)]] -= float(q)
    n = len(pts)
    if n == 1:
        return abs(float(w[0]))
    A, b = [], []
    for k in range(n - 1):
        gap = pts[k + 1] - pts[k]
        r = np.zeros(n)
        r[k + 1], r[k] = 1.0, -1.0
        A.append(r)
        b.append(gap)
        A.append(-r)
        b.append(gap)
    res = solve_lp(-w, A_ub=np.array(A), b_ub=np.array(b), bounds=[(-1.0, 1.0)] * n, backend=backend)
    if not res.ok:
        raise RuntimeError(f"bounded-Lipschitz LP failed: {res.status}")
    return max(0.0, -res.value)


# ---------------------------------------------------------------------------
# tail functionals
# ---------------------------------------------------------------------------

def alpha_D(p: GridPath, D: float, growth_p: float, d: Optional[int] = None) -> float:
    """(M^p + 1) 1{M + 1 >= D} + M^p / D with M = max_i sup_t |S^i_t| over the
    first d coordinates."""
    if not D > 1 or not growth_p > 1:
        raise ValueError("need D > 1 and p > 1")
    d = p.dim if d is None else d
    M = float(np.abs(p.values[:, :d]).max())
    Mp = M ** growth_p
    return (Mp + 1.0) * (1.0 if M + 1.0 >= D else 0.0) + Mp / D


def e2_tail_bound(mu_n: Sequence[DiscreteMarginal], D: float, growth_p: float) -> float:
    """(p/(p-1))^p sum_i (2 int_{|x| >= (p-1)/p (D-1)} |x|^p dmu_i + (1/D) int |x|^p dmu_i)."""
    if not D > 1 or not growth_p > 1:
        raise ValueError("need D > 1 and p > 1")
    p = growth_p
    level = (p - 1) / p * (D - 1)
    total = 0.0
    for mu in mu_n:
        x, q = mu.arrays()
        ax = np.abs(x) ** p
        total += 2.0 * float(ax[np.abs(x) >= level] @ q[np.abs(x) >= level]) + float(ax @ q) / D
    return (p / (p - 1)) ** p * total


# ---------------------------------------------------------------------------
# conditional-expectation lift of a terminal law
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LatticeMartingale:
    """Finitely many paths on a common time grid with probabilities."""

    times: np.ndarray
    paths: np.ndarray  # (n_paths, n_times, dim)
    probs: np.ndarray

    def martingale_residual(self) -> float:
        """Largest |E[X_{k+1} - X_k | prefix]| weighted by prefix mass."""
        worst = 0.0
        n, m1, dim = self.paths.shape
        for k in range(m1 - 1):
            keys = {}
            for w in range(n):
                key = self.paths[w, : k + 1].tobytes()
                keys.setdefault(key, []).append(w)
            for members in keys.values():
                inc = (self.paths[members, k + 1] - self.paths[members, k]).T @ self.probs[members]
                worst = max(worst, float(np.abs(inc).max()))
        return worst

    def expectation(self, k: int) -> np.ndarray:
        return self.probs @ self.paths[:, k]


def conditional_lift(atoms: Sequence[Sequence[float]], probs: Sequence[float],
                     times: Sequence[float], info: Optional[InfoSpace] = None,
                     tol: float = 1e-12) -> LatticeMartingale:
    """A lattice martingale on ``times`` whose terminal law is the given joint law.

    The terminal atoms are grouped into clusters; every node of the tree sits
    at its cluster's conditional mean.  Clusters are split in two along their
    highest-variance coordinate, as late as possible while still reaching
    single atoms by the last step (the last step may split several ways when
    there are too few steps for binary splits).
    """
    X = np.atleast_2d(np.asarray(atoms, dtype=float))
    if X.shape[0] != len(probs):
        X = X.T if X.shape[1] == len(probs) else X
    q = np.asarray(probs, dtype=float)
    times = np.asarray(times, dtype=float)
    if times.size < 2 or times[0] != 0 or np.any(np.diff(times) <= 0):
        raise ValueError("times must increase from 0 with at least one step")
    if abs(q.sum() - 1) > tol or np.any(q < 0):
        raise ValueError("probabilities must be nonnegative and sum to 1")
    mean = q @ X
    if np.any(np.abs(mean - 1) > 1e-12):
        raise MarginalInfeasible(f"terminal mean {mean} differs from 1")
    if info is not None:
        for x in X:
            if info.K and np.any(np.abs(x[info.d :] - info.option_coordinates(x[: info.d])) > 1e-9):
                raise MarginalInfeasible("terminal atom outside the information space")
    keep = q > 0
    X, q = X[keep], q[keep]
    steps = times.size - 1
    dim = X.shape[1]

    def cmean(idx):
        return (q[idx] @ X[idx]) / q[idx].sum()

    # each cluster: (atom indices, history of node values)
    clusters = [(np.arange(X.shape[0]), [np.ones(dim)])]
    for k in range(1, steps + 1):
        remaining = steps - k + 1
        nxt = []
        for idx, hist in clusters:
            a = idx.size
            if a == 1:
                nxt.append((idx, hist + [X[idx[0]].copy()]))
                continue
            need = math.ceil(math.log2(a))
            if k == steps:
                for i in idx:
                    nxt.append((np.array([i]), hist + [X[i].copy()]))
            elif need >= remaining:
                sub = X[idx]
                w = q[idx] / q[idx].sum()
                var = w @ (sub - w @ sub) ** 2
                axis = int(np.argmax(var))
                order = idx[np.argsort(sub[:, axis], kind="stable")]
                half = (a + 1) // 2
                for part in (order[:half], order[half:]):
                    nxt.append((part, hist + [cmean(part)]))
            else:
                nxt.append((idx, hist + [hist[-1].copy()]))
        clusters = nxt
    paths = np.array([np.array(h) for _, h in clusters])
    pr = np.array([q[idx].sum() for idx, _ in clusters])
    lm = LatticeMartingale(times, paths, pr)
    res = lm.martingale_residual()
    if res > 1e-10:
        raise RuntimeError(f"lift failed the martingale check (residual {res})")
    return lm
