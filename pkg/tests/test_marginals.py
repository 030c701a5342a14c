from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from robustmot.marginals import (ArbitrageError, DiscreteMarginal, MarginalInfeasible, PutPriceCurve, alpha_D,
                                 bl_distance, conditional_lift, convex_order_leq, e2_tail_bound,
                                 marginal_from_puts, martingale_coupling_feasible, puts_from_marginal,
                                 strassen_feasible)
from robustmot.paths import GridPath, constant_path

F = Fraction
TWO = DiscreteMarginal((0.5, 1.5), (0.5, 0.5))
WIDE = DiscreteMarginal((0.0, 2.0), (0.5, 0.5))


def test_puts_to_marginal_examples():
    mu = marginal_from_puts(PutPriceCurve((0, 1, 2), (0, 0, 1)))
    assert mu.support == (1,) and mu.probs == (1,)
    curve = PutPriceCurve((0, F(1, 2), F(3, 2), F(5, 2)), (0, 0, F(1, 2), F(3, 2)))
    mu = marginal_from_puts(curve)
    assert mu.support == (F(1, 2), F(3, 2)) and mu.probs == (F(1, 2), F(1, 2))
    assert min(mu.support) >= F(1, 2)  # zero prices on [0, 1/2] leave no mass below 1/2


@pytest.mark.parametrize("strikes,prices", [
    ((1, 2, 3), (0.5, 0.6, 2.0)),   # not convex
    ((1, 2), (0.0, 0.5)),           # final slope 1/2
    ((1, 2), (1.5, 2.5)),           # price above strike
])
def test_puts_arbitrage(strikes, prices):
    with pytest.raises(ArbitrageError):
        marginal_from_puts(PutPriceCurve(strikes, prices))


def test_marginal_to_puts_examples():
    assert DiscreteMarginal.dirac(1.0).put(1.5) == 0.5
    assert puts_from_marginal(TWO, [1.0]).prices == (0.25,)


def test_convex_order_examples():
    assert convex_order_leq(DiscreteMarginal.dirac(1.0), TWO)
    assert convex_order_leq(TWO, WIDE)
    assert not convex_order_leq(WIDE, TWO)
    assert strassen_feasible([[DiscreteMarginal.dirac(1.0)]])
    assert strassen_feasible([[DiscreteMarginal.dirac(1.0), TWO]])
    assert not strassen_feasible([[TWO, DiscreteMarginal.dirac(1.0)]])
    assert not strassen_feasible([[DiscreteMarginal((1.0, 1.2), (0.5, 0.5))]])


def test_bl_examples():
    assert bl_distance(TWO, TWO) == 0
    assert bl_distance(DiscreteMarginal.dirac(1.0), DiscreteMarginal.dirac(1.5)) == pytest.approx(0.5)
    assert bl_distance(DiscreteMarginal.dirac(0.0), DiscreteMarginal.dirac(5.0)) == pytest.approx(2.0)


def bl_oracle(mu, nu):
    """Same supremum with every pairwise Lipschitz constraint written out (scipy HiGHS)."""
    pts = sorted(set(mu.support) | set(nu.support))
    w = np.zeros(len(pts))
    for x, q in zip(nu.support, nu.probs):
        w[pts.index(x)] += q
    for x, q in zip(mu.support, mu.probs):
        w[pts.index(x)] -= q
    A, b = [], []
    for i in range(len(pts)):
        for j in range(len(pts)):
            if i != j:
                r = np.zeros(len(pts))
                r[i], r[j] = 1, -1
                A.append(r)
                b.append(abs(pts[i] - pts[j]))
    res = linprog(-w, A_ub=np.array(A) if A else None, b_ub=np.array(b) if b else None,
                  bounds=[(-1, 1)] * len(pts), method="highs")
    return -res.fun


@st.composite
def marginals(draw):
    xs = sorted(set(draw(st.lists(st.integers(0, 16), min_size=1, max_size=5))))
    w = np.array(draw(st.lists(st.integers(1, 9), min_size=len(xs), max_size=len(xs))), dtype=float)
    return DiscreteMarginal(tuple(x / 4 for x in xs), tuple(w / w.sum()))


@settings(max_examples=80, deadline=None)
@given(marginals(), marginals())
def test_bl_matches_oracle(mu, nu):
    assert bl_distance(mu, nu) == pytest.approx(bl_oracle(mu, nu), abs=1e-9)


@st.composite
def exact_marginals(draw):
    xs = sorted(set(draw(st.lists(st.integers(0, 16), min_size=1, max_size=5))))
    w = draw(st.lists(st.integers(1, 9), min_size=len(xs), max_size=len(xs)))
    return DiscreteMarginal(tuple(F(x, 4) for x in xs), tuple(F(v, sum(w)) for v in w))


@settings(max_examples=60, deadline=None)
@given(exact_marginals())
def test_puts_round_trip(mu):
    curve = puts_from_marginal(mu)
    assert marginal_from_puts(curve) == mu
    assert puts_from_marginal(marginal_from_puts(curve), curve.strikes) == curve


@settings(max_examples=60, deadline=None)
@given(marginals(), marginals())
def test_convex_order_vs_coupling(mu, nu):
    shift = mu.mean() - nu.mean()
    if min(nu.support) + shift < 0:
        return
    nu = DiscreteMarginal(tuple(x + shift for x in nu.support), nu.probs)
    assert convex_order_leq(mu, nu) == martingale_coupling_feasible(mu, nu)


def test_alpha_examples():
    low = GridPath([0, 1], [[0.8], [0.5]], normalised=False)
    assert alpha_D(low, 2, 2) == pytest.approx(0.32)
    high = GridPath([0, 1], [[1.5], [0.5]], normalised=False)
    assert alpha_D(high, 2, 2) == pytest.approx(4.375)
    assert alpha_D(constant_path(1), 3, 2) == pytest.approx(1 / 3)
    with pytest.raises(ValueError):
        alpha_D(constant_path(1), 1, 2)


def test_e2_examples_and_monotone():
    d1 = DiscreteMarginal.dirac(1.0)
    assert e2_tail_bound([d1], 10, 2) == pytest.approx(0.4)
    assert e2_tail_bound([d1], 2, 2) == pytest.approx(10.0)
    vals = [e2_tail_bound([WIDE], D, 2) for D in (2, 4, 8, 16, 64, 1024)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 0.05


def test_conditional_lift_examples():
    m = conditional_lift([[1.0, 1.0]], [1.0], [0, 0.5, 1])
    assert np.all(m.paths == 1.0)
    m = conditional_lift([[0.5], [1.5]], [0.5, 0.5], [0, 0.5, 1])
    assert np.all(m.paths[:, 1, 0] == 1.0)
    assert sorted(m.paths[:, 2, 0]) == [0.5, 1.5]
    with pytest.raises(MarginalInfeasible):
        conditional_lift([[0.5], [1.7]], [0.5, 0.5], [0, 1])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 12), st.integers(0, 12)), min_size=1, max_size=6, unique=True),
       st.integers(1, 4))
def test_conditional_lift_is_martingale(pts, steps):
    X = np.array(pts, dtype=float) / 4
    q = np.ones(len(pts)) / len(pts)
    X = X - q @ X + 1  # recentre to mean one
    if X.min() < 0:
        return
    m = conditional_lift(X, q, np.linspace(0, 1, steps + 1))
    assert m.martingale_residual() <= 1e-12
    term = {tuple(np.round(x, 12)): 0.0 for x in X}
    for path, w in zip(m.paths, m.probs):
        term[tuple(np.round(path[-1], 12))] += w
    assert all(abs(v - 1 / len(pts)) <= 1e-12 for v in term.values())
