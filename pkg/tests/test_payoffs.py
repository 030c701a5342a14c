from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robustmot.discretise import PiecewiseConstantPath
from robustmot.paths import GridPath, constant_path, linear_path, sup_norm_distance
from robustmot.payoffs import (AsianAverage, Basket, Clipped, LookbackMax, PayoffDomainError, TableGrid, call,
                               check_time_continuity, forward, put, validate_modulus)

F = Fraction


def random_path(rng, d=1, n=5):
    t = np.unique(np.concatenate([[0, 1], rng.uniform(0, 1, n)]))
    x = np.abs(1 + np.cumsum(rng.normal(0, 0.3, (t.size, d)), axis=0))
    x[0] = 1
    return GridPath(t, x)


def test_evaluate_examples():
    assert call(1.0).evaluate(linear_path(1.3)) == pytest.approx(0.3)
    assert LookbackMax().evaluate(constant_path(1)) == 1
    assert AsianAverage(sampling_times=[0.5, 1.0]).evaluate(linear_path(1.2)) == pytest.approx(1.15)
    # continuous average of the ramp is its midpoint
    assert AsianAverage().evaluate(linear_path(1.2)) == pytest.approx(1.1)
    assert Basket([0.5, 0.5], strike=1.0).evaluate(linear_path([1.4, 0.8])) == pytest.approx(0.1)


def test_lookback_exact_at_knot():
    p = GridPath([0, 0.3, 0.7, 1], [[1.0], [1.8], [0.4], [1.1]])
    assert LookbackMax().evaluate(p) == 1.8


def test_table_grid_off_lattice():
    times = [0, 1]
    paths = np.array([[[1.0], [0.5]], [[1.0], [1.5]]])
    G = TableGrid.from_values(times, paths, [2.0, -3.0])
    assert G.evaluate(GridPath(times, paths[1])) == -3.0
    assert G.kappa == 3.0
    with pytest.raises(PayoffDomainError):
        G.evaluate(linear_path(1.2))
    with pytest.raises(PayoffDomainError):
        G.evaluate(GridPath([0, 0.5, 1], [[1.0], [1.0], [0.5]]))


def test_clipped_metadata():
    G = Clipped(LookbackMax(), 1.5)
    assert G.kappa == 1.5
    assert G.modulus is LookbackMax().modulus or G.modulus(0.3) == pytest.approx(0.3)
    assert G.evaluate(linear_path(3.0)) == 1.5
    with pytest.raises(ValueError):
        Clipped(LookbackMax(), 0.0)


def test_payoff_arithmetic():
    p = linear_path(1.3)
    G = call(1.0) - 2 * put(1.0) + 0.5
    assert G.evaluate(p) == pytest.approx(0.3 + 0.5)
    assert (forward() - call(1.0)).evaluate(p) == pytest.approx(1.0)


def test_understated_modulus_detected():
    G = LookbackMax()
    h = 0.25
    pairs = [(constant_path(1), GridPath([0, 0.5, 1], [[1.0], [1 + h], [1.0]]))]
    assert validate_modulus(G, pairs).ok
    G.modulus = lambda x: x / 2
    rep = validate_modulus(G, pairs)
    assert not rep.ok and rep.violations == 1 and rep.worst_ratio == pytest.approx(2.0)
    with pytest.raises(ValueError):
        validate_modulus(TableGrid([0, 1], {}), pairs)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_declared_moduli_hold(seed):
    rng = np.random.default_rng(seed)
    pairs = [(random_path(rng, 2), random_path(rng, 2)) for _ in range(5)]
    for G in (call(1.0), put(1.2, asset=1), LookbackMax(1), AsianAverage(), AsianAverage(0, [0.3, 1.0]),
              Basket([0.7, -0.3], strike=0.2), Clipped(LookbackMax(), 1.1)):
        assert validate_modulus(G, pairs).ok, G.kind


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_lattice_matches_pathwise(seed):
    rng = np.random.default_rng(seed)
    times = np.array([0, 0.25, 0.5, 1.0])
    paths = np.abs(1 + rng.normal(0, 0.3, (6, 4, 2)))
    paths[:, 0] = 1
    for G in (call(1.0, maturity=0.5), LookbackMax(1), AsianAverage(), AsianAverage(1, [0.4, 1.0]),
              Basket([1.0, 2.0], strike=3.0), Clipped(forward(1), 1.2)):
        vec = G.evaluate_lattice(times, paths)
        one = [G.evaluate(GridPath(times, w, normalised=False)) for w in paths]
        assert np.allclose(vec, one, atol=1e-14), G.kind


def pc(times, values, terminal):
    return PiecewiseConstantPath(tuple(map(F, times)), tuple((F(v),) for v in values), F(1), 6, (F(terminal),))


def test_time_continuity_examples():
    base = pc([0, F(1, 2)], [1, F(6, 5)], F(6, 5))
    assert check_time_continuity(AsianAverage(), base, base).lhs == 0
    delta = F(1, 16)
    moved = pc([0, F(1, 2) + delta], [1, F(6, 5)], F(6, 5))
    rep = check_time_continuity(AsianAverage(), base, moved)
    assert rep.ok
    assert rep.lhs == pytest.approx(0.2 * float(delta))
    assert rep.rhs == pytest.approx(1.2 * 2 * float(delta))
    rep = check_time_continuity(call(1.0), base, moved)
    assert rep.ok and rep.lhs == 0
    other = pc([0, F(1, 2)], [1, F(5, 4)], F(5, 4))
    with pytest.raises(ValueError):
        check_time_continuity(AsianAverage(), base, other)
    with pytest.raises(ValueError):
        check_time_continuity(AsianAverage(0, [0.5, 1.0]), base, moved)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 40), min_size=1, max_size=4), st.integers(0, 10 ** 6))
def test_time_continuity_asian_property(vals, seed):
    rng = np.random.default_rng(seed)
    n = len(vals)
    times_a = sorted(set(F(int(x), 64) for x in rng.integers(1, 64, n)))
    times_b = sorted(set(F(int(x), 64) for x in rng.integers(1, 64, n)))
    k = min(len(times_a), len(times_b))
    values = [1] + [F(v, 20) for v in vals[:k]]
    a = pc([0] + times_a[:k], values, values[-1])
    b = pc([0] + times_b[:k], values, values[-1])
    rep = check_time_continuity(AsianAverage(), a, b)
    assert rep.ok


def test_sup_norm_pairs_are_symmetric():
    rng = np.random.default_rng(3)
    a, b = random_path(rng), random_path(rng)
    assert sup_norm_distance(a, b) == pytest.approx(sup_norm_distance(b, a))
