from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from instances import enumerate_vertices, oracle_constraints, random_instance, random_martingale
from robustmot.discretise import PiecewiseConstantPath, is_member_Dhat
from robustmot.lp import INFEASIBLE, OPTIMAL, UNBOUNDED
from robustmot.marginals import DiscreteMarginal, bl_distance, strassen_feasible
from robustmot.mot_lp import (BudgetExceeded, LatticeModel, QuotedOption, build_full_support_prior,
                              discrete_superhedge_penalised, dual_solve, duality_gap, eta_membership,
                              lattice_marginal, marginal_eta_membership, penalty_sweep, pinning_puts, primal_solve,
                              quoted_call, quoted_put, rebalance_mask)
from robustmot.paths import ALL, SupNormBall
from robustmot.payoffs import Constant, LookbackMax, call, forward

F = Fraction
TWO = DiscreteMarginal((0.5, 1.5), (0.5, 0.5))


def one_step():
    model = LatticeModel([0, 1], [[[0.5, 1.0, 1.5]]])
    return model, pinning_puts(TWO, [0.5, 1.0, 1.5])


def lookback_instance():
    model = LatticeModel([0, 0.5, 1], [[[0.5, 1.0, 1.5]], [[0.0, 0.5, 1.0, 1.5, 2.0]]])
    mu = DiscreteMarginal((0.0, 0.5, 1.0, 1.5, 2.0), (0.1, 0.25, 0.3, 0.25, 0.1))
    return model, pinning_puts(mu, [0.5, 1.0, 1.5, 2.0])


# --- lattice -----------------------------------------------------------------

def test_lattice_paths_and_budget():
    model = LatticeModel([0, 0.5, 1], [[[0.5, 1.5]], [[0.0, 1.0, 2.0]]])
    assert model.n_paths == 6
    assert np.all(model.paths[:, 0] == 1)
    with pytest.raises(BudgetExceeded):
        LatticeModel([0, 0.5, 1], [[[0.5, 1.5]], [[0.0, 1.0, 2.0]]], budget=5).paths
    with pytest.raises(ValueError):
        LatticeModel([0, 1], [[[0.5], [1.5]]], dim=1)


# --- primal ------------------------------------------------------------------

def test_primal_examples():
    model, opts = one_step()
    assert primal_solve(model, forward(), opts).value == pytest.approx(1.0, abs=1e-12)
    assert primal_solve(model, call(1.0), opts).value == pytest.approx(0.25, abs=1e-12)
    model, opts = lookback_instance()
    A, b = oracle_constraints(model, opts)
    V = enumerate_vertices(A, b)
    g = model.payoff_values(LookbackMax())
    assert primal_solve(model, g, opts).value == pytest.approx((V @ g).max(), abs=1e-9)


def test_primal_measure_is_calibrated_martingale():
    model, opts = lookback_instance()
    sol = primal_solve(model, LookbackMax(), opts)
    q = sol.weights
    A, b = oracle_constraints(model, opts)
    assert np.abs(A @ q - b).max() <= 1e-9
    assert q.min() >= 0


def test_primal_infeasible_certificate():
    model = LatticeModel([0, 1], [[[0.5, 1.0, 1.5]]])
    bad = pinning_puts(DiscreteMarginal((0.5, 1.7), (0.5, 0.5)), [1.0, 1.7])  # mean 1.1
    sol = primal_solve(model, forward(), bad)
    assert sol.status == INFEASIBLE
    assert sol.certificate is not None and sol.certificate.size > 0
    du = dual_solve(model, forward(), bad)
    assert du.status == UNBOUNDED


# --- dual --------------------------------------------------------------------

def test_dual_examples():
    model, opts = one_step()
    sol = dual_solve(model, call(1.0), opts)
    assert sol.value == pytest.approx(0.25, abs=1e-9)
    assert sol.worst_slack >= -1e-9
    sol = dual_solve(model, Constant(2.5), opts)
    assert sol.value == pytest.approx(2.5)
    assert np.allclose(sol.positions, 0) and np.allclose(sol.static, 0)


def test_duality_gap_report():
    model, opts = one_step()
    rep = duality_gap(model, call(1.0), opts, ALL, [0.0, 0.05, 0.1])
    assert all(abs(r.gap) <= 1e-9 for r in rep.rows)
    model, opts = lookback_instance()
    rep = duality_gap(model, LookbackMax(), opts, ALL, [0.0, 0.02])
    assert all(abs(r.gap) <= 1e-6 for r in rep.rows)
    # mean-1.05 quotes: infeasible exactly, feasible once eta covers the mispricing
    model = LatticeModel([0, 1], [[[0.5, 1.0, 1.5]]])
    bad = [quoted_put(1.0, 0.2), quoted_call(0.0, 1.05)]
    rep = duality_gap(model, forward(), bad, ALL, [0.0, 0.02, 0.1])
    assert [r.primal_status for r in rep.rows] == [INFEASIBLE, INFEASIBLE, OPTIMAL]
    assert rep.transitions == [0.1]
    assert rep.first_feasible_eta == 0.1


def test_penalty_sweep_trivial_cases():
    model, opts = lookback_instance()
    Ns = [0, 1, 4, 16]
    vals = penalty_sweep(model, LookbackMax(), opts, ALL, Ns)
    assert max(vals) - min(vals) <= 1e-9
    vals = penalty_sweep(model, LookbackMax(), opts, SupNormBall(10.0), Ns)
    assert max(vals) - min(vals) <= 1e-9
    with pytest.raises(ValueError):
        penalty_sweep(model, LookbackMax(), opts, ALL, [4, 1])


def test_rebalance_masks_nested():
    model, _ = lookback_instance()
    masks = [rebalance_mask(model, N) for N in range(1, 6)]
    for a, b in zip(masks, masks[1:]):
        assert np.all(b[a])  # every time allowed at mesh N stays allowed at N + 1
    assert np.all(masks[0][:, 0])


# --- properties --------------------------------------------------------------

seeds = st.integers(0, 2 ** 31 - 1)


@settings(max_examples=25, deadline=None)
@given(seeds, st.sampled_from([0.0, 0.03]))
def test_weak_and_strong_duality(seed, eta):
    rng = np.random.default_rng(seed)
    inst = random_instance(rng, max_paths=300)
    pr = primal_solve(inst.model, inst.payoff, inst.options, ALL, eta)
    du = dual_solve(inst.model, inst.payoff, inst.options, ALL, eta=eta)
    assert pr.ok and du.ok
    assert du.value >= pr.value - 1e-9
    assert abs(du.value - pr.value) <= 1e-6


@settings(max_examples=15, deadline=None)
@given(seeds)
def test_backends_agree_on_lattice_lps(seed):
    rng = np.random.default_rng(seed)
    inst = random_instance(rng, max_paths=150)
    vals = []
    for be in ("simplex", "highs"):
        vals.append(primal_solve(inst.model, inst.payoff, inst.options, backend=be).value)
        vals.append(dual_solve(inst.model, inst.payoff, inst.options, backend=be).value)
    assert abs(vals[0] - vals[2]) <= 1e-8
    assert abs(vals[1] - vals[3]) <= 1e-8


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_scale_consistency(seed):
    rng = np.random.default_rng(seed)
    inst = random_instance(rng, max_paths=300)
    X = inst.options[0]
    g = inst.model.payoff_values(inst.payoff)
    shifted = g + 2.0 * inst.model.payoff_values(X.payoff)
    for solve in (primal_solve, dual_solve):
        base = solve(inst.model, g, inst.options).value
        moved = solve(inst.model, shifted, inst.options).value
        assert moved - base == pytest.approx(2.0 * X.price, abs=1e-7)


def _mean_one(rng, support):
    for _ in range(200):
        w = rng.dirichlet(np.ones(len(support)))
        # move mass between the two extreme atoms to hit mean one exactly
        m = w @ support
        lo, hi = 0, len(support) - 1
        delta = (1 - m) / (support[hi] - support[lo])
        w[hi] += delta
        w[lo] -= delta
        if w.min() >= 0:
            return DiscreteMarginal(tuple(support), tuple(w / w.sum()))
    return None


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_feasibility_matches_strassen(seed):
    rng = np.random.default_rng(seed)
    s1 = np.array([0.5, 1.0, 1.5])
    s2 = np.array([0.0, 0.5, 1.0, 1.5, 2.0])
    mu1, mu2 = _mean_one(rng, s1), _mean_one(rng, s2)
    if mu1 is None or mu2 is None:
        return
    model = LatticeModel([0, 0.5, 1], [[s1], [s2]], maturity_indices=[1, 2])
    opts = pinning_puts(mu1, [1.0, 1.5, 2.5], maturity=0.5) + pinning_puts(mu2, [0.5, 1.0, 1.5, 2.0, 3.0])
    sol = primal_solve(model, forward(), opts)
    assert (sol.status == OPTIMAL) == strassen_feasible([[mu1, mu2]])


@settings(max_examples=10, deadline=None)
@given(seeds)
def test_mesh_restricted_duals_monotone(seed):
    rng = np.random.default_rng(seed)
    inst = random_instance(rng, max_paths=200, max_d=1)
    full = dual_solve(inst.model, inst.payoff, inst.options).value
    vals = [dual_solve(inst.model, inst.payoff, inst.options, rebalance=rebalance_mask(inst.model, N)).value
            for N in (1, 2, 3, 4)]
    assert all(b <= a + 1e-9 for a, b in zip(vals, vals[1:]))
    assert min(vals) >= full - 1e-9


# --- membership --------------------------------------------------------------

def test_eta_membership_examples():
    model, opts = one_step()
    q = primal_solve(model, forward(), opts).weights
    m = eta_membership(model, q, opts, ALL, 0.01)
    assert m.member and m.radius == pytest.approx(0.0, abs=1e-12)
    shifted = [QuotedOption(o.payoff, o.price + (0.05 if i == 1 else 0.0), o.name) for i, o in enumerate(opts)]
    assert eta_membership(model, q, shifted, ALL, 0.1).radius == pytest.approx(0.05)
    # mass 0.3 on a path at distance 0.5 from the ball: outside every eta < 0.3
    big = LatticeModel([0, 1], [[[0.5, 1.0, 1.5, 1.75]]])
    q = np.zeros(big.n_paths)
    vals = big.paths[:, -1, 0]
    q[vals == 1.75] = 0.3
    q[vals == 0.5] = 0.3 * 0.75 / 0.5
    q[vals == 1.0] = 1 - q.sum()
    m = eta_membership(big, q, [], SupNormBall(1.25), 0.2)
    assert not m.member and m.radius > 0.2


def test_marginal_membership_examples():
    model = LatticeModel([0, 0.5, 1], [[[0.5, 1.0, 1.5]], [[0.5, 1.0, 1.5]]], maturity_indices=[1, 2])
    q = random_martingale(np.random.default_rng(3), model)
    mid, term = lattice_marginal(model, q, 0, 1), lattice_marginal(model, q, 0, 2)
    assert marginal_eta_membership(model, q, {(0, 0): mid, (0, 1): term}, ALL, 1e-6).member
    # move 0.1 of mass by 0.2 in the intermediate target
    atoms = list(zip(mid.support, mid.probs))
    x0, p0 = atoms[0]
    moved = DiscreteMarginal.from_atoms(atoms[1:] + [(x0, p0 - 0.1), (x0 + 0.2, 0.1)])
    d = bl_distance(mid, moved)
    assert d == pytest.approx(0.02, abs=1e-9)
    assert marginal_eta_membership(model, q, {(0, 0): moved, (0, 1): term}, ALL, d).member
    assert not marginal_eta_membership(model, q, {(0, 0): moved, (0, 1): term}, ALL, d * 0.9).member
    wrong = DiscreteMarginal.dirac(1.0) if term.support != (1.0,) else TWO
    res = marginal_eta_membership(model, q, {(0, 0): mid, (0, 1): wrong}, ALL, 1.0)
    assert not res.member and not res.terminal_match


# --- discrete class with drift penalty --------------------------------------

def test_prior_examples():
    N = 5
    prior = build_full_support_prior(N, 0, [F(1, 2)])
    assert len(prior.paths) == 1 and prior.probs == [1]
    prior = build_full_support_prior(N, 1, [F(1, 2)])
    jumps = sorted(f.values[-1][0] - 1 for f in prior.paths)
    assert jumps == [-F(1, 2 ** (N + 1)), 0, F(1, 2 ** (N + 1))]
    assert all(p == F(1, 3) for p in prior.probs)
    assert prior.martingale_residual() == 0


@pytest.mark.parametrize("N,jumps,times,d", [(4, 2, [F(1, 3), F(2, 3)], 1), (5, 1, [F(1, 4), F(1, 2)], 2)])
def test_prior_full_support(N, jumps, times, d):
    prior = build_full_support_prior(N, jumps, times, d=d)
    assert all(p > 0 for p in prior.probs) and sum(prior.probs) == 1
    assert prior.martingale_residual() == 0
    assert all(is_member_Dhat(f, None, N) for f in prior.paths)


def test_penalised_duality_examples():
    N = 4
    u = F(1, 2 ** (N + 2))
    flat = PiecewiseConstantPath((F(0),), ((F(1),),), F(1), N)
    up = PiecewiseConstantPath((F(0), F(1, 2)), ((F(1),), (1 + u,)), F(1), N)
    down = PiecewiseConstantPath((F(0), F(1, 2)), ((F(1),), (1 - u,)), F(1), N)
    r = discrete_superhedge_penalised([flat], None, LookbackMax(), 3.0)
    assert r.hedge_value == pytest.approx(1.0) and r.penalised_value == pytest.approx(1.0)
    r = discrete_superhedge_penalised([up, down], None, LookbackMax(), 100.0)
    assert r.hedge_value == pytest.approx(1 + float(u) / 2)
    assert r.penalised_value == pytest.approx(1 + float(u) / 2)
    r = discrete_superhedge_penalised([up, down, flat], None, forward(), 0.0)
    assert r.hedge_value == pytest.approx(1 + float(u))
    assert r.penalised_value == pytest.approx(1 + float(u))
    with pytest.raises(ValueError):
        discrete_superhedge_penalised([], None, forward(), 1.0)
