import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from instances import random_instance
from robustmot.discretise import hat_pipeline
from robustmot.hedging import (ConstantRule, FunctionRule, LatticeRule, Schedule, SemiStaticStrategy, StepRule,
                               check_admissible, clip_payoff, integral_mimic_error, lift_strategy,
                               pathwise_integral, prefix_test, running_integral, strategy_from_dual,
                               verify_superhedge)
from robustmot.marginals import DiscreteMarginal
from robustmot.mot_lp import LatticeModel, dual_solve, pinning_puts, primal_solve, quoted_put
from robustmot.paths import ContractError, GridPath, constant_path, linear_path
from robustmot.payoffs import LookbackMax, call

TWO = DiscreteMarginal((0.5, 1.5), (0.5, 0.5))


def zigzag(rng, d=1, n=6):
    t = np.unique(np.concatenate([[0, 1], rng.uniform(0, 1, n)]))
    x = np.maximum(1 + np.cumsum(rng.normal(0, 0.2, (t.size, d)), axis=0), 0)
    x[0] = 1
    return GridPath(t, x)


# --- integrals ---------------------------------------------------------------

def test_integral_examples():
    assert pathwise_integral(ConstantRule(1.0), linear_path(1.2), 1.0) == pytest.approx(0.2)
    p = GridPath([0, 0.3, 1], [[1.0], [1.4], [0.9]])
    assert pathwise_integral(StepRule([0, 0.3], [[2.0], [0.0]]), p) == pytest.approx(2 * 0.4)
    # stopping at an interior time
    assert pathwise_integral(ConstantRule(1.0), p, 0.15) == pytest.approx(0.2)


def test_integral_dimension_contract():
    with pytest.raises(ContractError):
        pathwise_integral(ConstantRule([1.0, 2.0, 3.0]), linear_path([1.2, 0.8]))


def test_schedule_contract():
    with pytest.raises(ContractError):
        Schedule([0.1, 0.5], [[1.0], [2.0]])
    s = Schedule([0, 0.5], [[1.0], [2.0]])
    assert s.position_at(0.5)[0] == 1.0  # held on (0, 0.5]
    assert s.position_at(0.50001)[0] == 2.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_telescoping_equals_parts(seed):
    rng = np.random.default_rng(seed)
    p = zigzag(rng, d=int(rng.integers(1, 3)))
    times = np.concatenate([[0], np.sort(rng.uniform(0, 1, 4))])
    rule = StepRule(np.unique(times), rng.normal(size=(np.unique(times).size, p.dim)))
    # pathwise_integral raises if the two evaluations differ by more than 1e-12
    ts, vals = running_integral(rule, p)
    assert vals[-1] == pytest.approx(pathwise_integral(rule, p))


# --- admissibility -----------------------------------------------------------

def test_admissibility_examples():
    paths = [linear_path(1.5), linear_path(0.0), GridPath([0, 0.5, 1], [[1.0], [3.0], [0.2]])]
    rep = check_admissible(SemiStaticStrategy(0.0, (), ConstantRule(0.0), M=2.0), paths)
    assert rep.ok and rep.worst_slack == pytest.approx(2.0)
    rep = check_admissible(SemiStaticStrategy(0.0, (), ConstantRule(1.0), M=1.0), paths)
    assert rep.ok  # long one unit loses at most the initial value 1
    rep = check_admissible(SemiStaticStrategy(0.0, (), ConstantRule(-1.0), M=0.1), [linear_path(3.0)])
    assert not rep.ok
    assert rep.first_breach_time == pytest.approx(0.05, abs=1e-9)


def test_growth_floor():
    # short one unit on a rising path: loss S_t - 1 <= M (1 + sup |S|) with M = 1
    rep = check_admissible(SemiStaticStrategy(0.0, (), ConstantRule(-1.0), M=1.0, growth_p=1.0),
                           [linear_path(10.0)])
    assert rep.ok


# --- superhedging ------------------------------------------------------------

def one_step():
    model = LatticeModel([0, 1], [[[0.5, 1.0, 1.5]]])
    return model, pinning_puts(TWO, [0.5, 1.0, 1.5])


def test_static_replication_zero_slack():
    model, _ = one_step()
    put1 = quoted_put(1.0, 0.25)
    # (S - 1)^+ = (1 - S)^+ + (S - 1): one put plus a unit held from time 0
    strat = SemiStaticStrategy(0.0, [(put1, 1.0)], ConstantRule(1.0))
    rep = verify_superhedge(strat, call(1.0), model.grid_paths())
    assert rep.ok and abs(rep.worst_slack) <= 1e-12
    assert strat.cost == pytest.approx(0.25)
    flipped = SemiStaticStrategy(0.0, [(put1, -1.0)], ConstantRule(1.0))
    rep = verify_superhedge(flipped, call(1.0), model.grid_paths())
    assert not rep.ok and rep.worst_slack == pytest.approx(-1.0) and rep.worst_path == 0


def test_cash_only_and_dual_strategy():
    model, opts = one_step()
    G = call(1.0)
    top = float(model.payoff_values(G).max())
    assert verify_superhedge(SemiStaticStrategy(top), G, model.grid_paths()).ok
    sol = dual_solve(model, G, opts)
    strat = strategy_from_dual(model, sol, opts)
    rep = verify_superhedge(strat, G, model.grid_paths())
    assert rep.worst_slack >= -1e-8
    assert strat.cost == pytest.approx(0.25)
    # lowering the cash by any amount breaks the hedge on some path
    short = SemiStaticStrategy(strat.a0 - 1e-3, strat.static, strat.rule)
    assert not verify_superhedge(short, G, model.grid_paths()).ok


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_dual_strategy_replays(seed):
    rng = np.random.default_rng(seed)
    inst = random_instance(rng, max_paths=200)
    sol = dual_solve(inst.model, inst.payoff, inst.options)
    strat = strategy_from_dual(inst.model, sol, inst.options)
    rep = verify_superhedge(strat, inst.payoff, inst.model.grid_paths())
    assert rep.worst_slack >= -1e-8
    assert strat.cost == pytest.approx(sol.value, abs=1e-9)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_supermartingale_consistency(seed):
    rng = np.random.default_rng(seed)
    inst = random_instance(rng, max_paths=200)
    model = inst.model
    q = primal_solve(model, rng.normal(size=model.n_paths), inst.options).weights
    pos = rng.normal(size=(model.n_paths, model.m, model.dim))
    # make positions adapted: one value per history prefix
    for k in range(model.m):
        ids, _ = model.prefix_ids(k)
        for h in np.unique(ids):
            pos[ids == h, k] = pos[np.flatnonzero(ids == h)[0], k]
    rule = LatticeRule.from_positions(model.times, model.paths, pos)
    gains = np.array([pathwise_integral(rule, p) for p in model.grid_paths()])
    assert q @ gains <= 1e-9
    assert abs(q @ gains) <= 1e-9


def test_clip_payoff_examples():
    G = LookbackMax()
    p = GridPath([0, 0.5, 1], [[1.0], [3.0], [1.0]])
    assert clip_payoff(G, 2.0).evaluate(p) == 2.0
    assert clip_payoff(G, 5.0).evaluate(p) == G.evaluate(p)
    assert clip_payoff(G, 2.0).kappa == 2.0
    q = GridPath([0, 1], [[1.0], [1.5]])
    assert abs(clip_payoff(G, 1.2).evaluate(q)) <= abs(clip_payoff(G, 1.4).evaluate(q))


# --- progressive measurability and lifting ---------------------------------

def test_prefix_test_catches_look_ahead():
    rng = np.random.default_rng(0)
    cheat = FunctionRule(lambda p: Schedule([0.0], [[float(p.terminal[0])]]))
    paths = [zigzag(rng) for _ in range(5)]
    assert prefix_test(cheat, paths, 20, rng).failures > 0
    with pytest.raises(ContractError):
        prefix_test(cheat, paths, 20, rng, raise_on_failure=True)
    assert prefix_test(StepRule([0, 0.5], [[1.0], [2.0]]), paths, 20, rng).failures == 0


def test_lift_examples():
    N = 5
    p = GridPath([0, 0.4, 1], [[1.0], [1.3], [0.8]])
    rule = lift_strategy(lambda jt, vals: 2.0, N)
    assert np.all(rule.schedule(p).positions == 2.0)

    def first_value(jt, vals):
        return 0.0 if len(vals) < 2 else float(vals[1][0])

    s = lift_strategy(first_value, N).schedule(p)
    changes = np.flatnonzero(np.any(np.diff(s.positions, axis=0) != 0, axis=1))
    assert changes.size <= 1
    taus = hat_pipeline(p, None, N).partition.taus
    if changes.size:
        assert s.times[changes[0] + 1] == float(taus[2])
    with pytest.raises(ContractError):
        lift_strategy(lambda jt, vals: N + 1.0, N).schedule(p)


def test_lifted_rules_are_adapted_and_bounded():
    rng = np.random.default_rng(1)
    N = 5
    rule = lift_strategy(lambda jt, vals: N * np.tanh(float(vals[-1][0]) - 1 if vals else 0.0), N)
    paths = [zigzag(rng) for _ in range(10)]
    assert prefix_test(rule, paths, 40, rng).failures == 0
    for p in paths:
        assert np.abs(rule.schedule(p).positions).max() <= N


def test_mimic_examples():
    assert integral_mimic_error(lambda jt, vals: 3.0, constant_path(1), 5).max_all == 0
    for N in (4, 6, 8):
        rep = integral_mimic_error(lambda jt, vals: float(N), linear_path(1.375), N)
        assert rep.max_inner <= 5 * N / 2 ** N
        assert rep.ok
