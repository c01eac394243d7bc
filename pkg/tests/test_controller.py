import numpy as np
import pytest

from nphedge.controller import (KappaSchedule, NPConfig, Trajectory, kappa_schedule, run_np_step,
                                run_rolling_horizon, step_rng)
from nphedge.domains.portfolio import (LiquidityModel, PortfolioDomain, PortfolioEnv, PortfolioState,
                                       ReturnModel, liquidity_residual)
from nphedge.domains.toy import QuadraticProblem
from nphedge.experts import FixedWeightsExpert, UniformExpert
from nphedge.ph import PHConfig, run_ph
from nphedge.tree import ScenarioTree


def test_kappa_examples():
    imitation = KappaSchedule("imitation", i_hat=20)
    assert kappa_schedule(imitation, 1) == 0.25
    assert kappa_schedule(imitation, 19) == pytest.approx(1 / 400)
    assert kappa_schedule(imitation, 20) == 0.0
    assert kappa_schedule(imitation, 500) == 0.0
    warm = KappaSchedule("warm_start")
    assert (warm(1), warm(2), warm(3)) == (1.0, 0.0, 0.0)
    assert KappaSchedule("constant", constant_value=0.4)(7) == 0.4


def test_kappa_values_stay_in_unit_interval():
    for mode in ("imitation", "warm_start"):
        s = KappaSchedule(mode, i_hat=5)
        vals = [s(i) for i in range(1, 50)]
        assert all(0.0 <= v <= 1.0 for v in vals)
        assert all(v == 0.0 for v in vals[5:])


@pytest.mark.parametrize("kwargs", [{"mode": "cosine"}, {"i_hat": 0}, {"constant_value": 1.5}])
def test_kappa_validation(kwargs):
    with pytest.raises(ValueError):
        KappaSchedule(**kwargs)


@pytest.mark.parametrize("kwargs", [{"lookahead_T": 0}, {"n_scenarios": 0}, {"discount_gamma": 1.5}])
def test_np_config_validation(kwargs):
    with pytest.raises(ValueError):
        NPConfig(**kwargs)


def toy_single_scenario():
    tree = ScenarioTree.fan([1.0])
    return tree, QuadraticProblem(np.full((1, 2, 1), 2.0), None, 0.0, 10.0)


def test_kappa_one_returns_expert_action_exactly():
    rm = ReturnModel([0.001, 0.002], [[1e-4, 0], [0, 2e-4]])
    dom = PortfolioDomain(rm)
    state = PortfolioState(1.0, [1.0, 0.0, 0.0], 0.0, 0.03)
    tree = dom.sample_tree(state, 8, 2, step_rng(0, 0))
    expert = FixedWeightsExpert(np.array([0.2, 0.3, 0.5]))
    cfg = NPConfig(kappa=KappaSchedule("constant", constant_value=1.0))
    x, diag = run_np_step(state, expert, dom.problem(state, 0.99), tree, cfg)
    assert np.array_equal(x, expert.act(state))
    assert diag["iterations"] == 0


def test_single_scenario_warm_start_reaches_optimum():
    tree, pb = toy_single_scenario()
    cfg = NPConfig(ph=PHConfig(epsilon=1e-7), kappa=KappaSchedule("warm_start"))
    x, diag = run_np_step(None, UniformExpert(1), pb, tree, cfg)
    assert diag["converged"]
    assert x[0] == pytest.approx(2.0, abs=1e-4)


def test_liquidity_floor_is_respected():
    rm = ReturnModel([0.01], [[0.04]])
    dom = PortfolioDomain(rm)
    state = PortfolioState(1.0, [0.5, 0.5], 0.0, 0.6)
    tree = dom.sample_tree(state, 10, 1, step_rng(3, 0))
    x, _ = run_np_step(state, UniformExpert(2), dom.problem(state, 0.99), tree, NPConfig(lookahead_T=1))
    assert x[0] >= 0.6 - 1e-10
    assert abs(x.sum() - 1.0) <= 1e-12 and np.all(x >= 0)


def test_kappa_zero_reduces_to_plain_hedging():
    rm = ReturnModel([0.001, 0.002], [[1e-4, 0], [0, 2e-4]])
    dom = PortfolioDomain(rm)
    state = PortfolioState(1.0, [1.0, 0.0, 0.0], 0.0, 0.03)
    tree = dom.sample_tree(state, 6, 2, step_rng(1, 0))
    pb = dom.problem(state, 0.99)
    expert = UniformExpert(3)
    cfg = NPConfig(ph=PHConfig(epsilon=1e-5), kappa=KappaSchedule("constant", constant_value=0.0))
    x, _ = run_np_step(state, expert, pb, tree, cfg)
    from nphedge.experts import query_expert
    sol = run_ph(pb, tree, query_expert(expert, state, tree, pb), cfg.ph)
    assert np.array_equal(x, pb.project_first_stage(sol.x_star[0, 0], tree))


def flat_env(steps_seed=0):
    rm = ReturnModel([0.0], [[0.0]])
    return PortfolioDomain(rm), PortfolioEnv(2, LiquidityModel(0.0, 0.0), steps_seed, returns=rm)


def test_degenerate_environment_keeps_wealth_at_one():
    dom, env = flat_env()
    traj = run_rolling_horizon(env, FixedWeightsExpert(np.array([0.3, 0.7])), dom,
                               NPConfig(lookahead_T=2, n_scenarios=4), 5)
    assert len(traj) == 5
    assert all(r["wealth_after"] == 1.0 and r["wealth_before"] == 1.0 for r in traj.records)


def _liquidity_run(seed):
    rm = ReturnModel([0.0005, 0.001], [[1e-4, 2e-5], [2e-5, 2e-4]])
    dom = PortfolioDomain(rm)
    env = PortfolioEnv(3, LiquidityModel(), seed, returns=rm)
    cfg = NPConfig(ph=PHConfig(epsilon=1e-4), lookahead_T=2, n_scenarios=8, seed=seed)
    return run_rolling_horizon(env, UniformExpert(3), dom, cfg, 3)


def test_rolling_horizon_is_deterministic():
    assert _liquidity_run(5).to_jsonl() == _liquidity_run(5).to_jsonl()


def test_logged_residuals_are_nonnegative_when_recomputed():
    traj = Trajectory.from_jsonl(_liquidity_run(7).to_jsonl())
    demand = 0.0
    for r in traj.records:
        st = r["state"]
        # cumulative demand is the running sum of the revealed increments
        demand += st["demand"]
        assert st["accumulated_liquidity"] + st["demand"] == pytest.approx(demand, abs=1e-15)
        assert liquidity_residual(r["wealth_before"], r["action"], r["cumulative_demand"]) >= 0.0
        assert r["wealth_before"] * r["action"][0] >= r["cumulative_demand"]
    assert traj.records[-1]["cumulative_demand"] > 0.05


def test_executed_actions_are_projector_fixed_points():
    traj = _liquidity_run(2)
    for r in traj.records:
        state = PortfolioState(**{k: v for k, v in r["state"].items()})
        dom = PortfolioDomain(ReturnModel([0.0, 0.0], np.zeros((2, 2))))
        tree = dom.sample_tree(state, 1, 1, step_rng(0, 0))
        a = np.array(r["action"])
        assert np.abs(dom.problem(state, 0.99).project_first_stage(a, tree) - a).max() <= 1e-10


def test_step_rng_streams_are_independent_and_reproducible():
    a = step_rng(1, 0).random(4)
    assert np.array_equal(a, step_rng(1, 0).random(4))
    assert not np.array_equal(a, step_rng(1, 1).random(4))
    assert not np.array_equal(a, step_rng(2, 0).random(4))
    assert not np.array_equal(a, step_rng(1, 0, stream=1).random(4))
