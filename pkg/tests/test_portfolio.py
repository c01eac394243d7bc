import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nphedge.controller import step_rng
from nphedge.domains.portfolio import (DataError, LiquidityModel, PortfolioDomain, PortfolioProblem, PortfolioState,
                                       ReturnModel, compute_metrics, covering_floor, fit_lognormal, load_prices_csv,
                                       project_portfolio_feasible, sample_liquidity, sample_price_scenarios,
                                       ucrp_step, wealth_transition, write_prices_csv)
from nphedge.projections import InfeasibleError

seeds = st.integers(0, 2**32 - 1)


def test_fit_constant_column():
    m = fit_lognormal(np.full((50, 1), 1.01))
    assert m.mean_log[0] == pytest.approx(0.00995033, abs=1e-8)
    assert m.cov_log[0, 0] == pytest.approx(0.0, abs=1e-18)


def test_fit_identical_columns_are_perfectly_correlated():
    g = np.random.default_rng(0).uniform(0.95, 1.05, size=200)
    m = fit_lognormal(np.stack([g, g], axis=1))
    assert m.cov_log[0, 1] == pytest.approx(m.cov_log[0, 0], rel=1e-12)
    assert m.cov_log[0, 1] / np.sqrt(m.cov_log[0, 0] * m.cov_log[1, 1]) == pytest.approx(1.0, abs=1e-12)


def test_fit_recovers_known_mean():
    mu, sd = np.array([0.001, -0.002]), np.array([0.02, 0.01])
    lg = mu + sd * np.random.default_rng(42).standard_normal((1000, 2))
    m = fit_lognormal(np.exp(lg))
    assert np.all(np.abs(m.mean_log - mu) <= 3 * sd / math.sqrt(1000))


def test_fit_errors():
    with pytest.raises(DataError, match="2 rows"):
        fit_lognormal(np.ones((1, 2)))
    with pytest.raises(DataError, match="row 1, column 0"):
        fit_lognormal(np.array([[1.0], [0.0]]))


def test_price_scenarios():
    flat = sample_price_scenarios(ReturnModel([0.0, 0.0], np.zeros((2, 2))), 5, 3, 0)
    assert flat.shape == (5, 3, 3) and np.all(flat == 1.0)
    rm = ReturnModel([0.001], [[0.0004]])
    a = sample_price_scenarios(rm, 10000, 1, 9)
    assert np.array_equal(a, sample_price_scenarios(rm, 10000, 1, 9))
    assert np.all(a[..., 0] == 1.0)
    assert abs(np.log(a[..., 1]).mean() - 0.001) <= 3 * (0.02 / 100)


def test_non_psd_covariance_is_rejected():
    with pytest.raises(np.linalg.LinAlgError):
        sample_price_scenarios(ReturnModel([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]]), 2, 1, 0)


def test_liquidity_samples():
    det = sample_liquidity(LiquidityModel(0.025, 0.0), 3, 4, 0, L0=0.1)
    assert np.allclose(det, 0.1 + 0.025 * np.arange(1, 5), atol=1e-15, rtol=0)
    paths = sample_liquidity(LiquidityModel(), 1000, 12, 1)
    assert np.all(np.diff(paths, axis=1) >= 0)
    inc = np.diff(sample_liquidity(LiquidityModel(), 100000, 1, 2, 0.0), axis=1, prepend=0.0).ravel()
    assert abs(inc.mean() - 0.025) <= 3 * 0.01 / math.sqrt(inc.size)


def test_wealth_transition():
    assert wealth_transition(1.0, [0.5, 0.5], [1.0, 1.1]) == pytest.approx(1.05, abs=1e-15)
    assert wealth_transition(2.0, [0.3, 0.7], [1.0, 1.0]) == 2.0
    assert wealth_transition(2.0, [1.0, 0.0], [1.0, 0.3]) == 2.0


def test_projection_examples():
    assert np.allclose(project_portfolio_feasible([0.0, 0.5, 0.5], 0.1), [0.1, 0.45, 0.45], atol=1e-15)
    assert np.array_equal(project_portfolio_feasible([2.0, 0.0, 0.0], 0.0), [1.0, 0.0, 0.0])
    x = np.array([0.3, 0.2, 0.5])
    assert np.array_equal(project_portfolio_feasible(x, 0.25), x)
    with pytest.raises(InfeasibleError):
        project_portfolio_feasible(x, 1.2)


def test_projection_example_against_grid():
    # minimise the distance to (0, 0.5, 0.5) over the floored simplex on a 1e-3 grid
    g = np.arange(0.0, 1.0 + 5e-4, 1e-3)
    A, B = np.meshgrid(g, g, indexing="ij")
    pts = np.stack([A.ravel(), B.ravel(), 1 - A.ravel() - B.ravel()], axis=1)
    pts = pts[(pts[:, 2] >= -1e-12) & (pts[:, 0] >= 0.1 - 1e-12)]
    best = pts[np.argmin(((pts - [0.0, 0.5, 0.5]) ** 2).sum(axis=1))]
    assert np.allclose(best, [0.1, 0.45, 0.45], atol=1e-3)


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_projection_idempotent_and_nonexpansive(seed):
    rng = np.random.default_rng(seed)
    J = int(rng.integers(2, 7))
    floor = float(rng.uniform(0, 1))
    x, y = rng.normal(size=J) * 2, rng.normal(size=J) * 2
    px, py = project_portfolio_feasible(x, floor), project_portfolio_feasible(y, floor)
    assert np.allclose(project_portfolio_feasible(px, floor), px, atol=1e-12, rtol=0)
    assert np.linalg.norm(px - py) <= np.linalg.norm(x - y) + 1e-12
    assert px[0] >= floor - 1e-15 and abs(px.sum() - 1) <= 1e-12 and np.all(px >= 0)


def test_covering_floor_is_exact_in_floating_point():
    rng = np.random.default_rng(5)
    xi, W = rng.uniform(0, 1, 1000), rng.uniform(0.5, 3, 1000)
    f = covering_floor(xi, W)
    assert np.all(W * f >= xi)
    assert np.all(f - xi / W <= 4 * np.spacing(f))


def test_metric_examples():
    flat = compute_metrics([1.0] * 10)
    assert flat["volatility"] == 0.0 and flat["mdd"] == 0.0 and flat["returns"] == 0.0
    assert flat["sharpe"] == 0.0 and flat["sharpe_undefined"]
    assert compute_metrics([1.0, 1.1, 0.99, 1.05])["mdd"] == pytest.approx(0.1, abs=1e-12)
    path = 1.1 ** (np.arange(253) / 252)
    assert compute_metrics(path)["returns"] == pytest.approx(0.10, abs=1e-12)
    with pytest.raises(ValueError):
        compute_metrics([1.0])


def _brute_mdd(w):
    return max(max((w[i] - w[j]) / w[i] for j in range(i, len(w))) for i in range(len(w)))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.01, 10.0), min_size=2, max_size=40))
def test_metrics_sanity(w):
    m = compute_metrics(w)
    assert 0.0 <= m["mdd"] < 1.0
    assert m["volatility"] >= 0.0
    assert m["mdd"] == pytest.approx(_brute_mdd(w), abs=1e-12)


def test_ucrp():
    assert wealth_transition(1.0, ucrp_step(2), [1.1, 0.9]) == pytest.approx(1.0, abs=1e-15)
    assert np.array_equal(ucrp_step(4), [0.25] * 4)
    # identical constant returns: rebalancing and buy-and-hold coincide
    g = np.full(3, 1.002)
    W = 1.0
    held = ucrp_step(3).copy()
    for _ in range(20):
        W = wealth_transition(W, ucrp_step(3), g)
        held = held * g
    assert W == pytest.approx(held.sum(), rel=1e-13)


def test_prices_csv(tmp_path):
    p = tmp_path / "p.csv"
    p.write_text("date,AAA\n2020-01-01,100\n2020-01-02,110\n2020-01-03,99\n")
    gross, tickers, dates = load_prices_csv(p)
    assert tickers == ["AAA"] and len(dates) == 3
    assert np.allclose(gross.ravel(), [1.1, 0.9], atol=1e-15)


@pytest.mark.parametrize("body, msg", [
    ("date,A,B\n2020-01-01,1,2\n2020-01-02,,2\n", "row 3: missing value for A"),
    ("date,A\n2020-01-02,1\n2020-01-01,2\n", "row 3.*strictly increasing"),
    ("date,A\n2020-01-01,1\n2020-01-01,2\n", "row 3.*strictly increasing"),
    ("date,A\n2020-01-01,1\n2020-01-02,-2\n", "row 3.*positive"),
    ("date,A\n2020-01-01,1\n2020-01-02,x\n", "row 3.*not a number"),
    ("day,A\n2020-01-01,1\n", "header"),
])
def test_prices_csv_errors(tmp_path, body, msg):
    p = tmp_path / "p.csv"
    p.write_text(body)
    with pytest.raises(DataError, match=msg):
        load_prices_csv(p)


def test_prices_csv_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    gross = rng.uniform(0.97, 1.03, size=(40, 3))
    prices = np.vstack([np.full(3, 50.0), 50.0 * np.cumprod(gross, axis=0)])
    write_prices_csv(tmp_path / "p.csv", prices, ["A", "B", "C"])
    back, _, _ = load_prices_csv(tmp_path / "p.csv")
    assert np.abs(back - gross).max() <= 1e-12


def problem_setup(seed=0, mode="log"):
    rm = ReturnModel([0.001, 0.0], [[4e-4, 1e-4], [1e-4, 9e-4]])
    dom = PortfolioDomain(rm, objective_mode=mode)
    state = PortfolioState(1.3, [1.0, 0.0, 0.0], 0.1, 0.02)
    tree = dom.sample_tree(state, 6, 3, step_rng(seed, 0))
    return tree, dom.problem(state, 0.99)


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_log_objective_is_convex_along_segments(seed):
    tree, pb = problem_setup()
    rng = np.random.default_rng(seed)
    a = pb.project(rng.normal(size=tree.shape), tree)
    b = pb.project(rng.normal(size=tree.shape), tree)
    t = float(rng.uniform())
    mid = pb.objective(t * a + (1 - t) * b, tree)
    assert np.all(mid <= t * pb.objective(a, tree) + (1 - t) * pb.objective(b, tree) + 1e-12)


@pytest.mark.parametrize("mode", ["log", "linear"])
def test_gradient_matches_finite_differences(mode):
    tree, pb = problem_setup(mode=mode)
    x = pb.center(tree)
    g = pb.gradient(x, tree)
    d = np.random.default_rng(1).normal(size=tree.shape)
    e = 1e-6
    fd = (pb.objective(x + e * d, tree) - pb.objective(x - e * d, tree)) / (2 * e)
    assert np.allclose(fd, (g * d).reshape(tree.n_scenarios, -1).sum(axis=1), atol=1e-7)


def test_lookahead_floors_cover_the_sampled_demand():
    tree, pb = problem_setup()
    x = pb.center(tree)
    assert np.all(pb.state.wealth * x[:, :, 0] >= tree.path_data[:, :, 0])


def test_demand_above_wealth_is_infeasible():
    with pytest.raises(InfeasibleError):
        PortfolioProblem(PortfolioState(0.5, [1.0, 0.0], 0.4, 0.2))
