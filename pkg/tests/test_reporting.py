import csv
import io
import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nphedge import reporting


def fake_records(rng, n, bike=False):
    recs = []
    W = 1.0
    for tau in range(n):
        if bike:
            recs.append({"tau": tau, "reward": -float(rng.uniform(0, 3)), "violation": float(rng.uniform(0, 1) > 0.7),
                         "capacity_residual": float(rng.normal()), "converged": True, "repaired": False,
                         "inner_iterations": int(rng.integers(1, 50))})
            continue
        g = float(rng.uniform(0.97, 1.03))
        a0 = float(rng.uniform(0, 1))
        recs.append({"tau": tau, "wealth_before": W, "wealth_after": W * g, "action": [a0, 1 - a0],
                     "liquid_amount": W * a0, "cumulative_demand": 0.01 * tau, "reward": float(np.log(g)),
                     "violation": max(0.0, 0.01 * tau - W * a0), "liquidity_residual": W * a0 - 0.01 * tau,
                     "converged": bool(rng.random() < 0.9), "repaired": False, "inner_iterations": 3})
        W *= g
    return recs


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 40))
def test_portfolio_summary_is_recomputable(seed, n):
    recs = fake_records(np.random.default_rng(seed), n)
    s = reporting.portfolio_summary(json.loads(json.dumps(recs)))
    w = np.array([1.0] + [r["wealth_after"] for r in recs])
    peak = np.maximum.accumulate(w)
    assert abs(s["mdd"] - float(np.max((peak - w) / peak))) <= 1e-12
    assert abs(s["cumulative_reward"] - sum(r["reward"] for r in recs)) <= 1e-12
    assert s["violation_steps"] == sum(1 for r in recs if r["violation"] > 0)
    assert s["steps_not_converged"] == sum(1 for r in recs if not r["converged"])


def test_wealth_index_chains_across_resets():
    recs = [{"wealth_before": 1.0, "wealth_after": 1.1}, {"wealth_before": 1.0, "wealth_after": 0.9}]
    assert np.allclose(reporting.wealth_index(recs), [1.0, 1.1, 0.99])


def test_bike_summary_and_plot():
    recs = fake_records(np.random.default_rng(0), 12, bike=True)
    s = reporting.bike_summary(recs)
    rows = list(csv.DictReader(io.StringIO(reporting.bike_plot_csv(recs))))
    assert float(rows[-1]["cumulative_reward"]) == pytest.approx(s["cumulative_reward"], abs=1e-12)
    assert float(rows[-1]["cumulative_constraint_violation_cost"]) == s["cumulative_constraint_violation_cost"]


def test_empty_trajectories_rejected():
    with pytest.raises(ValueError):
        reporting.portfolio_summary([])
    with pytest.raises(ValueError):
        reporting.bike_summary([])


def test_plot_csv_floats_round_trip():
    recs = fake_records(np.random.default_rng(1), 5)
    rows = list(csv.DictReader(io.StringIO(reporting.portfolio_plot_csv(recs))))
    assert [float(r["wealth"]) for r in rows] == [r["wealth_before"] for r in recs]
    assert "np.float64" not in reporting.portfolio_plot_csv(recs)


def test_compare_rows_share_one_schema():
    reps = [{"domain": "portfolio", "mode": "np", "metrics": {"returns": 0.1, "sharpe": 1.0}},
            {"domain": "bike", "mode": "np", "metrics": {"cumulative_constraint_violation_cost": 0.0}}]
    rows = reporting.compare_rows(reps, ["a", "b"])
    assert rows[0].keys() == rows[1].keys()
    assert tuple(rows[0]) == reporting.COMPARE_COLUMNS
    assert rows[1]["cumulative_constraint_violation_cost"] == 0.0 and rows[1]["sharpe"] == ""
    with pytest.raises(ValueError):
        reporting.compare_rows(reps[:1], ["a"])


def test_atomic_write_replaces_and_leaves_no_temp(tmp_path):
    p = tmp_path / "deep" / "f.txt"
    reporting.write_atomic(p, "one")
    reporting.write_atomic(p, "two")
    assert p.read_text() == "two"
    assert os.listdir(p.parent) == ["f.txt"]
