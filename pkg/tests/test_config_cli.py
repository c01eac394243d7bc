import csv
import json
from pathlib import Path

import numpy as np
import pytest

from nphedge.cli import main
from nphedge.config import ConfigError, load_config, parse_config
from nphedge.reporting import read_jsonl

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

TOY = {"domain": "toy", "mode": "pure_sp", "ph": {"epsilon": 1e-6},
       "toy": {"probs": [0.5, 0.5], "n_stages": 2, "centers": [[[1.0], [0.0]], [[3.0], [0.0]]],
               "lower": 0.0, "upper": 10.0}}

FLAT = {"domain": "portfolio", "steps": 6, "np": {"lookahead_T": 1, "n_scenarios": 4},
        "portfolio": {"synthetic": {"mean_log": [0.0], "cov_log": [[0.0]]},
                      "liquidity": {"mu_l": 0.0, "sigma_l": 0.0}}}

LIQUID = {"domain": "portfolio", "steps": 8, "seed": 4, "ph": {"adaptive_penalty": True},
          "np": {"lookahead_T": 2, "n_scenarios": 8},
          "portfolio": {"synthetic": {"mean_log": [0.0005, 0.0003], "cov_log": [[4e-4, 1e-4], [1e-4, 3e-4]]}}}

BIKE = {"domain": "bike", "steps": 3, "seed": 1,
        "ph": {"penalty_nu": 10.0, "epsilon": 1e-4, "max_outer_iterations": 40, "adaptive_penalty": True},
        "np": {"lookahead_T": 1, "n_scenarios": 10},
        "expert": {"kind": "fixed_weights", "weights": [0.7, 0.3]},
        "bike": {"inline": {"stations": 2, "bikes": 10, "lower": [2, 2], "upper": [6, 8],
                            "demand_mean": [4.0, 5.0], "demand_cov": [[1.0, 0.0], [0.0, 2.0]]}}}


def run(tmp_path, cfg, *extra, command=None, name="run"):
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(cfg))
    out = tmp_path / name
    command = command or {"toy": "solve", "portfolio": "backtest", "bike": "bike-sim"}[cfg["domain"]]
    return main([command, "--config", str(path), "--out", str(out), *extra]), out


def test_toy_solve(tmp_path):
    code, out = run(tmp_path, TOY)
    assert code == 0
    sol = json.loads((out / "solution.json").read_text())
    assert sol["converged"]
    assert sol["first_stage"] == pytest.approx([2.0], abs=1e-4)
    trace = read_jsonl(out / "trace.jsonl")
    assert trace[-1]["delta"] <= 1e-6
    assert (out / "timings.json").is_file()


def test_forced_cap_exit_code(tmp_path, capsys):
    cfg = dict(TOY, ph={"epsilon": 1e-12, "max_outer_iterations": 5})
    code, out = run(tmp_path, cfg)
    assert code == 3
    sol = json.loads((out / "solution.json").read_text())
    assert sol["converged"] is False and sol["iterations"] == 5
    assert "not converged" in capsys.readouterr().err


def test_unknown_key_exit_code(tmp_path, capsys):
    cfg = dict(TOY, ph={"epsilon": 1e-6, "epsilom": 2})
    code, _ = run(tmp_path, cfg)
    assert code == 2
    assert "ph.epsilom" in capsys.readouterr().err


@pytest.mark.parametrize("mutate, fragment", [
    (lambda c: c.update(domain="portfolio"), "portfolio"),
    (lambda c: c.update(mode="lucky"), "mode"),
    (lambda c: c["ph"].update(epsilon=-1.0), "ph.epsilon"),
    (lambda c: c.update(seed=-3), "seed"),
])
def test_invalid_values_name_the_key(mutate, fragment):
    cfg = json.loads(json.dumps(TOY))
    mutate(cfg)
    with pytest.raises(ConfigError, match=fragment):
        parse_config(cfg)


def test_missing_file_and_bad_json(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "nope.json")
    p = tmp_path / "bad.json"
    p.write_text('{"domain": "toy",\n  nope}')
    with pytest.raises(ConfigError, match="line 2"):
        load_config(p)
    cfg = dict(BIKE, bike={"instance": "missing.json"})
    assert run(tmp_path, cfg)[0] == 2


def test_relative_paths_resolve_against_config_directory(tmp_path):
    (tmp_path / "sub").mkdir()
    (tmp_path / "sub" / "inst.json").write_text(json.dumps(BIKE["bike"]["inline"]))
    (tmp_path / "sub" / "c.json").write_text(json.dumps(dict(BIKE, bike={"instance": "inst.json"}, out="o")))
    cfg = load_config(tmp_path / "sub" / "c.json")
    assert Path(cfg.bike.instance) == tmp_path / "sub" / "inst.json"
    assert Path(cfg.out) == tmp_path / "sub" / "o"


def test_infeasible_instance_exit_code(tmp_path, capsys):
    cfg = json.loads(json.dumps(LIQUID))
    cfg["portfolio"]["initial_wealth"] = 0.001
    code, _ = run(tmp_path, cfg)
    assert code == 4
    assert "infeasible" in capsys.readouterr().err


def test_expert_only_on_flat_returns(tmp_path):
    code, out = run(tmp_path, dict(FLAT, mode="expert_only"))
    assert code == 0
    traj = read_jsonl(out / "trajectory.jsonl")
    assert len(traj) == 6
    assert all(r["wealth_before"] == 1.0 and r["wealth_after"] == 1.0 for r in traj)
    assert json.loads((out / "summary.json").read_text())["metrics"]["mdd"] == 0.0


def test_np_backtest_keeps_cash_above_demand(tmp_path):
    code, out = run(tmp_path, LIQUID)
    assert code == 0
    with (out / "plot.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 8
    for row in rows:
        assert float(row["liquid_amount"]) >= float(row["cumulative_demand"])
    assert float(rows[-1]["cumulative_demand"]) > 0.1


def test_sample_command_writes_tree(tmp_path):
    code, out = run(tmp_path, LIQUID, command="sample")
    assert code == 0
    doc = json.loads((out / "tree.json").read_text())
    assert doc["stages"] == 3 and len(doc["scenario_data"]) > 0


def test_seed_override_changes_the_run(tmp_path):
    _, a = run(tmp_path, LIQUID, "--seed", "1", name="a")
    _, b = run(tmp_path, LIQUID, "--seed", "2", name="b")
    assert (a / "trajectory.jsonl").read_bytes() != (b / "trajectory.jsonl").read_bytes()
    assert json.loads((a / "summary.json").read_text())["seed"] == 1


def test_trace_flag_writes_inner_traces(tmp_path):
    code, out = run(tmp_path, BIKE, "--trace")
    assert code == 0
    trace = read_jsonl(out / "trace.jsonl")
    assert {r["tau"] for r in trace} == {0, 1, 2}


def test_compare(tmp_path, capsys):
    _, np_run = run(tmp_path, LIQUID, name="np")
    _, ex_run = run(tmp_path, dict(LIQUID, mode="expert_only"), name="expert")
    _, bike_run = run(tmp_path, BIKE, name="bike")
    assert main(["compare", str(np_run), str(ex_run), str(bike_run), "--out", str(tmp_path / "cmp")]) == 0
    with (tmp_path / "cmp" / "comparison.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert [r["run"] for r in rows] == ["np", "expert", "bike"]
    assert rows[0].keys() == rows[1].keys() == rows[2].keys()
    assert "cumulative_constraint_violation_cost" in rows[2]
    assert rows[2]["cumulative_constraint_violation_cost"] != ""
    assert rows[2]["sharpe"] == ""
    assert main(["compare", "--out", str(tmp_path / "cmp2")]) == 2
    assert main(["compare", str(np_run), str(tmp_path / "ghost")]) == 2


def test_shipped_configs_parse():
    for p in sorted(CONFIGS.glob("*.json")):
        if p.name == "bike_instance.json":
            continue
        cfg = load_config(p)
        assert cfg.domain in ("toy", "portfolio", "bike")


def test_reports_are_recomputable_from_logs(tmp_path):
    from nphedge.domains.portfolio import compute_metrics

    _, out = run(tmp_path, LIQUID)
    traj = read_jsonl(out / "trajectory.jsonl")
    metrics = json.loads((out / "summary.json").read_text())["metrics"]
    w = [1.0]
    for r in traj:
        w.append(w[-1] * r["wealth_after"] / r["wealth_before"])
    again = compute_metrics(np.array(w))
    for k in ("returns", "sharpe", "volatility", "mdd"):
        assert abs(metrics[k] - again[k]) <= 1e-12
    assert abs(metrics["cumulative_reward"] - sum(r["reward"] for r in traj)) <= 1e-12
    assert metrics["cumulative_constraint_violation_cost"] == sum(r["violation"] for r in traj)
