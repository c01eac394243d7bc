"""Command-line entry point: ``nphedge {solve,backtest,bike-sim,compare,sample}``.

Exit codes: 0 success, 2 configuration or input error, 3 solver did not
converge (output files are still written), 4 infeasible instance.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import reporting
from .config import ConfigError, RunConfig, load_config
from .controller import run_rolling_horizon, step_rng
from .domains.bike import BikeDomain, BikeEnv, InstanceError, instance_from_dict, load_instance
from .domains.portfolio import (DataError, LiquidityModel, PortfolioDomain, PortfolioEnv, ReturnModel,
                                fit_lognormal, load_prices_csv)
from .domains.toy import AbsoluteProblem, QuadraticProblem
from .experts import ExpertFileError, expert_from_config, query_expert
from .ph import PHDivergence, TraceWriter, run_ph
from .projections import InfeasibleError
from .tree import ScenarioTree, TreeError

log = logging.getLogger("nphedge")

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGED, EXIT_INFEASIBLE = 0, 2, 3, 4


# -- builders -------------------------------------------------------------------------

def build_portfolio(cfg: RunConfig):
    sec = cfg.portfolio
    liq = LiquidityModel(sec.liquidity.mu_l, sec.liquidity.sigma_l)
    if sec.synthetic is not None:
        try:
            rm = ReturnModel(sec.synthetic.mean_log, sec.synthetic.cov_log)
        except ValueError as exc:
            raise ConfigError(f"config key 'portfolio.synthetic': {exc}") from None
        env = PortfolioEnv(1 + rm.n_risky, liq, cfg.seed, returns=rm, episode_length=sec.episode_length,
                           initial_wealth=sec.initial_wealth)
    else:
        gross, _, _ = load_prices_csv(sec.prices_csv)
        n_train = int(sec.train_fraction * gross.shape[0])
        if n_train < 2:
            raise ConfigError("config key 'portfolio.train_fraction': fewer than 2 training rows")
        test = gross[n_train:]
        if cfg.steps > test.shape[0]:
            raise ConfigError(f"config key 'steps': {cfg.steps} exceeds the {test.shape[0]} test rows")
        rm = fit_lognormal(gross[:n_train])
        env = PortfolioEnv(1 + rm.n_risky, liq, cfg.seed, gross_returns=test,
                           episode_length=sec.episode_length, initial_wealth=sec.initial_wealth)
    return PortfolioDomain(rm, liq, sec.objective_mode), env


def build_bike(cfg: RunConfig):
    sec = cfg.bike
    inst = load_instance(sec.instance) if sec.instance else instance_from_dict(sec.inline, "config key 'bike.inline'")
    return BikeDomain(inst), BikeEnv(inst, cfg.seed, sec.initial_allocation)


def build_toy(cfg: RunConfig):
    sec = cfg.toy
    c = np.asarray(sec.centers, dtype=float)
    tree = ScenarioTree.fan(sec.probs, sec.n_stages, c.shape[2])
    lo = -np.inf if sec.lower is None else np.asarray(sec.lower, dtype=float)
    hi = np.inf if sec.upper is None else np.asarray(sec.upper, dtype=float)
    if sec.objective == "absolute":
        pb = AbsoluteProblem(c, 1.0 if sec.weights is None else sec.weights, lo, hi)
    else:
        pb = QuadraticProblem(c, sec.curvatures, lo, hi, sec.simplex)
    return tree, pb


def build_expert(cfg: RunConfig, action_dim: int):
    d = cfg.expert.model_dump(exclude_none=True)
    if cfg.domain == "portfolio":
        d.setdefault("mu_l", cfg.portfolio.liquidity.mu_l)
        d.setdefault("sigma_l", cfg.portfolio.liquidity.sigma_l)
    try:
        return expert_from_config(d, action_dim)
    except (KeyError, ValueError) as exc:
        if isinstance(exc, ExpertFileError):
            raise
        raise ConfigError(f"config key 'expert': {exc}") from None


def fixed_instance(cfg: RunConfig):
    """``(state, tree, problem)`` for the one-shot commands."""
    if cfg.domain == "toy":
        tree, pb = build_toy(cfg)
        return None, tree, pb
    dom, env = build_portfolio(cfg) if cfg.domain == "portfolio" else build_bike(cfg)
    state = env.observe()
    tree = dom.sample_tree(state, cfg.np_.n_scenarios, cfg.np_.lookahead_T, step_rng(cfg.seed, 0))
    return state, tree, dom.problem(state, cfg.np_.discount_gamma)


# -- commands -------------------------------------------------------------------------

def cmd_solve(cfg: RunConfig, out: Path) -> int:
    t0 = time.perf_counter()
    state, tree, pb = fixed_instance(cfg)
    expert = build_expert(cfg, tree.action_dim)
    x_pi = query_expert(expert, state, tree, pb)
    trace = []
    if cfg.mode == "expert_only":
        doc = {"converged": True, "iterations": 0, "objective_value": float(tree.probabilities @ pb.objective(x_pi, tree)),
               "delta_final": None, "x_star": x_pi.tolist(), "first_stage": x_pi[0, 0].tolist(), "y_star": None,
               "lambda": None, "u": None}
    else:
        sol = run_ph(pb, tree, x_pi, cfg.ph_config(), budget=cfg.budget_config(), kappa=cfg.kappa(),
                     expert_mapping=x_pi, trace=trace.append)
        doc = sol.to_dict()
    doc.update({"domain": cfg.domain, "mode": cfg.mode, "epsilon": cfg.ph.epsilon, "config": cfg.echo()})
    reporting.write_atomic(out / "solution.json", reporting.dumps(doc))
    reporting.write_atomic(out / "trace.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in trace))
    reporting.write_atomic(out / "timings.json", reporting.dumps({"wall_seconds": time.perf_counter() - t0}))
    if not doc["converged"]:
        print(f"not converged after {doc['iterations']} iterations (delta {doc['delta_final']:.3g})", file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


def _rolling(cfg: RunConfig, out: Path, domain, env, summarize, plot) -> int:
    t0 = time.perf_counter()
    expert = build_expert(cfg, domain.action_dim)
    lines = []
    tracer = TraceWriter(_ListFile(lines)) if cfg.trace else None
    traj = run_rolling_horizon(env, expert, domain, cfg.np_config(), cfg.steps, trace=tracer)
    metrics = summarize(traj.records)
    report = {"domain": cfg.domain, "mode": cfg.mode, "seed": cfg.seed, "trajectory": "trajectory.jsonl",
              "plot": "plot.csv", "metrics": metrics, "config": cfg.echo()}
    reporting.write_atomic(out / "trajectory.jsonl", traj.to_jsonl())
    reporting.write_atomic(out / "summary.json", reporting.dumps(report))
    reporting.write_atomic(out / "plot.csv", plot(traj.records))
    if tracer is not None:
        reporting.write_atomic(out / "trace.jsonl", "".join(lines))
    reporting.write_atomic(out / "timings.json", reporting.dumps({"wall_seconds": time.perf_counter() - t0}))
    return EXIT_OK


class _ListFile:
    def __init__(self, lines):
        self.lines = lines

    def write(self, s):
        self.lines.append(s)


def cmd_backtest(cfg: RunConfig, out: Path) -> int:
    if cfg.domain != "portfolio":
        raise ConfigError("config key 'domain': backtest needs domain 'portfolio'")
    dom, env = build_portfolio(cfg)
    return _rolling(cfg, out, dom, env, reporting.portfolio_summary, reporting.portfolio_plot_csv)


def cmd_bike_sim(cfg: RunConfig, out: Path) -> int:
    if cfg.domain != "bike":
        raise ConfigError("config key 'domain': bike-sim needs domain 'bike'")
    dom, env = build_bike(cfg)
    return _rolling(cfg, out, dom, env, reporting.bike_summary, reporting.bike_plot_csv)


def cmd_sample(cfg: RunConfig, out: Path) -> int:
    _, tree, _ = fixed_instance(cfg)
    reporting.write_atomic(out / "tree.json", json.dumps(tree.to_dict(), sort_keys=True) + "\n")
    return EXIT_OK


def cmd_compare(runs: list[str], out: Path) -> int:
    if len(runs) < 2:
        raise ConfigError(f"compare needs at least 2 run reports, got {len(runs)}")
    reports, names = [], []
    for r in runs:
        p = Path(r)
        summary = p / "summary.json" if p.is_dir() else p
        if not summary.is_file():
            raise ConfigError(f"missing run report: {summary}")
        reports.append(json.loads(summary.read_text()))
        names.append(p.name if p.is_dir() else p.parent.name)
    rows = reporting.compare_rows(reports, names)
    reporting.write_atomic(out / "comparison.csv", reporting.compare_csv(rows))
    reporting.write_atomic(out / "comparison.json", reporting.dumps(rows))
    return EXIT_OK


# -- argument parsing -------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nphedge", description="Expert-guided progressive hedging runs.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in [("solve", "one hedging solve on a fixed scenario tree"),
                        ("backtest", "rolling-horizon portfolio run"),
                        ("bike-sim", "rolling-horizon bike repositioning run"),
                        ("sample", "dump the scenario tree a solve would use")]:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="run configuration JSON")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--trace", action="store_true", help="write per-iteration traces")
    p = sub.add_parser("compare", help="tabulate completed runs")
    p.add_argument("runs", nargs="*", help="run directories or summary.json files")
    p.add_argument("--out", default=".", help="output directory")
    return ap


COMMANDS = {"solve": cmd_solve, "backtest": cmd_backtest, "bike-sim": cmd_bike_sim, "sample": cmd_sample}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = _parser().parse_args(argv)
    try:
        if args.command == "compare":
            return cmd_compare(args.runs, Path(args.out))
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.trace:
            overrides["trace"] = True
        if args.out is not None:
            overrides["out"] = str(Path(args.out).resolve())
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg, Path(cfg.out))
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except PHDivergence as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    except (ConfigError, ExpertFileError, DataError, InstanceError, TreeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
