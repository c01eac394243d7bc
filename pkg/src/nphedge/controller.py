"""Expert-guided hedging step and the rolling-horizon execution loop.

At every step ``tau`` the controller observes the simulator state, samples a
fresh scenario tree, rolls the expert through it, and runs progressive
hedging where iteration ``i`` blends the expert mapping back in with weight
``kappa(i)``.  The common first-stage action is executed and the loop repeats.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .experts import Expert, query_expert
from .ph import PHConfig, blend_step, run_ph  # noqa: F401  (blend_step re-exported)
from .subproblem import SolverBudget

log = logging.getLogger(__name__)

KAPPA_MODES = ("imitation", "warm_start", "constant")


@dataclass(frozen=True)
class KappaSchedule:
    mode: str = "imitation"
    i_hat: int = 20
    constant_value: float = 0.0

    def __post_init__(self):
        if self.mode not in KAPPA_MODES:
            raise ValueError(f"kappa mode must be one of {KAPPA_MODES}, got {self.mode!r}")
        if self.i_hat < 1:
            raise ValueError("i_hat must be >= 1")
        if not 0.0 <= self.constant_value <= 1.0:
            raise ValueError("constant_value must lie in [0, 1]")

    def __call__(self, i: int) -> float:
        return kappa_schedule(self, i)


def kappa_schedule(schedule: KappaSchedule, i: int) -> float:
    """Blending weight at outer iteration ``i >= 1``."""
    if schedule.mode == "constant":
        return float(schedule.constant_value)
    if schedule.mode == "warm_start":
        return 1.0 if i == 1 else 0.0
    return (1.0 + i) ** -2 if i < schedule.i_hat else 0.0


@dataclass(frozen=True)
class NPConfig:
    ph: PHConfig = PHConfig()
    kappa: KappaSchedule = KappaSchedule()
    lookahead_T: int = 5
    n_scenarios: int = 20
    discount_gamma: float = 0.99
    seed: int = 0
    budget: SolverBudget = SolverBudget()

    def __post_init__(self):
        if self.lookahead_T < 1:
            raise ValueError("lookahead_T must be >= 1")
        if self.n_scenarios < 1:
            raise ValueError("n_scenarios must be >= 1")
        if not 0.0 <= self.discount_gamma <= 1.0:
            raise ValueError("discount_gamma must lie in [0, 1]")

    @property
    def expert_only(self) -> bool:
        return self.kappa.mode == "constant" and self.kappa.constant_value == 1.0


def run_np_step(state, expert: Expert, problem, tree, config: NPConfig, trace=None):
    """One hedging solve rooted at ``state``; returns ``(first_stage_action, diagnostics)``."""
    x_pi = query_expert(expert, state, tree, problem)
    if config.expert_only:
        # every blended iterate equals the expert mapping; skip the solves
        return x_pi[0, 0].copy(), {"iterations": 0, "converged": True, "delta_final": None,
                                    "kappa_final": 1.0, "repaired": False, "objective": None}
    sol = run_ph(problem, tree, x_pi, config.ph, budget=config.budget, kappa=config.kappa,
                 expert_mapping=x_pi, trace=trace)
    x1 = sol.x_star[0, 0].copy()
    repaired = False
    if sol.kappa_history[-1] < 1.0:
        # always re-project: averaging can leave the action a rounding error outside the set
        fixed = problem.project_first_stage(x1, tree)
        gap = float(np.max(np.abs(fixed - x1)))
        if gap > 1e-10:
            log.warning("first-stage action off the feasible set by %.3g; projecting", gap)
            repaired = True
        x1 = fixed
    if not sol.converged:
        log.warning("hedging step did not converge; executing the last iterate")
    diag = {"iterations": sol.iterations, "converged": sol.converged,
            "delta_final": sol.delta_history[-1], "kappa_final": sol.kappa_history[-1],
            "repaired": repaired, "objective": sol.objective_value}
    return x1, diag


def step_rng(seed: int, tau: int, stream: int = 0) -> np.random.Generator:
    """Independent generator for (seed, tau, stream); stream 0 is scenario sampling."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0, tau, stream)))


@dataclass
class Trajectory:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    @classmethod
    def from_jsonl(cls, text: str) -> "Trajectory":
        return cls([json.loads(line) for line in text.splitlines() if line.strip()])

    def column(self, key):
        return [r[key] for r in self.records]


def run_rolling_horizon(sim, expert: Expert, domain, config: NPConfig, steps: int,
                        trace=None) -> Trajectory:
    """Execute ``steps`` decisions on ``sim``, re-solving from the observed state each step.

    ``domain`` supplies ``sample_tree(state, n_scenarios, n_stages, rng)`` and
    ``problem(state, gamma)``; ``sim`` supplies ``observe()`` and
    ``step(action) -> dict``.
    """
    traj = Trajectory()
    for tau in range(steps):
        state = sim.observe()
        tree = domain.sample_tree(state, config.n_scenarios, config.lookahead_T, step_rng(config.seed, tau))
        problem = domain.problem(state, config.discount_gamma)
        tr = None if trace is None else (lambda rec, tau=tau: trace({"tau": tau, **rec}))
        action, diag = run_np_step(state, expert, problem, tree, config, trace=tr)
        outcome = sim.step(action)
        rec = {"tau": tau, "state": state.to_dict(), "action": action.tolist(),
               "inner_iterations": diag["iterations"], "converged": diag["converged"],
               "repaired": diag["repaired"]}
        rec.update(outcome)
        traj.records.append(rec)
    return traj
