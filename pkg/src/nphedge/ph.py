"""Progressive hedging with optional CVaR objective and expert blending.

One outer iteration solves every scenario subproblem, projects onto the
nonanticipative subspace, optionally blends with an expert mapping, and
updates the multipliers.  With no blending schedule this is plain
progressive hedging; :mod:`nphedge.controller` supplies the schedule.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .problem import ProblemSpec
from .risk import cvar, cvar_threshold
from .subproblem import SolverBudget, solve_batch
from .tree import ScenarioTree, TreeError, WeightedNorm

log = logging.getLogger(__name__)


class PHDivergence(RuntimeError):
    """Iterates became non-finite (penalty too small or objective unbounded)."""


@dataclass(frozen=True)
class PHConfig:
    penalty_nu: float = 1.0
    epsilon: float = 1e-4
    max_outer_iterations: int = 500
    alpha: Optional[float] = None
    adaptive_penalty: bool = False

    def __post_init__(self):
        if not self.penalty_nu > 0:
            raise ValueError(f"penalty_nu must be positive, got {self.penalty_nu}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.max_outer_iterations < 1:
            raise ValueError("max_outer_iterations must be >= 1")
        if self.alpha is not None and not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha must lie in [0, 1), got {self.alpha}")


@dataclass
class Multipliers:
    lam: np.ndarray
    u: np.ndarray
    y: np.ndarray

    @classmethod
    def zeros(cls, tree: ScenarioTree) -> "Multipliers":
        N = tree.n_scenarios
        return cls(np.zeros(tree.shape), np.zeros(N), np.zeros(N))


@dataclass
class PHSolution:
    x_star: np.ndarray
    y_star: Optional[np.ndarray]
    multipliers: Multipliers
    iterations: int
    delta_history: list
    objective_value: float
    converged: bool
    penalty_history: list
    kappa_history: list = field(default_factory=list)
    x_hat: Optional[np.ndarray] = None
    history: Optional[list] = None  # per-iteration iterate dicts when recorded

    def to_dict(self) -> dict:
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "objective_value": self.objective_value,
            "delta_final": self.delta_history[-1] if self.delta_history else None,
            "x_star": self.x_star.tolist(),
            "first_stage": self.x_star[0, 0].tolist(),
            "y_star": None if self.y_star is None else self.y_star.tolist(),
            "lambda": self.multipliers.lam.tolist(),
            "u": self.multipliers.u.tolist(),
        }


def update_multipliers(mult: Multipliers, x_hat, x_next, y_hat, y_next, penalty_nu) -> Multipliers:
    """``lam + nu (x_hat - x_next)`` and ``u + nu (y_hat - y_next)``."""
    x_hat = np.asarray(x_hat, dtype=float)
    x_next = np.asarray(x_next, dtype=float)
    if x_hat.shape != mult.lam.shape or x_next.shape != mult.lam.shape:
        raise TreeError(f"shape mismatch: lambda {mult.lam.shape}, x_hat {x_hat.shape}, x_next {x_next.shape}")
    lam = mult.lam + penalty_nu * (x_hat - x_next)
    if y_hat is None:
        return Multipliers(lam, mult.u.copy(), mult.y.copy())
    y_hat = np.asarray(y_hat, dtype=float)
    y_next = np.broadcast_to(np.asarray(y_next, dtype=float), y_hat.shape)
    if y_hat.shape != mult.u.shape:
        raise TreeError(f"shape mismatch: u {mult.u.shape}, y_hat {y_hat.shape}")
    return Multipliers(lam, mult.u + penalty_nu * (y_hat - y_next), np.array(y_next))


def convergence_delta(x_hat, x_prev, y_hat, y_prev, norm: WeightedNorm) -> float:
    """``||x_hat - x_prev|| + ||y_hat - y_prev||`` in the probability-weighted norm."""
    x_hat = np.asarray(x_hat, dtype=float)
    x_prev = np.asarray(x_prev, dtype=float)
    if x_hat.shape != x_prev.shape:
        raise TreeError(f"shape mismatch: {x_hat.shape} vs {x_prev.shape}")
    delta = norm(x_hat - x_prev)
    if y_hat is not None:
        delta += norm(np.asarray(y_hat, dtype=float) - np.asarray(y_prev, dtype=float))
    return delta


def blend_step(x_expert, x_hat_projected, kappa: float) -> np.ndarray:
    """``kappa * x_expert + (1 - kappa) * x_hat_projected``; endpoints are returned as-is."""
    if not 0.0 <= kappa <= 1.0:
        raise ValueError(f"kappa must lie in [0, 1], got {kappa}")
    p = np.asarray(x_hat_projected, dtype=float)
    if kappa == 0.0:
        return p.copy()
    e = np.asarray(x_expert, dtype=float)
    if e.shape != p.shape:
        raise TreeError(f"shape mismatch: {e.shape} vs {p.shape}")
    if kappa == 1.0:
        return e.copy()
    return kappa * e + (1.0 - kappa) * p


def scenario_objective(problem, tree, x, alpha=None) -> float:
    F = np.asarray(problem.objective(x, tree), dtype=float)
    if alpha is None:
        return float(tree.probabilities @ F)
    return cvar(F, tree.probabilities, alpha)


class TraceWriter:
    """Line-delimited JSON trace of outer iterations."""

    def __init__(self, fh):
        self.fh = fh

    def __call__(self, record: dict) -> None:
        self.fh.write(json.dumps(record, sort_keys=True) + "\n")


def _snapshot(x, mult, x_hat, projected, kappa):
    # x, y, lam, u after the update; x_hat, projected (P_M x_hat) and kappa of the iteration producing them
    return {"x": x.copy(), "y": mult.y.copy(), "lam": mult.lam.copy(), "u": mult.u.copy(),
            "x_hat": None if x_hat is None else x_hat.copy(),
            "projected": None if projected is None else projected.copy(), "kappa": kappa}


def run_ph(problem: ProblemSpec, tree: ScenarioTree, start, config: PHConfig = PHConfig(), *,
           budget: SolverBudget = SolverBudget(),
           kappa: Optional[Callable[[int], float]] = None,
           expert_mapping=None,
           trace: Optional[Callable[[dict], None]] = None,
           record_history: bool = False) -> PHSolution:
    """Run (expert-blended) progressive hedging from ``start``.

    ``kappa(i)`` gives the blending weight at outer iteration ``i`` (1-based);
    ``expert_mapping`` is the mapping blended in, defaulting to ``start``.
    """
    x = np.array(start, dtype=float)
    if x.shape != tree.shape:
        raise TreeError(f"start shape {x.shape} does not match tree shape {tree.shape}")
    if not np.all(np.isfinite(x)):
        raise PHDivergence("start mapping is not finite")
    expert = x.copy() if expert_mapping is None else np.asarray(expert_mapping, dtype=float)
    q = tree.probabilities
    norm = WeightedNorm(tree)
    alpha = config.alpha
    nu = float(config.penalty_nu)
    mult = Multipliers.zeros(tree)
    if alpha is not None:
        F0 = problem.objective(problem.project(x, tree), tree)
        mult.y = np.full(tree.n_scenarios, cvar_threshold(F0, q, alpha)[1])
    vg = lambda z: problem.value_and_grad(z, tree)  # noqa: E731
    proj = lambda z: problem.project(z, tree)  # noqa: E731
    extra = []
    if not problem.convex:
        extra = [expert, problem.center(tree)]

    deltas, penalties, kappas, history = [], [], [], []
    if record_history:
        history.append(_snapshot(x, mult, None, None, None))
    converged = False
    x_hat = None
    i = 0
    for i in range(1, config.max_outer_iterations + 1):
        cv = None if alpha is None else (alpha, mult.y, mult.u)
        # restarts only on the first pass; afterwards warm starts keep x_hat in one basin
        x_hat, y_hat, _ = solve_batch(vg, proj, mult.lam, x, nu, budget, convex=problem.convex,
                                      cvar=cv, extra_starts=extra if i == 1 else (), warm=x_hat)
        p = tree.project_nonanticipative(x_hat)
        k = 0.0 if kappa is None else float(kappa(i))
        x_next = blend_step(expert, p, k)
        y_next = None if y_hat is None else np.full(tree.n_scenarios, float(q @ y_hat))
        delta = convergence_delta(x_hat, x, y_hat, mult.y, norm)
        nu_used = nu
        # the dual step uses the projected iterate, not the blend: x_hat - x_next would carry
        # kappa * (p - expert), a component inside M that biases the fixed point for good
        new = update_multipliers(mult, x_hat, p, y_hat, y_next, nu)
        if not (np.all(np.isfinite(new.lam)) and np.all(np.isfinite(x_next))):
            raise PHDivergence(f"non-finite iterate at outer iteration {i}")
        if config.adaptive_penalty:
            primal = norm(x_hat - p)
            dual = norm(x_next - x)
            if y_hat is not None:
                # the threshold is a shared first-stage variable too; leaving it out stalls CVaR runs
                primal += norm(y_hat - y_next)
                dual += norm(y_next - mult.y)
            if primal > 10.0 * dual:
                nu *= 1.5
            elif dual > 10.0 * primal:
                nu /= 1.5
        x, mult = x_next, new
        deltas.append(delta)
        penalties.append(nu_used)
        kappas.append(k)
        if record_history:
            history.append(_snapshot(x, mult, x_hat, p, k))
        if trace is not None:
            trace({"iteration": i, "delta": delta, "kappa": k, "penalty": nu_used,
                   "objective": scenario_objective(problem, tree, x, alpha)})
        if delta <= config.epsilon:
            converged = True
            break
    if not converged:
        log.warning("progressive hedging hit the %d-iteration cap (delta=%.3g)",
                    config.max_outer_iterations, deltas[-1])
    return PHSolution(
        x_star=x,
        y_star=None if alpha is None else mult.y.copy(),
        multipliers=mult,
        iterations=i,
        delta_history=deltas,
        objective_value=scenario_objective(problem, tree, x, alpha),
        converged=converged,
        penalty_history=penalties,
        kappa_history=kappas,
        x_hat=x_hat,
        history=history if record_history else None,
    )
