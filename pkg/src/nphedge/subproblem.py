"""Per-scenario augmented subproblems, solved by first-order methods.

The risk-neutral subproblem for scenario ``s`` is

    min_{x in G_s}  f_s(x) + <lam_s, x> + (nu / 2) ||x - anchor_s||^2

and the CVaR form adds the threshold ``y``:

    min_{y, x in G_s}  y + max(0, f_s(x) - y) / (1 - alpha)
                       + (nu / 2)(y - y_anchor_s)^2 + u_s * y + <lam_s, x> + (nu / 2)||x - anchor_s||^2

For fixed ``x`` the optimal ``y`` is closed form (:func:`optimal_y_given_x`),
so the solver alternates that exact update with projected gradient steps in
``x``; the x-step weights the objective gradient by :func:`hinge_weight`.

Everything here is batched: arrays carry a leading scenario axis and all
scenarios advance together, each with its own step size.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .risk import hinge_weight, optimal_y_given_x

STEP_RULES = ("auto", "gradient", "subgradient")


class SolverError(RuntimeError):
    """Non-finite objective or gradient at an accepted iterate."""


@dataclass(frozen=True)
class SolverBudget:
    max_iterations: int = 200
    tolerance: float = 1e-8
    step_rule: str = "auto"
    restarts: int = 3

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.tolerance < 0:
            raise ValueError("tolerance must be >= 0")
        if self.step_rule not in STEP_RULES:
            raise ValueError(f"step_rule must be one of {STEP_RULES}, got {self.step_rule!r}")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")


@dataclass(frozen=True)
class CVaRBlock:
    alpha: float
    y_anchor: float
    u_dual: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha must lie in [0, 1), got {self.alpha}")


@dataclass
class ScenarioSubproblem:
    """One scenario's subproblem with plain ``(T, n)`` callables."""

    objective: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    feasible_projector: Callable[[np.ndarray], np.ndarray]
    lambda_s: np.ndarray
    x_anchor: np.ndarray
    penalty_nu: float
    cvar: Optional[CVaRBlock] = None
    convex: bool = True

    def __post_init__(self):
        self.x_anchor = np.atleast_2d(np.asarray(self.x_anchor, dtype=float))
        self.lambda_s = np.broadcast_to(np.asarray(self.lambda_s, dtype=float), self.x_anchor.shape).copy()
        if not self.penalty_nu > 0:
            raise ValueError(f"penalty_nu must be positive, got {self.penalty_nu}")


@dataclass
class BatchResult:
    x: np.ndarray
    value: np.ndarray
    iterations: int
    history: list = field(default_factory=list)


def _rowsum(a: np.ndarray) -> np.ndarray:
    return a.reshape(a.shape[0], -1).sum(axis=1)


def augmented(value_and_grad, lam, anchor, nu, cvar=None):
    """Build the batched augmented objective ``x -> (values, grads)``.

    ``cvar`` is ``(alpha, y_anchor, u_dual)`` with per-scenario arrays.
    """
    lam = np.asarray(lam, dtype=float)
    anchor = np.asarray(anchor, dtype=float)

    def fun(x):
        F, gF = value_and_grad(x)
        F = np.asarray(F, dtype=float)
        d = x - anchor
        prox = _rowsum(lam * x) + 0.5 * nu * _rowsum(d * d)
        gprox = lam + nu * d
        if cvar is None:
            return F + prox, gF + gprox
        alpha, ya, u = cvar
        finite = np.isfinite(F)
        Fs = np.where(finite, F, 0.0)
        y = optimal_y_given_x(Fs, ya, u, nu, alpha)
        c = 1.0 / (1.0 - alpha)
        phi = y + c * np.maximum(0.0, Fs - y) + u * y + 0.5 * nu * (y - ya) ** 2
        w = hinge_weight(Fs, ya, u, nu, alpha)
        vals = np.where(finite, phi + prox, np.inf)
        return vals, w[:, None, None] * gF + gprox

    return fun


def minimize_batch(fun, project, starts: Sequence[np.ndarray], budget: SolverBudget,
                   nu: float, record: bool = False) -> BatchResult:
    """Minimise ``fun`` row-wise over the projector's set from every start; keep the best."""
    # "auto" uses backtracking for nonsmooth objectives too: c/sqrt(k) steps stall far from kinks
    rule = "gradient" if budget.step_rule == "auto" else budget.step_rule
    best: Optional[BatchResult] = None
    for x0 in starts:
        if rule == "subgradient":
            res = _subgradient(fun, project, x0, budget, nu, record)
        else:
            res = _projected_gradient(fun, project, x0, budget, nu, record)
        if best is None:
            best = res
        else:
            better = res.value < best.value
            best.x[better] = res.x[better]
            best.value = np.where(better, res.value, best.value)
            best.iterations += res.iterations
    return best


def _projected_gradient(fun, project, x0, budget, nu, record):
    # backtracking on the quadratic upper model; accepted steps never increase the value.
    # The prox term alone has curvature nu, so steps longer than 1/nu are never needed.
    x = project(np.array(x0, dtype=float))
    f, g = fun(x)
    if not np.all(np.isfinite(f)) or not np.all(np.isfinite(g)):
        raise SolverError("non-finite objective at the starting point")
    N = x.shape[0]
    step = np.full(N, 1.0 / nu)
    done = np.zeros(N, dtype=bool)
    history = [f.copy()] if record else []
    it = 0
    for it in range(1, budget.max_iterations + 1):
        trial = project(x - step[:, None, None] * g)
        with np.errstate(all="ignore"):
            ft, gt = fun(trial)
        d = trial - x
        dd = _rowsum(d * d)
        model = f + _rowsum(g * d) + dd / (2.0 * step)
        fp_slack = 1e-13 * np.maximum(1.0, np.abs(f))
        ok = np.isfinite(ft) & (ft <= model + fp_slack) & (ft <= f + fp_slack) & ~done
        ok &= np.all(np.isfinite(gt.reshape(N, -1)), axis=1)
        moved = np.abs(d).reshape(N, -1).max(axis=1)
        # gradient-mapping size at the full 1/nu step; unlike `moved` it does not shrink with backtracking
        scaled = moved / (step * nu)
        # stagnation: with the nu-prox the value gap is within cond * decrease, so a
        # decrease of 1e-3 * tol (relative) bounds the gap by tol for cond <= 1e3
        stalled = ok & (f - ft <= 1e-3 * budget.tolerance * (1.0 + np.abs(f)))
        x[ok] = trial[ok]
        f = np.where(ok, ft, f)
        g[ok] = gt[ok]
        step = np.where(ok, np.minimum(step * 1.5, 1.0 / nu), step * 0.5)
        # a tiny accepted move also counts: at a kink backtracking shrinks the step and `scaled` never vanishes
        done |= (scaled <= budget.tolerance) | (ok & (moved <= budget.tolerance)) | stalled | (moved == 0.0) | (step < 1e-18)
        if record:
            history.append(f.copy())
        if done.all():
            break
    return BatchResult(x, f, it, history)


def _subgradient(fun, project, x0, budget, nu, record):
    x = project(np.array(x0, dtype=float))
    f, g = fun(x)
    if not np.all(np.isfinite(f)):
        raise SolverError("non-finite objective at the starting point")
    best_x, best_f = x.copy(), f.copy()
    history = [best_f.copy()] if record else []
    c = 1.0 / nu
    for k in range(1, budget.max_iterations + 1):
        x = project(x - (c / np.sqrt(k)) * g)
        with np.errstate(all="ignore"):
            f, g = fun(x)
        g = np.where(np.isfinite(g), g, 0.0)
        better = np.isfinite(f) & (f < best_f)
        best_x[better] = x[better]
        best_f = np.where(better, f, best_f)
        if record:
            history.append(best_f.copy())
    return BatchResult(best_x, best_f, budget.max_iterations, history)


def solve_batch(value_and_grad, project, lam, anchor, nu, budget: SolverBudget, *,
                convex=True, cvar=None, extra_starts=(), warm=None, record=False):
    """Solve all scenario subproblems; returns ``(x_hat, y_hat or None, BatchResult)``."""
    fun = augmented(value_and_grad, lam, anchor, nu, cvar)
    starts = [anchor if warm is None else warm]
    if not convex:
        starts += [s for s in extra_starts if s is not None]
        starts = starts[: max(1, budget.restarts)]
    res = minimize_batch(fun, project, starts, budget, nu, record)
    if not np.all(np.isfinite(res.value)):
        raise SolverError("non-finite objective value in subproblem solution")
    y_hat = None
    if cvar is not None:
        F, _ = value_and_grad(res.x)
        alpha, ya, u = cvar
        y_hat = optimal_y_given_x(np.asarray(F, dtype=float), ya, u, nu, alpha)
        y_hat = np.atleast_1d(y_hat)
    return res.x, y_hat, res


def _wrap_single(sub: ScenarioSubproblem):
    def value_and_grad(x):
        return np.array([float(sub.objective(x[0]))]), np.asarray(sub.gradient(x[0]), dtype=float).reshape(x.shape)

    def project(x):
        return np.asarray(sub.feasible_projector(x[0]), dtype=float).reshape(x.shape)

    return value_and_grad, project


def solve_subproblem(sub: ScenarioSubproblem, budget: SolverBudget = SolverBudget(),
                     extra_starts=()) -> np.ndarray:
    """Risk-neutral subproblem for one scenario; returns the ``(T, n)`` minimiser."""
    vg, proj = _wrap_single(sub)
    starts = [np.asarray(s, dtype=float).reshape((1,) + sub.x_anchor.shape) for s in extra_starts]
    x, _, _ = solve_batch(vg, proj, sub.lambda_s[None], sub.x_anchor[None], sub.penalty_nu, budget,
                          convex=sub.convex, extra_starts=starts)
    return x[0]


def solve_subproblem_cvar(sub: ScenarioSubproblem, budget: SolverBudget = SolverBudget(),
                          extra_starts=()) -> tuple[np.ndarray, float]:
    """CVaR-augmented subproblem for one scenario; returns ``(x_hat, y_hat)``."""
    if sub.cvar is None:
        raise ValueError("subproblem has no CVaR block")
    vg, proj = _wrap_single(sub)
    cv = (sub.cvar.alpha, np.array([sub.cvar.y_anchor]), np.array([sub.cvar.u_dual]))
    starts = [np.asarray(s, dtype=float).reshape((1,) + sub.x_anchor.shape) for s in extra_starts]
    x, y, _ = solve_batch(vg, proj, sub.lambda_s[None], sub.x_anchor[None], sub.penalty_nu, budget,
                          convex=sub.convex, cvar=cv, extra_starts=starts)
    return x[0], float(y[0])
