"""Interface every domain implements for the hedging solvers."""

from __future__ import annotations

import numpy as np

from .tree import ScenarioTree


class ProblemSpec:
    """Batched scenario objective, constraint projector and transition model.

    All array methods receive the full policy mapping ``x`` of shape
    ``(N, T, n)`` for the scenarios of ``tree`` and work row-wise, so one call
    evaluates every scenario subproblem at once.  The objective is a cost
    (lower is better).

    Subclasses set ``smooth`` when the objective is differentiable (selects
    the gradient step rule) and ``convex`` when restarts are unnecessary.
    """

    action_dim: int
    smooth: bool = True
    convex: bool = True

    def objective(self, x: np.ndarray, tree: ScenarioTree) -> np.ndarray:
        raise NotImplementedError

    def gradient(self, x: np.ndarray, tree: ScenarioTree) -> np.ndarray:
        raise NotImplementedError

    def value_and_grad(self, x, tree):
        return self.objective(x, tree), self.gradient(x, tree)

    def project(self, x: np.ndarray, tree: ScenarioTree) -> np.ndarray:
        raise NotImplementedError

    def center(self, tree: ScenarioTree) -> np.ndarray:
        """A feasible interior-ish point, used as a restart location."""
        return self.project(np.full(tree.shape, 1.0 / self.action_dim), tree)

    def project_first_stage(self, action, tree: ScenarioTree) -> np.ndarray:
        """Project a single stage-0 action onto the (shared) stage-0 constraints."""
        x = np.broadcast_to(np.asarray(action, dtype=float), tree.shape).copy()
        return self.project(x, tree)[0, 0]

    def is_feasible(self, x, tree, tol: float = 1e-10) -> np.ndarray:
        """Per-scenario projector fixed-point test."""
        x = np.asarray(x, dtype=float)
        gap = np.abs(self.project(x, tree) - x).reshape(x.shape[0], -1).max(axis=1)
        return gap <= tol

    def transition(self, state, action, outcome):
        """Next state after taking ``action`` in ``state`` and observing node data ``outcome``."""
        raise NotImplementedError
