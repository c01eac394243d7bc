"""Small analytic problems: per-scenario quadratics and absolute-value costs.

Used as oracle instances (the extensive form is easy to brute force) and by
the ``toy`` CLI domain.
"""

from __future__ import annotations

import numpy as np

from ..problem import ProblemSpec
from ..projections import project_capped_simplex


class _Stateless:
    # toy objectives carry no state; experts see the same (empty) state at every node
    def transition(self, state, action, outcome):
        return state


class QuadraticProblem(_Stateless, ProblemSpec):
    """``f_s(x) = 0.5 * sum_t (x_t - c_st)' H_st (x_t - c_st)`` with diagonal ``H``.

    Parameters
    ----------
    centers : array (N, T, n)
    curvatures : array (N, T, n), optional
        Diagonal Hessian entries, default 2 so ``f = sum (x - c)^2``.
    lower, upper : float or array (n,), optional
        Box constraint on every stage's action.  Ignored when ``simplex``.
    simplex : bool
        Constrain every stage's action to the probability simplex instead.
    """

    def __init__(self, centers, curvatures=None, lower=-np.inf, upper=np.inf, simplex=False):
        self.centers = np.asarray(centers, dtype=float)
        if self.centers.ndim != 3:
            raise ValueError("centers must have shape (N, T, n)")
        self.curvatures = (np.full(self.centers.shape, 2.0) if curvatures is None
                           else np.broadcast_to(np.asarray(curvatures, dtype=float), self.centers.shape))
        self.action_dim = self.centers.shape[2]
        self.lower = lower
        self.upper = upper
        self.simplex = simplex

    def objective(self, x, tree):
        d = x - self.centers
        return 0.5 * (self.curvatures * d * d).reshape(x.shape[0], -1).sum(axis=1)

    def gradient(self, x, tree):
        return self.curvatures * (x - self.centers)

    def project(self, x, tree):
        if self.simplex:
            return project_capped_simplex(x, 0.0, 1.0, 1.0)
        return np.clip(x, self.lower, self.upper)


class AbsoluteProblem(_Stateless, ProblemSpec):
    """``f_s(x) = sum |x - c_s| * w_s`` on a box: piecewise linear, Lipschitz."""

    smooth = False

    def __init__(self, centers, weights=1.0, lower=-np.inf, upper=np.inf):
        self.centers = np.asarray(centers, dtype=float)
        self.weights = np.broadcast_to(np.asarray(weights, dtype=float), self.centers.shape)
        self.action_dim = self.centers.shape[2]
        self.lower = lower
        self.upper = upper

    @property
    def lipschitz(self) -> float:
        # Euclidean Lipschitz constant of one scenario's cost, worst case over scenarios
        return float(np.sqrt((self.weights ** 2).reshape(self.weights.shape[0], -1).sum(axis=1)).max())

    def objective(self, x, tree):
        return (self.weights * np.abs(x - self.centers)).reshape(x.shape[0], -1).sum(axis=1)

    def gradient(self, x, tree):
        return self.weights * np.sign(x - self.centers)

    def project(self, x, tree):
        return np.clip(x, self.lower, self.upper)
