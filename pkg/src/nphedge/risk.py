"""CVaR on discrete distributions and the closed-form threshold update."""

from __future__ import annotations

import numpy as np


def _check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")
    return alpha


def _check_distribution(values, probs):
    z = np.asarray(values, dtype=float).ravel()
    if z.size == 0:
        raise ValueError("cvar of an empty sample")
    if probs is None:
        p = np.full(z.size, 1.0 / z.size)
    else:
        p = np.asarray(probs, dtype=float).ravel()
        if p.shape != z.shape:
            raise ValueError(f"{p.size} probabilities for {z.size} values")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValueError("probabilities must be finite and nonnegative")
        if abs(p.sum() - 1.0) > 1e-10:
            raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
    if not np.all(np.isfinite(z)):
        raise ValueError("values must be finite")
    return z, p


def cvar_threshold(values, probs=None, alpha: float = 0.0) -> tuple[float, float]:
    """Return ``(cvar, y)`` where ``y`` minimises ``y + E[max(0, Z - y)] / (1 - alpha)``.

    The objective is piecewise linear with breakpoints at the sample values, so
    scanning those is exact.  Ties go to the smallest minimising sample value.
    """
    alpha = _check_alpha(alpha)
    z, p = _check_distribution(values, probs)
    order = np.argsort(z, kind="stable")
    z, p = z[order], p[order]
    tail_p = np.cumsum(p[::-1])[::-1]
    tail_pz = np.cumsum((p * z)[::-1])[::-1]
    excess = np.maximum(tail_pz - z * tail_p, 0.0)
    g = z + excess / (1.0 - alpha)
    k = int(np.argmin(g))
    return float(g[k]), float(z[k])


def cvar(values, probs=None, alpha: float = 0.0) -> float:
    """Conditional value-at-risk of a discrete distribution (alpha=0 is the mean)."""
    return cvar_threshold(values, probs, alpha)[0]


def optimal_y_given_x(F, y_anchor, u_dual, penalty_nu, alpha):
    """Exact minimiser over ``y`` of

        y + max(0, F - y) / (1 - alpha) + u * y + (nu / 2) * (y - y_anchor)**2

    Vectorised over its first three arguments.  With ``c = 1 / (1 - alpha)``
    the right piece (``y >= F``) is minimised at ``a - (1 + u) / nu`` and the
    left piece (``y <= F``) at ``a - (1 + u - c) / nu``; whichever is valid
    wins, otherwise the kink ``y = F``.
    """
    alpha = _check_alpha(alpha)
    if not penalty_nu > 0:
        raise ValueError(f"penalty_nu must be positive, got {penalty_nu}")
    c = 1.0 / (1.0 - alpha)
    F = np.asarray(F, dtype=float)
    a = np.asarray(y_anchor, dtype=float)
    u = np.asarray(u_dual, dtype=float)
    y_right = a - (1.0 + u) / penalty_nu
    y_left = a - (1.0 + u - c) / penalty_nu
    y = np.where(F <= y_right, y_right, np.where(F >= y_left, y_left, F))
    return float(y) if y.ndim == 0 else y


def hinge_weight(F, y_anchor, u_dual, penalty_nu, alpha):
    """Derivative with respect to ``F`` of the y-minimised objective above.

    Lies in ``[0, 1 / (1 - alpha)]`` and is continuous in ``F``; it is the
    weight the x-step gives to the gradient of the scenario objective.
    """
    c = 1.0 / (1.0 - alpha)
    F = np.asarray(F, dtype=float)
    a = np.asarray(y_anchor, dtype=float)
    u = np.asarray(u_dual, dtype=float)
    y_right = a - (1.0 + u) / penalty_nu
    y_left = a - (1.0 + u - c) / penalty_nu
    mid = (1.0 + u) + penalty_nu * (F - a)
    return np.where(F <= y_right, 0.0, np.where(F >= y_left, c, mid))
