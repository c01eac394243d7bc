"""Euclidean projections onto (capped) simplices, batched over leading axes."""

from __future__ import annotations

import numpy as np


class InfeasibleError(ValueError):
    """The feasible set is empty."""


def project_capped_simplex(v, lower, upper, mass=1.0) -> np.ndarray:
    """Project each row of ``v`` onto ``{x : sum(x) = mass, lower <= x <= upper}``.

    The solution is ``clip(v - theta, lower, upper)`` for the scalar ``theta``
    that makes the coordinates sum to ``mass``.  The sum is piecewise linear and
    nonincreasing in ``theta`` with breakpoints at ``v - lower`` and
    ``v - upper``; ``theta`` is found exactly by locating the bracketing
    breakpoints and interpolating.
    """
    v = np.asarray(v, dtype=float)
    lo = np.broadcast_to(np.asarray(lower, dtype=float), v.shape)
    hi = np.broadcast_to(np.asarray(upper, dtype=float), v.shape)
    mass = np.broadcast_to(np.asarray(mass, dtype=float), v.shape[:-1])
    if np.any(lo > hi):
        raise InfeasibleError("lower bound exceeds upper bound")
    slack = 1e-12 * np.maximum(1.0, np.abs(mass))
    if np.any(lo.sum(-1) > mass + slack) or np.any(hi.sum(-1) < mass - slack):
        raise InfeasibleError("bounds admit no point with the required total")

    lead = v.shape[:-1]
    n = v.shape[-1]
    V = v.reshape(-1, n)
    L = lo.reshape(-1, n)
    U = hi.reshape(-1, n)
    M = mass.reshape(-1)

    bps = np.sort(np.concatenate([V - L, V - U], axis=1), axis=1)  # (R, 2n)
    sums = np.clip(V[:, None, :] - bps[:, :, None], L[:, None, :], U[:, None, :]).sum(-1)  # nonincreasing
    # first breakpoint whose sum drops to or below the target
    k = np.argmax(sums <= M[:, None], axis=1)
    rows = np.arange(V.shape[0])
    k = np.maximum(k, 1)
    t0, t1 = bps[rows, k - 1], bps[rows, k]
    s0, s1 = sums[rows, k - 1], sums[rows, k]
    denom = s0 - s1
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(denom > 0, (s0 - M) / denom, 0.0)
    theta = t0 + np.clip(frac, 0.0, 1.0) * (t1 - t0)
    out = np.clip(V - theta[:, None], L, U)
    # feasible rows are returned untouched; the interpolated theta is only zero up to rounding
    inside = np.all((V >= L) & (V <= U), axis=1) & (np.abs(V.sum(axis=1) - M) <= 4 * n * np.spacing(np.maximum(1.0, np.abs(M))))
    out[inside] = V[inside]
    return out.reshape(lead + (n,))


def project_simplex(v, mass=1.0) -> np.ndarray:
    """Project rows of ``v`` onto ``{x >= 0, sum(x) = mass}``."""
    v = np.asarray(v, dtype=float)
    mass = np.asarray(mass, dtype=float)
    return project_capped_simplex(v, 0.0, np.broadcast_to(mass[..., None], v.shape), mass)


def on_simplex(x, tol: float = 1e-12) -> bool:
    x = np.asarray(x, dtype=float)
    return bool(np.all(x >= -tol) and np.all(np.abs(x.sum(-1) - 1.0) <= tol))
