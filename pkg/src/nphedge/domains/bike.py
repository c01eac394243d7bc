"""Online bike repositioning across a small set of stations.

Actions are fractions of the fleet placed at each station, bounded per
station by ``lower / N <= x <= upper / N``.  Stage reward at each station is

    -L * (1 + log(1 + L)) - R * sin(pi * R)

with ``L`` the unmet demand in bikes and ``R`` the repositioned fraction
``|x - prev|``.  The repositioning term is concave near zero, so subproblems
are nonconvex and only local solutions are sought.

Tree layout: the node at stage ``t >= 1`` carries the demand of the period
served by the stage ``t - 1`` allocation; the root carries the demand of the
period just finished (unused by the objective).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..problem import ProblemSpec
from ..projections import InfeasibleError, project_capped_simplex
from ..tree import ScenarioTree
from .portfolio import _cholesky


class InstanceError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DemandModel:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        m = np.atleast_1d(np.asarray(self.mean, dtype=float))
        c = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if c.shape != (m.size, m.size):
            raise ValueError(f"demand cov must be {m.size}x{m.size}, got {c.shape}")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "cov", c)


@dataclass(frozen=True, eq=False)
class BikeInstance:
    stations: int
    bikes: int
    lower: np.ndarray
    upper: np.ndarray
    demand: DemandModel

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        J = self.stations
        if lo.shape != (J,) or hi.shape != (J,):
            raise InstanceError(f"lower and upper need {J} entries")
        if self.demand.mean.size != J:
            raise InstanceError(f"demand_mean needs {J} entries")
        bad = np.flatnonzero(lo > hi)
        if bad.size:
            raise InstanceError(f"station {int(bad[0])}: lower {lo[bad[0]]} exceeds upper {hi[bad[0]]}")
        if not lo.sum() <= self.bikes <= hi.sum():
            raise InstanceError(f"{self.bikes} bikes cannot satisfy station bounds (sum lower "
                                f"{lo.sum():g}, sum upper {hi.sum():g})")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def lower_frac(self):
        return self.lower / self.bikes

    @property
    def upper_frac(self):
        return self.upper / self.bikes

    def to_dict(self):
        return {"stations": self.stations, "bikes": self.bikes, "lower": self.lower.tolist(),
                "upper": self.upper.tolist(), "demand_mean": self.demand.mean.tolist(),
                "demand_cov": self.demand.cov.tolist()}


INSTANCE_FIELDS = ("stations", "bikes", "lower", "upper", "demand_mean", "demand_cov")


def instance_from_dict(doc: dict, where: str = "instance") -> BikeInstance:
    for k in INSTANCE_FIELDS:
        if k not in doc:
            raise InstanceError(f"{where}: missing field {k!r}")
    extra = sorted(set(doc) - set(INSTANCE_FIELDS))
    if extra:
        raise InstanceError(f"{where}: unknown field {extra[0]!r}")
    J, N = doc["stations"], doc["bikes"]
    if not (isinstance(J, int) and isinstance(N, int) and J >= 1 and N >= 1):
        raise InstanceError(f"{where}: stations and bikes must be positive integers")
    try:
        dm = DemandModel(doc["demand_mean"], doc["demand_cov"])
        return BikeInstance(J, N, doc["lower"], doc["upper"], dm)
    except InstanceError as exc:
        raise InstanceError(f"{where}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise InstanceError(f"{where}: {exc}") from None


def load_instance(path) -> BikeInstance:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InstanceError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return instance_from_dict(doc, str(path))


@dataclass(frozen=True, eq=False)
class BikeState:
    allocation: np.ndarray
    bikes: int
    lower: np.ndarray
    upper: np.ndarray
    last_demand: np.ndarray = None

    def __post_init__(self):
        a = np.asarray(self.allocation, dtype=float)
        object.__setattr__(self, "allocation", a)
        d = np.zeros_like(a) if self.last_demand is None else np.asarray(self.last_demand, dtype=float)
        object.__setattr__(self, "last_demand", d)

    def features(self):
        return np.concatenate([self.allocation, self.last_demand / self.bikes])

    def to_dict(self):
        return {"allocation": self.allocation.tolist(), "bikes": self.bikes,
                "last_demand": self.last_demand.tolist()}


# -- evaluators ------------------------------------------------------------------

def _station_terms(x, prev, demand, N):
    L = np.maximum(0.0, demand - N * x)
    R = np.abs(x - prev)
    return L, R


def bike_stage_reward(x, prev, demand, N) -> float:
    """Sum over stations of ``-L (1 + log(1 + L)) - R sin(pi R)``."""
    x = np.asarray(x, dtype=float)
    prev = np.asarray(prev, dtype=float)
    demand = np.asarray(demand, dtype=float)
    if not (x.shape == prev.shape == demand.shape):
        raise ValueError(f"dimension mismatch: x {x.shape}, prev {prev.shape}, demand {demand.shape}")
    L, R = _station_terms(x, prev, demand, N)
    return float(-(L * (1.0 + np.log1p(L))).sum() - (R * np.sin(np.pi * R)).sum())


def capacity_violation(x, lower, upper, N) -> float:
    """Bikes outside the station bounds, summed over stations."""
    n = N * np.asarray(x, dtype=float)
    return float(np.maximum(0.0, lower - n).sum() + np.maximum(0.0, n - upper).sum())


def fraction_bounds(lower, upper, N):
    """Fraction bounds whose rescaling by ``N`` stays inside the bike-count bounds in floating point."""
    lo = np.asarray(lower, dtype=float) / N
    hi = np.asarray(upper, dtype=float) / N
    while np.any(N * lo < lower):
        lo = np.where(N * lo < lower, np.nextafter(lo, np.inf), lo)
    while np.any(N * hi > upper):
        hi = np.where(N * hi > upper, np.nextafter(hi, -np.inf), hi)
    return lo, hi


def project_station_bounds(x, lower, upper, N) -> np.ndarray:
    lo, hi = fraction_bounds(lower, upper, N)
    return project_capped_simplex(x, lo, hi, 1.0)


def sample_demand(model: DemandModel, n: int, horizon: int, seed) -> np.ndarray:
    """``(n, horizon, J)`` demand draws clamped at 0."""
    if n < 1 or horizon < 1:
        raise ValueError("n and horizon must be >= 1")
    return draw_demand(model, (n, horizon), np.random.default_rng(seed))


def draw_demand(model: DemandModel, shape, rng) -> np.ndarray:
    Lf = _cholesky(model.cov)
    z = rng.standard_normal(tuple(shape) + (model.mean.size,))
    return np.maximum(model.mean + z @ Lf.T, 0.0)


def after_demand(x, demand, N) -> np.ndarray:
    """Fractions of the fleet left at each station after serving ``demand``."""
    held = N * np.asarray(x, dtype=float)
    left = held - np.minimum(held, demand)
    total = left.sum()
    if total <= 0:
        return np.full(held.size, 1.0 / held.size)
    return left / total


# -- optimization problem -----------------------------------------------------------

class BikeProblem(ProblemSpec):
    """Negative discounted reward over the lookahead.

    Within the lookahead the previous allocation of stage ``t`` is taken to
    be the stage ``t - 1`` action; the realized-trip shuffle is left to the
    simulator.
    """

    smooth = False
    convex = False

    def __init__(self, state: BikeState, gamma: float = 0.99):
        self.state = state
        self.gamma = gamma
        self.N = state.bikes
        self.action_dim = state.allocation.size
        self.lo, self.hi = fraction_bounds(state.lower, state.upper, self.N)
        if self.lo.sum() > 1 + 1e-12 or self.hi.sum() < 1 - 1e-12:
            raise InfeasibleError("station bounds admit no allocation of the fleet")

    def _parts(self, x, tree):
        T = tree.n_stages
        d = np.zeros(tree.shape)
        d[:, :-1] = tree.path_data[:, 1:, :]
        prev = np.empty_like(x)
        prev[:, 0] = self.state.allocation
        prev[:, 1:] = x[:, :-1]
        disc = self.gamma ** np.arange(T)
        disc[-1] = 0.0
        return d, prev, disc

    def objective(self, x, tree):
        d, prev, disc = self._parts(x, tree)
        L, R = _station_terms(x, prev, d, self.N)
        cost = L * (1.0 + np.log1p(L)) + R * np.sin(np.pi * R)
        return (cost.sum(axis=2) * disc).sum(axis=1)

    def gradient(self, x, tree):
        d, prev, disc = self._parts(x, tree)
        L, R = _station_terms(x, prev, d, self.N)
        w = disc[None, :, None]
        gL = np.where(L > 0, -self.N * (1.0 + np.log1p(L) + L / (1.0 + L)), 0.0)
        sR = (np.sin(np.pi * R) + np.pi * R * np.cos(np.pi * R)) * np.sign(x - prev)
        g = w * (gL + sR)
        # stage t's action is the previous allocation of stage t + 1
        g[:, :-1] -= w[:, 1:] * sR[:, 1:]
        return g

    def project(self, x, tree):
        return project_capped_simplex(x, self.lo, self.hi, 1.0)

    def transition(self, state: BikeState, action, outcome):
        dem = np.asarray(outcome, dtype=float)
        return BikeState(after_demand(action, dem, state.bikes), state.bikes, state.lower, state.upper, dem)


class BikeDomain:
    name = "bike"

    def __init__(self, instance: BikeInstance):
        self.instance = instance

    @property
    def action_dim(self):
        return self.instance.stations

    def sample_tree(self, state, n_scenarios, lookahead, rng):
        d = draw_demand(self.instance.demand, (n_scenarios, lookahead), rng)
        return ScenarioTree.fan(np.full(n_scenarios, 1.0 / n_scenarios), lookahead + 1,
                                self.action_dim, state.last_demand, d)

    def problem(self, state, gamma):
        return BikeProblem(state, gamma)


class BikeEnv:
    """Executes allocations against sampled demand and tracks capacity violations."""

    def __init__(self, instance: BikeInstance, seed: int, initial_allocation=None):
        self.instance = instance
        self.rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
        inst = instance
        a0 = (project_station_bounds(np.full(inst.stations, 1.0 / inst.stations), inst.lower, inst.upper, inst.bikes)
              if initial_allocation is None else np.asarray(initial_allocation, dtype=float))
        self.state = BikeState(a0, inst.bikes, inst.lower, inst.upper)

    def observe(self):
        return self.state

    def step(self, action) -> dict:
        inst = self.instance
        a = np.asarray(action, dtype=float)
        dem = draw_demand(inst.demand, (), self.rng)
        s = self.state
        reward = bike_stage_reward(a, s.allocation, dem, inst.bikes)
        viol = capacity_violation(a, inst.lower, inst.upper, inst.bikes)
        lo_res = inst.bikes * a - inst.lower
        hi_res = inst.upper - inst.bikes * a
        self.state = BikeState(after_demand(a, dem, inst.bikes), inst.bikes, inst.lower, inst.upper, dem)
        return {"demand": dem.tolist(), "reward": reward, "violation": viol,
                "capacity_residual": float(min(lo_res.min(), hi_res.min()))}
