"""Liquidity-constrained portfolio allocation.

Instrument 0 is a zero-interest cash account; the remaining instruments are
risky with log-normal gross returns.  A cumulative liquidity demand must be
covered by cash at every step: ``W_t * x_t[0] >= xi_t``.  Demand only floors
the cash allocation, it never leaves the portfolio.

Tree layout: every node carries ``[xi, g_0, ..., g_{J-1}]``.  The root holds
the currently observed cumulative demand (its returns are unused); a node at
stage ``t >= 1`` holds the returns earned by the stage ``t - 1`` allocation and
the cumulative demand revealed on arrival.  The allocation at the last tree
stage therefore has no cost.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

import numpy as np

from ..problem import ProblemSpec
from ..projections import InfeasibleError, project_capped_simplex
from ..tree import ScenarioTree

CHOL_JITTER = 1e-12


class DataError(ValueError):
    pass


# -- models and state ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ReturnModel:
    """Log gross returns of the risky instruments ~ Normal(mean_log, cov_log)."""

    mean_log: np.ndarray
    cov_log: np.ndarray

    def __post_init__(self):
        m = np.atleast_1d(np.asarray(self.mean_log, dtype=float))
        c = np.atleast_2d(np.asarray(self.cov_log, dtype=float))
        if c.shape != (m.size, m.size):
            raise ValueError(f"cov_log must be {m.size}x{m.size}, got {c.shape}")
        if not np.allclose(c, c.T, atol=1e-12):
            raise ValueError("cov_log must be symmetric")
        object.__setattr__(self, "mean_log", m)
        object.__setattr__(self, "cov_log", c)

    @property
    def n_risky(self) -> int:
        return self.mean_log.size

    def to_dict(self):
        return {"mean_log": self.mean_log.tolist(), "cov_log": self.cov_log.tolist()}


@dataclass(frozen=True)
class LiquidityModel:
    mu_l: float = 0.025
    sigma_l: float = 0.01

    def __post_init__(self):
        if self.sigma_l < 0:
            raise ValueError("sigma_l must be >= 0")


@dataclass(frozen=True, eq=False)
class PortfolioState:
    """Observed state at a decision time.

    ``accumulated_liquidity`` is the demand realized before this step and
    ``demand`` the increment revealed now, so the cash floor is
    ``(accumulated_liquidity + demand) / wealth``.
    """

    wealth: float
    allocation: np.ndarray
    accumulated_liquidity: float = 0.0
    demand: float = 0.0
    last_returns: np.ndarray = None

    def __post_init__(self):
        a = np.asarray(self.allocation, dtype=float)
        object.__setattr__(self, "allocation", a)
        g = np.ones_like(a) if self.last_returns is None else np.asarray(self.last_returns, dtype=float)
        object.__setattr__(self, "last_returns", g)
        if not self.wealth > 0:
            raise ValueError(f"wealth must be positive, got {self.wealth}")
        if self.accumulated_liquidity < 0 or self.demand < 0:
            raise ValueError("liquidity demand must be nonnegative")

    @property
    def cumulative_demand(self) -> float:
        return self.accumulated_liquidity + self.demand

    @property
    def liquid_floor(self) -> float:
        return self.cumulative_demand / self.wealth

    def features(self) -> np.ndarray:
        return np.concatenate([self.allocation, self.last_returns, [self.liquid_floor]])

    def to_dict(self):
        return {
            "wealth": self.wealth,
            "allocation": self.allocation.tolist(),
            "accumulated_liquidity": self.accumulated_liquidity,
            "demand": self.demand,
            "last_returns": self.last_returns.tolist(),
        }


# -- estimation and sampling -----------------------------------------------------

def fit_lognormal(gross_returns) -> ReturnModel:
    """Mean and unbiased covariance of log gross returns (rows are steps)."""
    g = np.asarray(gross_returns, dtype=float)
    if g.ndim == 1:
        g = g[:, None]
    if g.shape[0] < 2:
        raise DataError("need at least 2 rows of returns")
    if not np.all(g > 0):
        r, c = np.argwhere(~(g > 0))[0]
        raise DataError(f"gross return at row {r}, column {c} is not positive")
    lg = np.log(g)
    return ReturnModel(lg.mean(axis=0), np.atleast_2d(np.cov(lg, rowvar=False, ddof=1)))


def _cholesky(cov: np.ndarray) -> np.ndarray:
    """Lower factor of ``cov``; zero-variance coordinates get zero rows."""
    n = cov.shape[0]
    Lf = np.zeros((n, n))
    active = np.flatnonzero(np.diag(cov) > 0)
    if active.size == 0:
        return Lf
    sub = cov[np.ix_(active, active)]
    try:
        ls = np.linalg.cholesky(sub)
    except np.linalg.LinAlgError:
        try:
            ls = np.linalg.cholesky(sub + CHOL_JITTER * np.eye(active.size))
        except np.linalg.LinAlgError:
            raise np.linalg.LinAlgError("covariance is not positive semidefinite (Cholesky failed after jitter)") from None
    Lf[np.ix_(active, active)] = ls
    return Lf


def draw_gross_returns(model: ReturnModel, shape: tuple, rng: np.random.Generator) -> np.ndarray:
    """``shape + (1 + n_risky,)`` gross returns with the cash column fixed at 1."""
    Lf = _cholesky(model.cov_log)
    z = rng.standard_normal(tuple(shape) + (model.n_risky,))
    risky = np.exp(model.mean_log + z @ Lf.T)
    return np.concatenate([np.ones(tuple(shape) + (1,)), risky], axis=-1)


def sample_price_scenarios(model: ReturnModel, n: int, horizon: int, seed) -> np.ndarray:
    """``(n, horizon, 1 + n_risky)`` gross returns, deterministic in ``seed``."""
    if n < 1 or horizon < 1:
        raise ValueError("n and horizon must be >= 1")
    return draw_gross_returns(model, (n, horizon), np.random.default_rng(seed))


def draw_demand_increments(model: LiquidityModel, shape: tuple, rng: np.random.Generator) -> np.ndarray:
    return np.maximum(rng.normal(model.mu_l, model.sigma_l, size=shape), 0.0)


def sample_liquidity(model: LiquidityModel, n: int, horizon: int, seed, L0: float = 0.0) -> np.ndarray:
    """``(n, horizon)`` cumulative demand ``L0 + sum of the first t increments``."""
    if n < 1 or horizon < 1:
        raise ValueError("n and horizon must be >= 1")
    inc = draw_demand_increments(model, (n, horizon), np.random.default_rng(seed))
    return L0 + np.cumsum(inc, axis=1)


# -- dynamics, feasibility, metrics ---------------------------------------------

def wealth_transition(W: float, x, gross) -> float:
    return float(W * np.dot(np.asarray(x, dtype=float), np.asarray(gross, dtype=float)))


def _floor_bounds(floor, J):
    floor = np.asarray(floor, dtype=float)
    lower = np.zeros(floor.shape + (J,))
    lower[..., 0] = floor
    return lower


def covering_floor(xi, W):
    """Smallest float fraction ``f >= xi / W`` with ``W * f >= xi`` in floating point."""
    xi = np.asarray(xi, dtype=float)
    f = xi / W
    short = W * f < xi
    while np.any(short):
        f = np.where(short, np.nextafter(f, np.inf), f)
        short = W * f < xi
    return f


def project_portfolio_feasible(x, liquid_floor) -> np.ndarray:
    """Euclidean projection onto the simplex with ``x[0] >= liquid_floor``."""
    x = np.asarray(x, dtype=float)
    floor = np.asarray(liquid_floor, dtype=float)
    if np.any(floor > 1.0 + 1e-12):
        raise InfeasibleError(f"liquidity floor {float(np.max(floor)):.6g} exceeds total wealth")
    return project_capped_simplex(x, _floor_bounds(np.clip(floor, 0.0, 1.0), x.shape[-1]), 1.0)


def liquidity_residual(wealth, allocation, cumulative_demand) -> float:
    """``W * x[0] - xi``; negative means the demand is not covered."""
    return float(wealth * np.asarray(allocation)[0] - cumulative_demand)


def compute_metrics(wealth_series, periods_per_year: int = 252) -> dict:
    """Annualized return, Sharpe (zero risk-free rate), volatility and maximum drawdown."""
    w = np.asarray(wealth_series, dtype=float)
    if w.ndim != 1 or w.size < 2:
        raise ValueError("wealth series needs at least 2 points")
    if not np.all(w > 0):
        raise ValueError("wealth series must be positive")
    P = periods_per_year
    r = w[1:] / w[:-1] - 1.0
    sd = float(r.std())
    with np.errstate(over="ignore"):  # short explosive series annualize to inf
        ann = float((w[-1] / w[0]) ** (P / (w.size - 1)) - 1.0)
    peak = np.maximum.accumulate(w)
    mdd = float(np.max((peak - w) / peak))
    zero_var = sd == 0.0
    sharpe = 0.0 if zero_var else float(r.mean() / sd * math.sqrt(P))
    return {"returns": ann, "sharpe": sharpe, "volatility": sd * math.sqrt(P), "mdd": mdd,
            "sharpe_undefined": zero_var}


def ucrp_step(J: int) -> np.ndarray:
    if J < 1:
        raise ValueError("J must be >= 1")
    return np.full(J, 1.0 / J)


def load_prices_csv(path):
    """Read ``date,ticker1,...`` prices; returns ``(gross_returns, tickers, dates)``.

    Row numbers in errors count the header as row 1.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if len(header) < 2 or header[0].lower() != "date":
        raise DataError(f"{path}: header must be date,ticker1,...")
    tickers = header[1:]
    dates, prices = [], []
    for i, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataError(f"{path}: row {i} has {len(row)} fields, expected {len(header)}")
        try:
            d = date.fromisoformat(row[0].strip())
        except ValueError:
            raise DataError(f"{path}: row {i}: bad date {row[0]!r}") from None
        if dates and d <= dates[-1]:
            raise DataError(f"{path}: row {i}: date {d} is not after {dates[-1]} (dates must be strictly increasing)")
        vals = []
        for j, cell in enumerate(row[1:]):
            cell = cell.strip()
            if not cell:
                raise DataError(f"{path}: row {i}: missing value for {tickers[j]}")
            try:
                v = float(cell)
            except ValueError:
                raise DataError(f"{path}: row {i}: {tickers[j]} value {cell!r} is not a number") from None
            if not (math.isfinite(v) and v > 0):
                raise DataError(f"{path}: row {i}: {tickers[j]} price must be positive, got {cell}")
            vals.append(v)
        dates.append(d)
        prices.append(vals)
    if len(prices) < 2:
        raise DataError(f"{path}: need at least 2 price rows")
    p = np.array(prices)
    return p[1:] / p[:-1], tickers, dates


def write_prices_csv(path, prices, tickers, start=date(2020, 1, 1)):
    """Write a price matrix with consecutive daily dates from ``start``."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", *tickers])
        for k, row in enumerate(np.atleast_2d(prices)):
            w.writerow([date.fromordinal(start.toordinal() + k).isoformat(), *(repr(float(v)) for v in row)])


# -- optimization problem ----------------------------------------------------------

class PortfolioProblem(ProblemSpec):
    """Scenario cost: negative discounted log growth (or wealth growth in linear mode).

    Lookahead floors are scaled by the wealth at the root rather than the
    path wealth, which keeps every stage's feasible set a fixed capped simplex.
    The stage-0 floor uses the observed wealth and is exact.
    """

    def __init__(self, state: PortfolioState, gamma: float = 0.99, objective_mode: str = "log"):
        if objective_mode not in ("log", "linear"):
            raise ValueError(f"objective_mode must be 'log' or 'linear', got {objective_mode!r}")
        self.state = state
        self.gamma = gamma
        self.mode = objective_mode
        self.action_dim = state.allocation.size
        if state.liquid_floor > 1.0 + 1e-12:
            raise InfeasibleError(f"liquidity demand {state.cumulative_demand:.6g} exceeds wealth {state.wealth:.6g}")

    def _returns(self, tree):
        pd = tree.path_data
        g = np.zeros(tree.shape)
        g[:, :-1] = pd[:, 1:, 1:]
        disc = self.gamma ** np.arange(tree.n_stages)
        disc[-1] = 0.0
        return g, disc

    def objective(self, x, tree):
        g, disc = self._returns(tree)
        growth = np.einsum("stj,stj->st", x, g)
        if self.mode == "linear":
            return -(growth * disc).sum(axis=1)
        with np.errstate(divide="ignore"):
            lg = np.where(disc > 0, np.log(np.where(disc > 0, growth, 1.0)), 0.0)
        return -(lg * disc).sum(axis=1)

    def gradient(self, x, tree):
        g, disc = self._returns(tree)
        if self.mode == "linear":
            return -g * disc[None, :, None]
        growth = np.einsum("stj,stj->st", x, g)
        safe = np.where(disc > 0, growth, 1.0)
        return -g * (disc / safe)[:, :, None]

    def floors(self, tree):
        return np.minimum(covering_floor(tree.path_data[:, :, 0], self.state.wealth), 1.0)

    def project(self, x, tree):
        return project_capped_simplex(x, _floor_bounds(self.floors(tree), self.action_dim), 1.0)

    def center(self, tree):
        return self.project(np.full(tree.shape, 1.0 / self.action_dim), tree)

    def transition(self, state: PortfolioState, action, outcome):
        xi, g = float(outcome[0]), np.asarray(outcome[1:], dtype=float)
        L = state.cumulative_demand
        return PortfolioState(wealth_transition(state.wealth, action, g), np.asarray(action, dtype=float),
                              L, max(xi - L, 0.0), g)


class PortfolioDomain:
    """Samples lookahead trees and builds problems from a return and liquidity model."""

    name = "portfolio"

    def __init__(self, returns: ReturnModel, liquidity: LiquidityModel = LiquidityModel(),
                 objective_mode: str = "log"):
        self.returns = returns
        self.liquidity = liquidity
        self.objective_mode = objective_mode

    @property
    def action_dim(self):
        return 1 + self.returns.n_risky

    def sample_tree(self, state: PortfolioState, n_scenarios: int, lookahead: int, rng) -> ScenarioTree:
        """Fan of ``n_scenarios`` independent paths with ``lookahead`` costed stages."""
        J = self.action_dim
        g = draw_gross_returns(self.returns, (n_scenarios, lookahead), rng)
        inc = draw_demand_increments(self.liquidity, (n_scenarios, lookahead), rng)
        xi = state.cumulative_demand + np.cumsum(inc, axis=1)
        leaf = np.concatenate([xi[:, :, None], g], axis=2)
        root = np.concatenate([[state.cumulative_demand], np.ones(J)])
        return ScenarioTree.fan(np.full(n_scenarios, 1.0 / n_scenarios), lookahead + 1, J, root, leaf)

    def problem(self, state, gamma):
        return PortfolioProblem(state, gamma, self.objective_mode)


class PortfolioEnv:
    """Market simulator with cumulative liquidity demand.

    Returns come from ``gross_returns`` rows when given, else are drawn from
    ``returns``.  With ``episode_length`` the account resets to wealth 1 in
    cash with no accumulated demand every that many steps, so independent test
    periods can be chained into one run.
    """

    def __init__(self, J: int, liquidity: LiquidityModel, seed: int, returns: ReturnModel | None = None,
                 gross_returns=None, episode_length: int | None = None, initial_wealth: float = 1.0):
        if returns is None and gross_returns is None:
            raise ValueError("need a return model or a gross-return series")
        self.J = J
        self.returns = returns
        self.series = None if gross_returns is None else np.asarray(gross_returns, dtype=float)
        if self.series is not None and self.series.shape[1] != J - 1:
            raise ValueError(f"return series has {self.series.shape[1]} risky columns, expected {J - 1}")
        self.liquidity = liquidity
        self.episode_length = episode_length
        self.initial_wealth = initial_wealth
        self.rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
        self.t = 0
        self._reset()

    def _reset(self):
        cash = np.zeros(self.J)
        cash[0] = 1.0
        self.state = PortfolioState(self.initial_wealth, cash, 0.0, float(draw_demand_increments(self.liquidity, (), self.rng)))

    def observe(self) -> PortfolioState:
        return self.state

    def _gross(self):
        if self.series is not None:
            if self.t >= self.series.shape[0]:
                raise IndexError(f"return series exhausted after {self.series.shape[0]} steps")
            return np.concatenate([[1.0], self.series[self.t]])
        return draw_gross_returns(self.returns, (), self.rng)

    def step(self, action) -> dict:
        s = self.state
        a = np.asarray(action, dtype=float)
        g = self._gross()
        xi = s.cumulative_demand
        resid = liquidity_residual(s.wealth, a, xi)
        W1 = wealth_transition(s.wealth, a, g)
        out = {"gross": g.tolist(), "cumulative_demand": xi, "wealth_before": s.wealth, "wealth_after": W1,
               "liquid_amount": float(s.wealth * a[0]), "liquidity_residual": resid,
               "violation": max(0.0, -resid), "reward": math.log(W1 / s.wealth)}
        self.t += 1
        if self.episode_length and self.t % self.episode_length == 0:
            self._reset()
            out["episode_end"] = True
        else:
            inc = float(draw_demand_increments(self.liquidity, (), self.rng))
            self.state = PortfolioState(W1, a, xi, inc, g)
            out["episode_end"] = False
        return out
