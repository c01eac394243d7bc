"""Expert policies that seed and guide the hedging iterations.

An expert maps a domain state to an action on the simplex.  The affine
expert stands in for any externally trained policy: export its weights to the
JSON file format read by :func:`load_affine_expert`.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .projections import project_simplex

log = logging.getLogger(__name__)


class ExpertFileError(ValueError):
    pass


class Expert:
    kind: str = "base"
    action_dim: int

    def act(self, state) -> np.ndarray:
        raise NotImplementedError

    def explain(self, state) -> dict:
        return {}


@dataclass(frozen=True)
class UniformExpert(Expert):
    action_dim: int
    kind = "uniform"

    def act(self, state):
        return np.full(self.action_dim, 1.0 / self.action_dim)


@dataclass(frozen=True, eq=False)
class FixedWeightsExpert(Expert):
    weights: np.ndarray
    kind = "fixed_weights"

    def __post_init__(self):
        w = project_simplex(np.asarray(self.weights, dtype=float))
        object.__setattr__(self, "weights", w)

    @property
    def action_dim(self):
        return self.weights.size

    def act(self, state):
        return self.weights.copy()


@dataclass(frozen=True, eq=False)
class AffineExpert(Expert):
    """``project_simplex(weights @ state.features() + bias)``."""

    weights: np.ndarray
    bias: np.ndarray
    kind = "affine"

    def __post_init__(self):
        W = np.atleast_2d(np.asarray(self.weights, dtype=float))
        b = np.asarray(self.bias, dtype=float).ravel()
        if W.shape[0] != b.size:
            raise ValueError(f"weights have {W.shape[0]} rows but bias has {b.size} entries")
        object.__setattr__(self, "weights", W)
        object.__setattr__(self, "bias", b)

    @property
    def action_dim(self):
        return self.bias.size

    @property
    def feature_dim(self):
        return self.weights.shape[1]

    def act(self, state):
        phi = np.asarray(state.features(), dtype=float)
        if phi.size != self.feature_dim:
            raise ValueError(f"state has {phi.size} features, expert expects {self.feature_dim}")
        return project_simplex(self.weights @ phi + self.bias)


@dataclass(frozen=True, eq=False)
class ReserveExpert(Expert):
    """Keep at least ``(L + mu_l + 3 sigma_l) / W`` in the liquid asset (index 0).

    The remaining coordinates of the base action are rescaled to fill the
    rest of the simplex.
    """

    base: Expert
    mu_l: float
    sigma_l: float
    kind = "reserve_wrapped"

    @property
    def action_dim(self):
        return self.base.action_dim

    def reserve(self, state) -> float:
        return (state.accumulated_liquidity + self.mu_l + 3.0 * self.sigma_l) / state.wealth

    def act(self, state):
        x = np.asarray(self.base.act(state), dtype=float)
        rho = self.reserve(state)
        if rho > 1.0:
            log.warning("wealth %.4g below reserve; allocating everything to cash", state.wealth)
        return apply_reserve(x, rho)

    def explain(self, state):
        rho = self.reserve(state)
        return {"reserve": min(max(rho, 0.0), 1.0), "reserve_shortfall": rho > 1.0}


def apply_reserve(x, rho: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    rho = min(max(float(rho), 0.0), 1.0)
    cash = max(x[0], rho)
    out = np.empty_like(x)
    out[0] = cash
    rest = x[1:]
    mass = rest.sum()
    if mass > 0:
        out[1:] = rest * ((1.0 - cash) / mass)
    else:
        out[1:] = (1.0 - cash) / max(rest.size, 1)
    return out


def reserve_heuristic_wrap(base: Expert, mu_l: float, sigma_l: float) -> ReserveExpert:
    return ReserveExpert(base, float(mu_l), float(sigma_l))


def query_expert(expert: Expert, state, tree, problem) -> np.ndarray:
    """Roll ``expert`` through the tree and return its policy mapping ``(N, T, n)``.

    Each node's state comes from its parent's state, the parent's action and
    the node's exogenous data, so the mapping is nonanticipative by
    construction; it is projected only if it is not already exactly in that space.
    """
    if expert.action_dim != tree.action_dim:
        raise ValueError(f"expert acts in dimension {expert.action_dim}, tree expects {tree.action_dim}")
    actions = np.empty((len(tree.nodes), tree.action_dim))
    states = [None] * len(tree.nodes)
    data = tree.node_data if tree.has_data else None
    for k in tree.stage_order():
        par = tree.parent_index(k)
        if par is None:
            states[k] = state
        else:
            states[k] = problem.transition(states[par], actions[par], None if data is None else data[k])
        actions[k] = expert.act(states[k])
    x = actions[tree.paths]
    # averaging identical values can still round, so leave an exact mapping alone
    if tree.nonanticipativity_residual(x) == 0.0:
        return x
    return tree.project_nonanticipative(x)


# -- affine policy files -------------------------------------------------------

def _finite_array(raw, name, shape):
    arr = np.asarray(raw, dtype=float)
    if arr.shape != shape:
        raise ExpertFileError(f"{name}: expected shape {shape}, got {arr.shape}")
    bad = np.argwhere(~np.isfinite(arr))
    if bad.size:
        pos = "".join(f"[{int(i)}]" for i in bad[0])
        raise ExpertFileError(f"{name}{pos} is not finite ({arr[tuple(bad[0])]!r})")
    return arr


def load_affine_expert(path) -> AffineExpert:
    """Read ``{feature_dim, action_dim, weights, bias}`` JSON; weights are row-major."""
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ExpertFileError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    for key in ("feature_dim", "action_dim", "weights", "bias"):
        if key not in doc:
            raise ExpertFileError(f"{path}: missing field {key!r}")
    extra = set(doc) - {"feature_dim", "action_dim", "weights", "bias"}
    if extra:
        raise ExpertFileError(f"{path}: unknown field {sorted(extra)[0]!r}")
    fd, ad = doc["feature_dim"], doc["action_dim"]
    if not (isinstance(fd, int) and isinstance(ad, int) and fd > 0 and ad > 0):
        raise ExpertFileError(f"{path}: feature_dim and action_dim must be positive integers")
    raw_w = doc["weights"]
    try:
        if raw_w and not isinstance(raw_w[0], list):
            if len(raw_w) != ad * fd:
                raise ExpertFileError(f"weights: expected {ad * fd} entries, got {len(raw_w)}")
            raw_w = [raw_w[r * fd:(r + 1) * fd] for r in range(ad)]
        W = _finite_array(raw_w, "weights", (ad, fd))
        b = _finite_array(doc["bias"], "bias", (ad,))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ExpertFileError):
            raise
        raise ExpertFileError(f"{path}: {exc}") from None
    return AffineExpert(W, b)


def save_affine_expert(expert: AffineExpert, path) -> None:
    doc = {
        "feature_dim": expert.feature_dim,
        "action_dim": expert.action_dim,
        "weights": expert.weights.tolist(),
        "bias": expert.bias.tolist(),
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def expert_from_config(cfg: dict, action_dim: int) -> Expert:
    """Build an expert from a ``{"kind": ...}`` mapping (see the CLI config)."""
    kind = cfg.get("kind", "uniform")
    if kind == "uniform":
        ex: Expert = UniformExpert(action_dim)
    elif kind == "fixed_weights":
        ex = FixedWeightsExpert(np.asarray(cfg["weights"], dtype=float))
    elif kind == "affine":
        if cfg.get("path"):
            ex = load_affine_expert(cfg["path"])
        else:
            ex = AffineExpert(np.asarray(cfg["weights"], dtype=float), np.asarray(cfg["bias"], dtype=float))
    else:
        raise ValueError(f"unknown expert kind {kind!r}")
    if cfg.get("reserve"):
        ex = reserve_heuristic_wrap(ex, cfg.get("mu_l", 0.025), cfg.get("sigma_l", 0.01))
    if ex.action_dim != action_dim:
        raise ValueError(f"expert action_dim {ex.action_dim} does not match domain action_dim {action_dim}")
    return ex
