"""Run configuration: one JSON document, validated strictly.

Unknown keys are rejected so a typo cannot silently fall back to a default.
Relative file paths resolve against the directory holding the config file.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, ValidationInfo, field_validator, model_validator

from .controller import KappaSchedule, NPConfig
from .ph import PHConfig
from .subproblem import SolverBudget


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


def _existing_path(value, info: ValidationInfo):
    if value is None:
        return None
    base = (info.context or {}).get("base_dir", Path("."))
    p = Path(value)
    if not p.is_absolute():
        p = Path(base) / p
    if not p.is_file():
        raise ValueError(f"file not found: {p}")
    return str(p)


class PHSection(_Strict):
    penalty_nu: float = Field(1.0, gt=0)
    epsilon: float = Field(1e-4, gt=0)
    max_outer_iterations: int = Field(500, ge=1)
    alpha: Optional[float] = Field(None, ge=0, lt=1)
    adaptive_penalty: bool = False


class BudgetSection(_Strict):
    max_iterations: int = Field(200, ge=1)
    tolerance: float = Field(1e-8, ge=0)
    step_rule: Literal["auto", "gradient", "subgradient"] = "auto"
    restarts: int = Field(3, ge=1)


class KappaSection(_Strict):
    mode: Literal["imitation", "warm_start", "constant"] = "imitation"
    i_hat: int = Field(20, ge=1)
    constant_value: float = Field(0.0, ge=0, le=1)


class NPSection(_Strict):
    kappa: KappaSection = KappaSection()
    lookahead_T: int = Field(5, ge=1)
    n_scenarios: int = Field(20, ge=1)
    discount_gamma: float = Field(0.99, ge=0, le=1)


class ExpertSection(_Strict):
    kind: Literal["uniform", "fixed_weights", "affine"] = "uniform"
    weights: Optional[list] = None
    bias: Optional[list[float]] = None
    path: Optional[str] = None
    reserve: bool = False
    mu_l: Optional[float] = None
    sigma_l: Optional[float] = Field(None, ge=0)

    _path = field_validator("path")(_existing_path)

    @model_validator(mode="after")
    def _params(self):
        if self.kind == "fixed_weights" and self.weights is None:
            raise ValueError("fixed_weights expert needs 'weights'")
        if self.kind == "affine" and self.path is None and (self.weights is None or self.bias is None):
            raise ValueError("affine expert needs 'path' or both 'weights' and 'bias'")
        return self


class LiquiditySection(_Strict):
    mu_l: float = 0.025
    sigma_l: float = Field(0.01, ge=0)


class SyntheticReturns(_Strict):
    mean_log: list[float]
    cov_log: list[list[float]]


class PortfolioSection(_Strict):
    prices_csv: Optional[str] = None
    train_fraction: float = Field(0.5, gt=0, lt=1)
    synthetic: Optional[SyntheticReturns] = None
    liquidity: LiquiditySection = LiquiditySection()
    episode_length: Optional[int] = Field(None, ge=1)
    objective_mode: Literal["log", "linear"] = "log"
    initial_wealth: float = Field(1.0, gt=0)

    _prices = field_validator("prices_csv")(_existing_path)

    @model_validator(mode="after")
    def _source(self):
        if (self.prices_csv is None) == (self.synthetic is None):
            raise ValueError("give exactly one of 'prices_csv' or 'synthetic'")
        return self


class BikeSection(_Strict):
    instance: Optional[str] = None
    inline: Optional[dict] = None
    initial_allocation: Optional[list[float]] = None

    _instance = field_validator("instance")(_existing_path)

    @model_validator(mode="after")
    def _source(self):
        if (self.instance is None) == (self.inline is None):
            raise ValueError("give exactly one of 'instance' or 'inline'")
        return self


class ToySection(_Strict):
    objective: Literal["quadratic", "absolute"] = "quadratic"
    probs: list[float]
    n_stages: int = Field(2, ge=1)
    centers: list
    curvatures: Optional[list] = None
    weights: Optional[list] = None
    lower: Optional[Union[float, list[float]]] = None
    upper: Optional[Union[float, list[float]]] = None
    simplex: bool = False

    @model_validator(mode="after")
    def _shape(self):
        c = np.asarray(self.centers, dtype=float)
        if c.ndim != 3 or c.shape[:2] != (len(self.probs), self.n_stages):
            raise ValueError(f"centers must have shape ({len(self.probs)}, {self.n_stages}, n), got {c.shape}")
        return self


class RunConfig(_Strict):
    domain: Literal["portfolio", "bike", "toy"]
    mode: Literal["np", "pure_sp", "expert_only"] = "np"
    seed: int = Field(0, ge=0)
    steps: int = Field(30, ge=1)
    out: str = "out"
    trace: bool = False
    ph: PHSection = PHSection()
    budget: BudgetSection = BudgetSection()
    np_: NPSection = Field(NPSection(), alias="np")
    expert: ExpertSection = ExpertSection()
    portfolio: Optional[PortfolioSection] = None
    bike: Optional[BikeSection] = None
    toy: Optional[ToySection] = None

    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    @model_validator(mode="after")
    def _domain_section(self):
        if getattr(self, self.domain) is None:
            raise ValueError(f"domain {self.domain!r} needs a '{self.domain}' section")
        return self

    def ph_config(self) -> PHConfig:
        return PHConfig(**self.ph.model_dump())

    def budget_config(self) -> SolverBudget:
        return SolverBudget(**self.budget.model_dump())

    def kappa(self) -> KappaSchedule:
        if self.mode == "pure_sp":
            return KappaSchedule("constant", constant_value=0.0)
        if self.mode == "expert_only":
            return KappaSchedule("constant", constant_value=1.0)
        return KappaSchedule(**self.np_.kappa.model_dump())

    def np_config(self) -> NPConfig:
        n = self.np_
        return NPConfig(ph=self.ph_config(), kappa=self.kappa(), lookahead_T=n.lookahead_T,
                        n_scenarios=n.n_scenarios, discount_gamma=n.discount_gamma, seed=self.seed,
                        budget=self.budget_config())

    def echo(self) -> dict:
        return self.model_dump(mode="json", by_alias=True)


def _format_error(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        key = ".".join(str(p) for p in err["loc"]) or "<root>"
        msg = err["msg"]
        if err["type"] == "extra_forbidden":
            msg = "unknown key"
        lines.append(f"config key '{key}': {msg}")
    return "; ".join(lines)


def parse_config(doc: dict, base_dir=".", overrides: Optional[dict] = None) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    doc = dict(doc)
    if isinstance(doc.get("out"), str) and not Path(doc["out"]).is_absolute():
        doc["out"] = str(Path(base_dir) / doc["out"])
    doc.update(overrides or {})
    try:
        return RunConfig.model_validate(doc, context={"base_dir": Path(base_dir)})
    except ValidationError as exc:
        raise ConfigError(_format_error(exc)) from None


def load_config(path, overrides: Optional[dict] = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return parse_config(doc, path.parent, overrides)
