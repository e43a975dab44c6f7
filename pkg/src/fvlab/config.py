"""Experiment configuration: a strict TOML schema.

Example::

    seed = 42

    [model]
    kind = "two_state"
    p = 0.5
    lambda1 = 1.3862943611198906

    [run]
    N = 1000
    T = 1.0
    R = 20000

    [[observables]]
    kind = "indicator_state"
    state = 0

    [checks.clt]
    rel_tol = 0.1

Unknown keys anywhere are rejected.
"""
from __future__ import annotations

import math
import sys
from pathlib import Path
from typing import Annotated, List, Literal, Optional, Union

import numpy as np
import tomli_w
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from . import models
from .errors import ConfigError
from .estimators import INDICATOR_F, Observable, ObservableSet, constant, indicator_state

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True, frozen=True)


# --------------------------------------------------------------------------
# models
# --------------------------------------------------------------------------


class ConstantRateConfig(_Strict):
    kind: Literal["constant_rate"] = "constant_rate"
    lam: float = Field(alias="lambda", ge=0)

    def build(self):
        return models.constant_rate_model(self.lam)


class TwoStateConfig(_Strict):
    kind: Literal["two_state"] = "two_state"
    p: float = Field(gt=0, lt=1)
    lambda1: float = Field(gt=0)

    def build(self):
        return models.two_state_model(self.p, self.lambda1)


class ClaimsConfig(_Strict):
    law: str = "exponential"
    params: dict = Field(default_factory=lambda: {"mean": 1.0})

    def build(self):
        if self.law == "exponential":
            return models.exponential_claims(**self.params)
        return models.scipy_claims(self.law, **self.params)


class RuinPdmpConfig(_Strict):
    kind: Literal["ruin_pdmp"] = "ruin_pdmp"
    c: float = Field(gt=0)
    theta: float = Field(gt=0)
    s0: float = Field(default=0.0, ge=0)
    claims: ClaimsConfig = Field(default_factory=ClaimsConfig)

    def build(self):
        return models.ruin_pdmp_model(self.c, self.theta, self.s0, self.claims.build())


class DiffusionConfig(_Strict):
    kind: Literal["diffusion"] = "diffusion"
    lambda0: float = Field(default=1.0, ge=0)
    lambda1: float = Field(default=0.25, ge=0)
    dt: float = Field(default=0.01, gt=0)
    x0: float = 0.0
    dim: int = Field(default=1, ge=1)

    def build(self):
        return models.ou_diffusion_model(self.lambda0, self.lambda1, self.dt, self.x0, self.dim)


ModelConfig = Annotated[
    Union[ConstantRateConfig, TwoStateConfig, RuinPdmpConfig, DiffusionConfig],
    Field(discriminator="kind"),
]


# --------------------------------------------------------------------------
# observables
# --------------------------------------------------------------------------


class ObservableConfig(_Strict):
    """``indicator_F``; ``indicator_state`` (label ``state``); ``constant``
    (``value``); ``clipped`` = coordinate ``coordinate`` clipped to [-bound, bound]."""

    kind: Literal["indicator_F", "indicator_state", "constant", "clipped"]
    state: Optional[int] = None
    value: Optional[float] = None
    coordinate: int = 0
    bound: Optional[float] = Field(default=None, gt=0)

    def build(self) -> Observable:
        if self.kind == "indicator_F":
            return INDICATOR_F
        if self.kind == "indicator_state":
            if self.state is None:
                raise ConfigError("indicator_state needs 'state'")
            return indicator_state(self.state)
        if self.kind == "constant":
            if self.value is None:
                raise ConfigError("constant needs 'value'")
            return constant(self.value)
        if self.bound is None:
            raise ConfigError("clipped needs 'bound'")
        b, k = self.bound, self.coordinate

        def clipped(x):
            x = np.asarray(x, dtype=float)
            v = x[:, k] if x.ndim == 2 else x
            return np.clip(v, -b, b)

        return Observable(f"clipped_{k}_{b}", clipped, b)


# --------------------------------------------------------------------------
# run / outputs / checks
# --------------------------------------------------------------------------


class RunConfig(_Strict):
    N: int = Field(default=1000, ge=2)
    T: float = Field(default=1.0, gt=0)
    R: int = Field(default=20000, ge=2)
    method: Literal["fv", "crude", "discrete"] = "fv"
    mode: Literal["exact", "discretized"] = "exact"
    dt: Optional[float] = Field(default=None, gt=0)
    mesh_n: Optional[int] = Field(default=None, ge=1)
    grid_points: int = Field(default=64, ge=2)


class OutputsConfig(_Strict):
    formats: List[Literal["json", "csv"]] = Field(default_factory=lambda: ["json", "csv"])
    event_log: bool = False
    plotdata: bool = True


class CltCheckConfig(_Strict):
    rel_tol: float = Field(default=0.1, ge=0)
    level: float = Field(default=0.997, gt=0, lt=1)
    observables: List[str] = Field(default_factory=lambda: ["indicator_F"])


class L2CheckConfig(_Strict):
    observables: List[str] = Field(default_factory=lambda: ["indicator_F"])


class MeanCheckConfig(_Strict):
    z: float = Field(default=3.0, gt=0)
    bias_allowance: float = Field(default=0.0, ge=0)
    observables: List[str] = Field(default_factory=lambda: ["indicator_F"])


class ChecksConfig(_Strict):
    clt: Optional[CltCheckConfig] = None
    l2_bound: Optional[L2CheckConfig] = None
    mean: Optional[MeanCheckConfig] = None


class ExperimentConfig(_Strict):
    seed: int = Field(default=0, ge=0, lt=2**64)
    model: ModelConfig
    run: RunConfig = Field(default_factory=RunConfig)
    observables: List[ObservableConfig] = Field(default_factory=list)
    outputs: OutputsConfig = Field(default_factory=OutputsConfig)
    checks: ChecksConfig = Field(default_factory=ChecksConfig)

    def build_model(self):
        return self.model.build()

    def build_observables(self) -> ObservableSet:
        return ObservableSet(o.build() for o in self.observables)

    def to_dict(self) -> dict:
        return self.model_dump(by_alias=True, exclude_none=True, mode="json")

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())


def parse_config(data: dict) -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.run.dt is not None:
        steps = cfg.run.T / cfg.run.dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ConfigError("run.dt must divide run.T")
    if not math.isfinite(cfg.run.T):
        raise ConfigError("run.T must be finite")
    return cfg


def loads(text: str) -> ExperimentConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc
    return parse_config(data)


def load(path) -> ExperimentConfig:
    return loads(Path(path).read_text())
