"""Run configuration: a TOML document validated with pydantic.

Sections are ``[problem]``, ``[model]``, ``[grid]``, ``[solver]``,
``[simulate]`` and ``[compare]``; unknown keys are rejected.  All times are
in horizon units.
"""

from __future__ import annotations

import sys
from pathlib import Path
from typing import Annotated, Literal, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import distributions as dist
from .fluid import Costs, FluidProblem


class ConfigError(ValueError):
    """The configuration document is missing, malformed or invalid."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ProblemConfig(_Strict):
    mu: float = Field(100.0, gt=0)
    horizon: float = Field(1.0, gt=0)
    r: float = Field(0.0, ge=0)
    c_w: float = Field(1.0, ge=0)
    c_i: float = Field(50.0, ge=0)
    c_o: float = Field(75.0, ge=0)
    # optional reward sweep; each value gets its own solve
    rewards: list[Annotated[float, Field(ge=0)]] | None = None

    def costs(self, r: float | None = None) -> Costs:
        return Costs(self.r if r is None else r, self.c_w, self.c_i, self.c_o)


class PointMassModel(_Strict):
    kind: Literal["point_mass"]

    def build(self, horizon, base_dir):
        return dist.PointMassAtZero()


class UniformModel(_Strict):
    kind: Literal["uniform"]
    lo: float
    hi: float

    def build(self, horizon, base_dir):
        return dist.Uniform(self.lo, self.hi)


class NormalModel(_Strict):
    kind: Literal["normal"]
    mean: float
    sd: float = Field(gt=0)

    def build(self, horizon, base_dir):
        return dist.Normal(self.mean, self.sd)


class LaplaceModel(_Strict):
    kind: Literal["laplace"]
    mu: float
    pi: float = Field(gt=0, lt=1)
    lambda_l: float = Field(gt=0)
    lambda_r: float = Field(gt=0)

    def build(self, horizon, base_dir):
        return dist.GeneralizedLaplace(self.mu, self.pi, self.lambda_l, self.lambda_r)


class EmpiricalModel(_Strict):
    kind: Literal["empirical"]
    values: list[float] | None = None
    file: str | None = None

    def build(self, horizon, base_dir):
        if (self.values is None) == (self.file is None):
            raise ConfigError("model: empirical needs exactly one of 'values' or 'file'")
        if self.values is not None:
            return dist.Empirical(self.values)
        path = Path(self.file)
        if not path.is_absolute():
            path = Path(base_dir) / path
        return dist.Empirical.from_file(path)


class SplitModel(_Strict):
    kind: Literal["midday_split"]
    early: "ModelConfig"
    late: "ModelConfig"
    split: float = 0.5

    def build(self, horizon, base_dir):
        return dist.MiddaySplit(self.early.build(horizon, base_dir),
                                self.late.build(horizon, base_dir), self.split)


class DriftModel(_Strict):
    kind: Literal["drift"]
    family: Literal["normal", "uniform", "laplace"]
    coefficients: dict[str, list[float]]

    def build(self, horizon, base_dir):
        return dist.ParametricDrift(self.family, self.coefficients, horizon)


ModelConfig = Annotated[
    Union[PointMassModel, UniformModel, NormalModel, LaplaceModel, EmpiricalModel, SplitModel,
          DriftModel],
    Field(discriminator="kind")]
SplitModel.model_rebuild()


class GridConfig(_Strict):
    K: int = Field(1000, ge=2)


class SolverConfig(_Strict):
    tol_primal: float = Field(1e-8, gt=0)
    tol_dual: float = Field(1e-8, gt=0)
    max_iter: int = Field(200_000, gt=0)


class SimulateConfig(_Strict):
    service: Literal["deterministic", "exponential", "lognormal"] = "exponential"
    log_sd: float = Field(2.0, gt=0)
    replications: int = Field(200, ge=2)
    seed: int = Field(0, ge=0)
    level: float = Field(0.95, gt=0, lt=1)
    scale: float = Field(1.0, gt=0)
    # gap study
    scales: list[Annotated[float, Field(gt=0)]] = [25.0, 100.0, 400.0]
    seed_groups: int = Field(5, ge=1)


class CompareConfig(_Strict):
    c_i: list[Annotated[float, Field(ge=0)]] = [50.0, 75.0, 100.0, 150.0]
    overtime_ratio: float = Field(1.5, ge=0)
    r: float = Field(0.0, ge=0)
    c_w: float = Field(1.0, ge=0)
    service: Literal["deterministic", "exponential", "lognormal"] = "deterministic"
    log_sd: float = Field(2.0, gt=0)
    replications: int = Field(50, ge=2)
    seed: int = Field(0, ge=0)
    K: int = Field(200, ge=2)
    reference_mu: float | None = Field(None, gt=0)
    policies: list[str] = ["Actual", "ZU", "QP"]
    level: float = Field(0.95, gt=0, lt=1)
    family_size: int | None = Field(None, ge=1)
    min_patients_per_day: int = Field(60, ge=1)
    clinic: str | None = None
    doctor: str | None = None
    # "empirical" pools the data; "config" uses the [model] section as truth
    model: Literal["empirical", "config"] = "empirical"
    bucket_edges: list[float] | None = None

    @field_validator("policies")
    @classmethod
    def _known(cls, v):
        for p in v:
            if p.split("@", 1)[0] not in ("Actual", "ZU", "QP"):
                raise ValueError(f"unknown policy {p!r}")
        return v


class Config(_Strict):
    problem: ProblemConfig = ProblemConfig()
    model: ModelConfig = PointMassModel(kind="point_mass")
    grid: GridConfig = GridConfig()
    solver: SolverConfig = SolverConfig()
    simulate: SimulateConfig = SimulateConfig()
    compare: CompareConfig = CompareConfig()

    def unpunctuality(self, base_dir=".") -> dist.UnpunctualityModel:
        try:
            return self.model.build(self.problem.horizon, base_dir)
        except ConfigError:
            raise
        except (ValueError, OSError) as exc:
            raise ConfigError(f"model: {exc}") from exc

    def fluid_problem(self, base_dir=".", r: float | None = None) -> FluidProblem:
        p = self.problem
        return FluidProblem(p.mu, p.horizon, p.costs(r), self.unpunctuality(base_dir))


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for e in exc.errors():
        where = ".".join(str(x) for x in e["loc"]) or "<root>"
        lines.append(f"{where}: {e['msg']}")
    return "; ".join(lines)


def parse_config(data: dict) -> Config:
    try:
        return Config.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def load_config(path) -> Config:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(data)


__all__ = ["CompareConfig", "Config", "ConfigError", "GridConfig", "ProblemConfig",
           "SimulateConfig", "SolverConfig", "load_config", "parse_config"]
