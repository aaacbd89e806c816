from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, Field, PositiveFloat, PositiveInt, ValidationError, model_validator

from swindle_utils.errors import ConfigError
from swindle_utils.preconditioner import VIConfig
from swindle_utils.samplers import KernelKind
from swindle_utils.swindles import EstimatorKind, FunctionKind

__all__ = [
    "SyntheticSpec",
    "TargetSpec",
    "PreconditionerSpec",
    "KernelSpec",
    "SweepSpec",
    "PredictSpec",
    "ExperimentConfig",
    "load_experiment_config",
    "parse_experiment_document",
    "DEFAULT_CONFIG_PATH",
]

DEFAULT_CONFIG_PATH = "swindles.config.json"


class SyntheticSpec(BaseModel):
    """Generate the dataset instead of loading one."""

    kind: Literal["logistic", "sparse", "irt"]
    seed: int = 0
    num_rows: PositiveInt = 200
    num_features: PositiveInt = 5
    num_students: PositiveInt = 20
    num_questions: PositiveInt = 10
    response_fraction: float = Field(default=1.0, gt=0.0, le=1.0)


class TargetSpec(BaseModel):
    kind: Literal["gaussian", "logistic", "sparse_logistic", "irt"]
    # gaussian: N(mean, S R S) with R_ij = correlation^|i-j| and S = diag(scales)
    dim: PositiveInt = 10
    mean: Optional[List[float]] = None
    scales: Optional[List[PositiveFloat]] = None
    correlation: float = Field(default=0.0, gt=-1.0, lt=1.0)
    # logistic / sparse_logistic: German credit format; irt: triplet CSV
    dataset: Optional[str] = None
    synthetic: Optional[SyntheticSpec] = None

    @model_validator(mode="after")
    def _check_source(self) -> "TargetSpec":
        if self.kind == "gaussian":
            for name in ("mean", "scales"):
                values = getattr(self, name)
                if values is not None and len(values) != self.dim:
                    raise ValueError(f"gaussian {name} must have {self.dim} entries")
        elif self.dataset is None and self.synthetic is None:
            raise ValueError(f"target {self.kind!r} needs a dataset path or a synthetic spec")
        return self


class PreconditionerSpec(BaseModel):
    enabled: bool = True
    map_path: Optional[str] = None
    vi: VIConfig = Field(default_factory=VIConfig)


class KernelSpec(BaseModel):
    kind: KernelKind = KernelKind.HMC
    step_size: PositiveFloat = 0.25
    num_leapfrog_steps: PositiveInt = 8
    trajectory_length: Optional[PositiveFloat] = None


class SweepSpec(BaseModel):
    """Leapfrog-step grid at fixed trajectory length (or explicit step sizes)."""

    trajectory_length: PositiveFloat = 2.0
    leapfrog_steps: List[int] = Field(default_factory=lambda: [2, 3, 4, 6, 8, 12, 16])
    step_sizes: Optional[List[PositiveFloat]] = None
    estimator: Literal["control", "antithetic"] = "control"
    bound: Literal["cdf", "quantile"] = "quantile"


class PredictSpec(BaseModel):
    test_fraction: float = Field(default=0.1, gt=0.0, lt=1.0)
    split_seed: int = 0
    budgets: List[int] = Field(default_factory=lambda: [0, 4, 8, 16, 32, 64, 128, 256, 500])


class ExperimentConfig(BaseModel):
    name: str = "experiment"
    target: TargetSpec
    preconditioner: PreconditionerSpec = Field(default_factory=PreconditionerSpec)
    kernel: KernelSpec = Field(default_factory=KernelSpec)
    estimators: List[EstimatorKind] = Field(
        default_factory=lambda: [
            EstimatorKind.PLAIN,
            EstimatorKind.CONTROL,
            EstimatorKind.ANTITHETIC,
            EstimatorKind.CVA,
        ]
    )
    functionals: List[FunctionKind] = Field(
        default_factory=lambda: [FunctionKind.MEAN, FunctionKind.VARIANCE]
    )
    num_steps: PositiveInt = 1000
    burn_in: int = Field(default=500, ge=0)
    num_chains: PositiveInt = 64
    replications: PositiveInt = 10
    seed: int = 0
    surrogate_budget: int = Field(default=100_000, ge=1000)
    surrogate_cost: float = Field(default=0.2, ge=0.0)
    rhat_threshold: float = Field(default=1.01, gt=1.0)
    diagonal_beta: bool = False
    workers: PositiveInt = 1
    out_dir: str = "results"
    sweep: SweepSpec = Field(default_factory=SweepSpec)
    predict: PredictSpec = Field(default_factory=PredictSpec)

    @model_validator(mode="after")
    def _check_protocol(self) -> "ExperimentConfig":
        if self.burn_in >= self.num_steps:
            raise ValueError(f"burn_in ({self.burn_in}) must be smaller than num_steps ({self.num_steps})")
        if not self.estimators:
            raise ValueError("at least one estimator kind is required")
        if not self.functionals:
            raise ValueError("at least one functional kind is required")
        return self


def _env_overrides() -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}
    for env_name, field_name, cast in (
        ("SWINDLES_SEED", "seed", int),
        ("SWINDLES_REPLICATIONS", "replications", int),
        ("SWINDLES_WORKERS", "workers", int),
        ("SWINDLES_OUT_DIR", "out_dir", str),
    ):
        raw = os.getenv(env_name)
        if raw:
            try:
                overrides[field_name] = cast(raw)
            except ValueError as exc:
                raise ConfigError(f"{env_name}={raw!r} is not a valid {cast.__name__}") from exc
    extra = os.getenv("SWINDLES_OVERRIDES")
    if extra:
        try:
            overrides.update(json.loads(extra))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"SWINDLES_OVERRIDES is not valid JSON: {exc}") from exc
    return overrides


def parse_experiment_document(data: Dict[str, Any], experiment: Optional[str] = None) -> ExperimentConfig:
    """Select one experiment from a document and validate it.

    Accepts either a single experiment or
    ``{"experiments": {name: {...}}, "defaultExperiment": name}``.
    """
    experiments = data.get("experiments")
    if experiments is not None:
        if not experiments:
            raise ConfigError("config document defines no experiments")
        name = experiment or data.get("defaultExperiment") or next(iter(experiments))
        if name not in experiments:
            raise ConfigError(f"experiment {name!r} not found; available: {sorted(experiments)}")
        body = dict(experiments[name])
        body.setdefault("name", name)
    else:
        body = dict(data)
    body.update(_env_overrides())
    try:
        return ExperimentConfig.model_validate(body)
    except ValidationError as exc:
        raise ConfigError(f"invalid experiment config:\n{exc}") from exc


def load_experiment_config(
    config_path: Union[str, Path, None] = None,
    experiment: Optional[str] = None,
) -> ExperimentConfig:
    """Load an experiment from a JSON config file.

    Environment overrides:
    - SWINDLES_CONFIG_PATH: alternate path to the config file (when no path is passed)
    - SWINDLES_EXPERIMENT: experiment key to use (overrides defaultExperiment)
    - SWINDLES_SEED / SWINDLES_REPLICATIONS / SWINDLES_WORKERS / SWINDLES_OUT_DIR
    - SWINDLES_OVERRIDES: JSON object merged into the selected experiment
    """
    path = Path(config_path or os.getenv("SWINDLES_CONFIG_PATH", DEFAULT_CONFIG_PATH))
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must contain a JSON object")
    return parse_experiment_document(data, experiment or os.getenv("SWINDLES_EXPERIMENT"))
