"""Validated configuration: training hyper-parameters and run files."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .envs import PointTaskSpec
from .errors import ConfigError
from .model import ModelConfig

Variant = Literal["none", "R", "M", "F"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class ModelSection(_Strict):
    n_layers: int = 2
    n_heads: int = 2
    embed_dim: int = 32
    context_K: int = 20
    prompt_Kstar: int = 5
    state_dim: int = 4
    action_dim: int = 2
    max_timestep: int = 64
    dropout: float = 0.1
    action_scale: float = 1.0

    def build(self) -> ModelConfig:
        return ModelConfig(**self.model_dump())


class TrainConfig(_Strict):
    E: int = 20_000
    t_m: int = 5_000
    eta: float = 1e-4
    eta_min: int = 0
    # None means ceil(1e-5 * parameter count)
    eta_max: Optional[int] = None
    S: float = 0.2
    lam: float = Field(10.0, alias="lambda")
    variant: Variant = "F"
    batch_size: int = 8
    stat_batch_size: int = 64
    probe_batch_size: int = 32
    log_every: int = 100
    ema_decay: float = 0.99
    seed: int = 0
    optimizer: Literal["sgd", "adam"] = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    threads: int = 1
    model: ModelSection = Field(default_factory=ModelSection)

    @model_validator(mode="after")
    def _check(self):
        if self.E < 1 or self.t_m < 1:
            raise ValueError("E and t_m must be positive")
        if self.E < self.t_m:
            raise ValueError("E must be >= t_m")
        if self.log_every < 1 or (self.t_m % self.log_every and self.log_every % self.t_m):
            raise ValueError("t_m and log_every must divide one another")
        if self.eta_min < 0 or (self.eta_max is not None and self.eta_max < self.eta_min):
            raise ValueError("need 0 <= eta_min <= eta_max")
        if not 0.0 <= self.S < 1.0:
            raise ValueError("S must lie in [0, 1)")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if min(self.batch_size, self.stat_batch_size, self.probe_batch_size, self.threads) < 1:
            raise ValueError("batch sizes and threads must be positive")
        return self

    @property
    def K(self) -> int:
        return self.model.context_K

    @property
    def Kstar(self) -> int:
        return self.model.prompt_Kstar

    def model_cfg(self) -> ModelConfig:
        return self.model.build()

    def resolved_eta_max(self, n_params: int) -> int:
        if self.eta_max is not None:
            return self.eta_max
        return max(self.eta_min, math.ceil(1e-5 * n_params))

    def to_dict(self) -> dict:
        return self.model_dump(by_alias=True)


class TaskSection(_Strict):
    task_id: str
    kind: Literal["dir", "vel"]
    angle: float = 0.0
    target_speed: float = 0.0
    horizon: int = 50
    action_bound: float = 1.0
    gamma: float = 1.0

    def build(self) -> PointTaskSpec:
        return PointTaskSpec(**self.model_dump())


class SuiteSection(_Strict):
    tasks: list[TaskSection]
    held_out: list[str] = Field(default_factory=list)
    n_traj: int = 40
    regime: Literal["near_optimal", "sub_optimal"] = "near_optimal"

    @model_validator(mode="after")
    def _check(self):
        ids = [t.task_id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise ValueError("task ids must be unique")
        unknown = set(self.held_out) - set(ids)
        if unknown:
            raise ValueError(f"held_out names unknown tasks {sorted(unknown)}")
        if len(set(ids) - set(self.held_out)) < 1:
            raise ValueError("at least one training task is required")
        return self

    def specs(self) -> dict[str, PointTaskSpec]:
        return {t.task_id: t.build() for t in self.tasks}

    def train_ids(self) -> list[str]:
        return sorted(t.task_id for t in self.tasks if t.task_id not in self.held_out)


class EvalSection(_Strict):
    episodes: int = 20
    unseen_prompt_traj: int = 10


class RunConfigFile(_Strict):
    output_dir: str = "run"
    data_dir: str = "data"
    seed: int = 0
    suite: SuiteSection
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalSection = Field(default_factory=EvalSection)
    # filled by load_run_config; not part of the file
    base_dir: Optional[str] = Field(default=None, exclude=True)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        if p.is_absolute() or self.base_dir is None:
            return p
        return Path(self.base_dir) / p

    @property
    def out_path(self) -> Path:
        return self.resolve(self.output_dir)

    @property
    def data_path(self) -> Path:
        return self.resolve(self.data_dir)


def load_run_config(path) -> RunConfigFile:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if isinstance(raw, dict) and "base_dir" in raw:
        raise ConfigError("unknown key 'base_dir'")
    if isinstance(raw, dict) and isinstance(raw.get("train"), dict) and "seed" in raw["train"]:
        raise ConfigError("train.seed is derived from the top-level 'seed'; remove it")
    try:
        cfg = RunConfigFile.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"invalid config {path}:\n{exc}") from None
    cfg.base_dir = str(path.resolve().parent)
    return cfg
