"""Run configuration: a YAML file with flat keys plus an ``env`` block.

Unknown keys are rejected so a misspelled hyperparameter fails loudly.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .learner import LearnerConfig

OUTPUT_DIR_ENV = "SEQVALUE_OUTPUT_DIR"
THREADS_ENV = "SEQVALUE_THREADS"


class ConfigError(ValueError):
    pass


class EnvSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["chain", "pointmass"] = "chain"
    K: int = Field(2, ge=1)
    steps_per_subtask: int = Field(3, ge=1)
    n_actions: int = Field(3, ge=1)
    horizon: int = Field(60, ge=1)
    observation: Literal["full", "boundary"] = "full"


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    dataset: str = "dataset.seqv"
    output_dir: str = "run"
    env: EnvSpec = Field(default_factory=EnvSpec)

    # data collection
    n_trajectories: int = Field(500, ge=0)
    noise: float = Field(0.3, ge=0.0, le=1.0)

    # learner
    H: int = Field(2, ge=1)
    gamma1: float = Field(0.9, gt=0.0, le=1.0)
    gamma2: float = Field(0.99, gt=0.0, lt=1.0)
    tau: float = Field(0.9, ge=0.0, le=1.0)
    polyak: float = Field(0.005, ge=0.0, le=1.0)
    n_atoms: int = Field(101, ge=2)
    sigma_coef: float = Field(0.75, gt=0.0)
    support_mode: Literal["universal", "data-centric"] = "universal"
    n_critics: int = Field(2, ge=1)
    objective: Literal["scalar", "distributional"] = "distributional"
    batch_size: int = Field(64, ge=1)
    lr: float = Field(3e-4, gt=0.0)
    grad_clip: float = Field(10.0, gt=0.0)
    value_hidden: list[int] = [32, 32]
    critic_hidden: list[int] = [64, 64]
    actor_hidden: list[int] = [32, 32]
    critic_target: Literal["detached", "coupled"] = "detached"
    coupled_samples: int = Field(10, ge=1)

    # policy extraction
    extractor: Literal["bc", "awr", "dpg_bc"] = "awr"
    alpha: float = Field(1.0, ge=0.0)
    awr_temperature: float = Field(1.0, gt=0.0)
    awr_max_weight: float = Field(100.0, gt=0.0)

    # evaluation
    eval_mode: Literal["sample", "mean", "greedy", "softmax"] = "greedy"
    eval_n: int = Field(10, ge=1)
    eval_beta: float = Field(1.0, gt=0.0)
    eval_episodes: int = Field(50, ge=0)

    # schedule
    steps: int = Field(50_000, ge=0)
    eval_interval: int = Field(10_000, ge=1)

    @field_validator("value_hidden", "critic_hidden", "actor_hidden")
    @classmethod
    def _positive_widths(cls, v):
        if any(w < 1 for w in v):
            raise ValueError("layer widths must be positive")
        return v

    def learner_config(self) -> LearnerConfig:
        keys = LearnerConfig.__dataclass_fields__.keys()
        return LearnerConfig(**{k: getattr(self, k) for k in keys})

    def with_overrides(self, pairs: list[str]) -> RunConfig:
        data = self.model_dump()
        for pair in pairs:
            key, sep, raw = pair.partition("=")
            if not sep:
                raise ConfigError(f"override {pair!r} is not KEY=VALUE")
            value = yaml.safe_load(raw)
            node = data
            parts = key.split(".")
            for p in parts[:-1]:
                if p not in node or not isinstance(node[p], dict):
                    raise ConfigError(f"unknown config block {p!r}")
                node = node[p]
            node[parts[-1]] = value
        return validate(data)


def validate(data: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    data = {}
    if path is not None:
        text = Path(path).read_text()
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a mapping")
    cfg = validate(data)
    if overrides:
        cfg = cfg.with_overrides(overrides)
    if os.environ.get(OUTPUT_DIR_ENV):
        cfg = cfg.model_copy(update={"output_dir": os.environ[OUTPUT_DIR_ENV]})
    return cfg


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer") from None


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(), sort_keys=True)
