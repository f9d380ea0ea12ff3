"""Experiment configuration (JSON on disk, defaults filled in on load)."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .agent import AgentConfig
from .contract import ContractTerms
from .env import EnvConfig

QUANTIZE_ALIASES = {"off": "off", "det": "deterministic", "deterministic": "deterministic",
                    "stoch": "stochastic", "stochastic": "stochastic"}


class LatencyModel(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    mean_s: float = Field(0.12, ge=0)
    std_s: float = Field(0.01, ge=0)


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    seed: int | None = None
    clients: int = Field(5, ge=1, le=64)
    rounds: int = Field(20, ge=0)
    local_epochs: int = Field(3, ge=1, le=5)
    episodes_per_epoch: int = Field(10, ge=1)
    eval_episodes: int = Field(4, ge=1)
    agent: AgentConfig = AgentConfig()
    env: EnvConfig = EnvConfig()
    contract: ContractTerms = ContractTerms()
    quantize_uploads: Literal["off", "deterministic", "stochastic"] = "off"
    qat: bool = False
    fault_period: int = Field(0, ge=0)
    synthetic_latency: LatencyModel | None = None
    output_dir: str = "legaledge-out"
    charts: bool = False

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


def parse_config(doc: dict) -> ExperimentConfig:
    if isinstance(doc, dict) and isinstance(doc.get("quantize_uploads"), str):
        doc = {**doc, "quantize_uploads": QUANTIZE_ALIASES.get(doc["quantize_uploads"], doc["quantize_uploads"])}
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as exc:
        err = exc.errors()[0]
        field = ".".join(str(p) for p in err["loc"])
        raise ConfigError(field, err["msg"]) from exc


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("", f"{path}: top level must be an object")
    return parse_config(doc)
