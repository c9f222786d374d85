"""Run configuration: defaults, TOML/JSON file, environment, then command-line flags."""

from __future__ import annotations

import json
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .filters import FilterThresholds
from .rewards import DEFAULT_TASK_TABLE, TaskRewardConfig, load_task_table

ENV_VARS = {
    "MODEL_ENDPOINT": "model",
    "JUDGE_ENDPOINT": "judge",
    "EMBED_ENDPOINT": "embed",
    "API_KEY": "api_key",
}


@dataclass
class RolloutSection:
    k: int = 1
    max_turns: int = 8
    exec_timeout: float = 60.0
    on_parse_error: str = "nudge"
    max_nudges: int = 2


@dataclass
class SandboxSection:
    backend: str = "subprocess"
    image_root: str | None = None
    http_url: str | None = None
    allow_network: bool = False
    memory_limit_mb: int | None = None
    cpu_time_limit: int | None = None
    interrupt_grace: float = 5.0


@dataclass
class EndpointSection:
    model: str | None = None
    judge: str | None = None
    embed: str | None = None
    api_key: str | None = None
    model_id: str = "policy"
    judge_model: str = "judge"
    embed_model: str = "embedder"
    max_retries: int = 3
    timeout: float = 120.0
    image_mode: str = "data_url"
    max_concurrency: int = 8


@dataclass
class RewardSection:
    accuracy_gate: bool = True
    n_max: int = 8
    tasks: dict[str, TaskRewardConfig] = field(default_factory=lambda: dict(DEFAULT_TASK_TABLE))


@dataclass
class HacklabSection:
    p_acc0: float = 0.55
    p_acc_tool: float = 0.60
    p_con_hi_tool: float = 0.7
    con_hi: float = 0.9
    con_lo: float = 0.3
    learning_rate: float = 0.5
    temperature: float = 1.0
    group_size: int = 8
    steps: int = 5000


@dataclass
class RunConfig:
    seed: int = 0
    workers: int = 1
    rollout: RolloutSection = field(default_factory=RolloutSection)
    sandbox: SandboxSection = field(default_factory=SandboxSection)
    endpoints: EndpointSection = field(default_factory=EndpointSection)
    filters: FilterThresholds = field(default_factory=FilterThresholds)
    rewards: RewardSection = field(default_factory=RewardSection)
    hacklab: HacklabSection = field(default_factory=HacklabSection)

    def validate(self) -> "RunConfig":
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.rollout.k < 1 or self.rollout.max_turns < 1:
            raise ConfigError("rollout.k and rollout.max_turns must be >= 1")
        if self.sandbox.backend not in ("subprocess", "inprocess", "http"):
            raise ConfigError(f"unknown sandbox backend {self.sandbox.backend!r}")
        if self.rewards.n_max < 2:
            raise ConfigError("rewards.n_max must be >= 2")
        return self


def _section(cls, data: Mapping, name: str):
    if not isinstance(data, Mapping):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    return cls(**data)


def config_from_dict(data: Mapping[str, Any]) -> RunConfig:
    cfg = RunConfig()
    top = {"seed", "workers", "rollout", "sandbox", "endpoints", "filters", "rewards", "hacklab"}
    unknown = set(data) - top
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        if "seed" in data:
            cfg.seed = int(data["seed"])
        if "workers" in data:
            cfg.workers = int(data["workers"])
        if "rollout" in data:
            cfg.rollout = _section(RolloutSection, data["rollout"], "rollout")
        if "sandbox" in data:
            cfg.sandbox = _section(SandboxSection, data["sandbox"], "sandbox")
        if "endpoints" in data:
            cfg.endpoints = _section(EndpointSection, data["endpoints"], "endpoints")
        if "filters" in data:
            cfg.filters = FilterThresholds.from_dict(data["filters"])
        if "hacklab" in data:
            cfg.hacklab = _section(HacklabSection, data["hacklab"], "hacklab")
        if "rewards" in data:
            rewards = dict(data["rewards"])
            tasks = rewards.pop("tasks", None)
            cfg.rewards = _section(RewardSection, rewards, "rewards")
            if tasks is not None:
                cfg.rewards.tasks = load_task_table(tasks)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return cfg.validate()


def read_config_file(path) -> dict:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        if path.suffix.lower() == ".json":
            return json.loads(raw)
        return tomllib.loads(raw.decode("utf-8"))
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def load_config(path=None, env: Mapping[str, str] | None = None) -> RunConfig:
    """Defaults, overlaid by the file at ``path``, overlaid by endpoint variables in ``env``."""
    cfg = config_from_dict(read_config_file(path)) if path else RunConfig()
    env = os.environ if env is None else env
    for var, attr in ENV_VARS.items():
        if env.get(var):
            setattr(cfg.endpoints, attr, env[var])
    return cfg
