"""Worker configuration: environment binding, trainer hyperparameters and
local safety limits."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional


@dataclass(frozen=True)
class SacHyperparams:
    """Soft actor-critic training defaults."""

    num_envs: int = 16
    learning_rate: float = 3e-4
    buffer_size: int = 2_000_000
    learning_starts: int = 10_000
    batch_size: int = 1024
    tau: float = 0.005
    gamma: float = 0.99
    train_freq: int = 8
    gradient_steps: int = 4
    policy_layers: tuple[int, int] = (512, 512)


@dataclass(frozen=True)
class WorkerConfig:
    environment: str = "crawler"
    structure_template_path: Optional[str] = None
    sac: SacHyperparams = field(default_factory=SacHyperparams)
    train_timeout_s: float = 3600.0
    heartbeat_s: float = 30.0


class ConfigError(ValueError):
    pass


_SAC_KEYS = {
    "num_envs", "learning_rate", "buffer_size", "learning_starts",
    "batch_size", "tau", "gamma", "train_freq", "gradient_steps",
    "policy_layers",
}
_TOP_KEYS = {"environment", "structure_template_path", "sac",
             "train_timeout_s", "heartbeat_s"}


def load_config(path: str | Path) -> WorkerConfig:
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    sac_doc = dict(doc.pop("sac", {}))
    unknown = set(sac_doc) - _SAC_KEYS
    if unknown:
        raise ConfigError(f"unknown sac keys: {sorted(unknown)}")
    if "policy_layers" in sac_doc:
        sac_doc["policy_layers"] = tuple(sac_doc["policy_layers"])
    return WorkerConfig(sac=SacHyperparams(**sac_doc), **doc)


__all__ = ["ConfigError", "SacHyperparams", "WorkerConfig", "load_config", "replace"]
