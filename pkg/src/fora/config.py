"""Experiment configuration: a JSON document with four optional sections.

.. code-block:: json

    {
      "model": {"n_layers": 8, "d_model": 64, "n_heads": 4, "d_ff": 128, "vocab": 64, "seq_len": 32},
      "task": {"k_planted": 4, "perturb_rank": 4, "perturb_scale": 0.6, "head_gain": 4.0},
      "train": {"lr_a": 0.02, "lr_b": 0.1, "steps": 150, "batch_size": 8, "r": 8, "alpha_lora": 16, "k": 4},
      "experiment": {"seeds": [0, 1, 2], "n_calib": 32, "k_values": [2, 4, 6, 8]}
    }

Missing keys take the defaults below; unknown keys are rejected so typos
fail loudly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .exceptions import ConfigError
from .model import ModelConfig
from .optim import TrainConfig

DESK_TRAIN = {"lr_a": 2e-2, "lr_b": 1e-1, "steps": 150, "batch_size": 8, "k": 4, "r": 8, "alpha_lora": 16.0}


@dataclass
class TaskConfig:
    k_planted: int = 4
    perturb_rank: int = 4
    perturb_scale: float = 0.6
    proj_gain: float = 1.0
    head_gain: float = 4.0
    seed: int = 0


@dataclass
class ExperimentSettings:
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    n_calib: int = 32
    calib_batch_size: int = 16
    n_eval: int = 4
    eval_batch_size: int = 16
    k_values: list = field(default_factory=lambda: [2, 4, 6, 8])
    fisher_variant: str = "empirical"


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(**DESK_TRAIN))
    experiment: ExperimentSettings = field(default_factory=ExperimentSettings)

    def to_dict(self) -> dict:
        return {
            "model": asdict(self.model),
            "task": asdict(self.task),
            "train": self.train.to_dict(),
            "experiment": asdict(self.experiment),
        }

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form; stable across key order."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_seed(self, seed: int) -> "Config":
        data = self.to_dict()
        data["task"]["seed"] = seed
        data["train"]["seed"] = seed
        return config_from_dict(data)


def _section(cls, data, name: str, base: dict | None = None):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {unknown}")
    merged = dict(base or {})
    merged.update(data)
    try:
        return cls(**merged)
    except TypeError as exc:
        raise ConfigError(f"bad value in {name!r}: {exc}") from exc


def config_from_dict(data: dict) -> Config:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(data) - {"model", "task", "train", "experiment"})
    if unknown:
        raise ConfigError(f"unknown config sections: {unknown}")
    cfg = Config(
        _section(ModelConfig, data.get("model"), "model"),
        _section(TaskConfig, data.get("task"), "task"),
        _section(TrainConfig, data.get("train"), "train", DESK_TRAIN),
        _section(ExperimentSettings, data.get("experiment"), "experiment"),
    )
    validate(cfg)
    return cfg


def validate(cfg: Config) -> None:
    m, t, tr, ex = cfg.model, cfg.task, cfg.train, cfg.experiment
    if tr.k > m.n_layers:
        raise ConfigError(f"train.k={tr.k} exceeds n_layers={m.n_layers}")
    if not 1 <= t.k_planted <= m.n_layers:
        raise ConfigError(f"task.k_planted={t.k_planted} must be in [1, {m.n_layers}]")
    if t.perturb_rank < 1 or t.perturb_rank > min(m.d_model, m.d_ff):
        raise ConfigError(f"task.perturb_rank={t.perturb_rank} is out of range")
    if t.perturb_scale < 0:
        raise ConfigError("task.perturb_scale must be non-negative")
    if any(not 1 <= k <= m.n_layers for k in ex.k_values):
        raise ConfigError(f"experiment.k_values {ex.k_values} must lie in [1, {m.n_layers}]")
    if not ex.seeds:
        raise ConfigError("experiment.seeds must not be empty")
    for name in ("n_calib", "calib_batch_size", "n_eval", "eval_batch_size"):
        if getattr(ex, name) < 1:
            raise ConfigError(f"experiment.{name} must be >= 1")


def load_config(path: str | Path | None) -> Config:
    """Read a JSON config file; ``None`` gives the desk defaults."""
    if path is None:
        return config_from_dict({})
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    return config_from_dict(data)
