"""Flat training/evaluation configuration.

Field names are the keys used in config files, on the command line and in
checkpoint manifests.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import yaml

from ..errors import ConfigError
from ..policy import SETUPS, ModelConfig
from ..schedule import Schedule, build_schedule, subsample_schedule
from ..toyworld import TASKS


@dataclass(frozen=True)
class TrainConfig:
    task: str = "reach"
    setup: str = "I"
    seed: int = 0
    T_o: int = 2
    T_p: int = 16
    T_a: int = 8
    K_m: int = 100
    train_steps: int = 0  # 0: train on all K_m steps; otherwise the K_m = K variant
    K_eval: tuple[int, ...] = (1, 10, 50, 100)
    iterations: int = 30_000
    batch_size: int = 64
    lr: float = 1e-4
    w_mu: float = 1.0
    w_sigma: float = 0.1
    sigma_loss: str = "squared"
    sigma_floor: float = 1e-3
    beta_min: float = 1e-3
    beta_max: float = 0.2
    feature_dim: int = 128
    encoder_hidden: int = 256
    denoiser_hidden: tuple[int, ...] = (512, 512)
    head_hidden: int = 64
    k_embed_dim: int = 32
    clip_sample: bool = True
    log_interval: int = 100
    eval_episodes: int = 200
    seeds: tuple[int, ...] = (0, 1, 2)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}", component="harness")
        if self.setup not in SETUPS:
            raise ConfigError(f"unknown setup {self.setup!r}; expected one of {list(SETUPS)}", component="harness")
        if not (1 <= self.T_a <= self.T_p):
            raise ConfigError(f"need 1 <= T_a <= T_p, got T_a={self.T_a}, T_p={self.T_p}", component="harness")
        if self.K_m < 1:
            raise ConfigError(f"K_m must be >= 1, got {self.K_m}", component="harness")
        if not (0 <= self.train_steps <= self.K_m):
            raise ConfigError(f"train_steps={self.train_steps} outside [0, K_m={self.K_m}]", component="harness")
        for K in self.K_eval:
            if not (1 <= K <= self.K_m):
                raise ConfigError(f"K_eval entry {K} outside [1, K_m={self.K_m}]", component="harness")
        if self.iterations < 0 or self.batch_size < 1 or self.log_interval < 1:
            raise ConfigError("iterations >= 0, batch_size >= 1 and log_interval >= 1 required", component="harness")

    @property
    def effective_K_m(self) -> int:
        return self.train_steps or self.K_m

    def schedule(self) -> Schedule:
        base = build_schedule(self.K_m, self.beta_min, self.beta_max)
        if self.train_steps and self.train_steps != self.K_m:
            return subsample_schedule(base, self.train_steps)
        return base

    def model_config(self, image_shape=(1, 16, 16, 1), state_dim: int = 3, action_dim: int = 3) -> ModelConfig:
        return ModelConfig(
            T_o=self.T_o,
            T_p=self.T_p,
            state_dim=state_dim,
            action_dim=action_dim,
            image_shape=tuple(image_shape),
            feature_dim=self.feature_dim,
            encoder_hidden=self.encoder_hidden,
            denoiser_hidden=tuple(self.denoiser_hidden),
            head_hidden=self.head_hidden,
            k_embed_dim=self.k_embed_dim,
            sigma_floor=self.sigma_floor,
            w_mu=self.w_mu,
            w_sigma=self.w_sigma,
            sigma_loss=self.sigma_loss,
            clip_sample=self.clip_sample,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def with_overrides(self, **overrides) -> "TrainConfig":
        return config_from_dict({**self.to_dict(), **overrides})


_TUPLE_FIELDS = {f.name for f in fields(TrainConfig) if str(f.type).startswith("tuple")}
_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(name: str, value):
    kind = str(_FIELD_TYPES[name])
    if name in _TUPLE_FIELDS:
        if isinstance(value, str):
            value = [v for v in value.replace(",", " ").split() if v]
        return tuple(int(v) for v in value)
    if kind == "int":
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{name} must be an integer, got {value}", component="harness")
        return int(value)
    if kind == "float":
        return float(value)
    if kind == "bool":
        if isinstance(value, str):
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ConfigError(f"{name} must be a boolean, got {value!r}", component="harness")
            return value.lower() in ("true", "1", "yes")
        return bool(value)
    return str(value)


def config_from_dict(d: dict) -> TrainConfig:
    unknown = set(d) - set(_FIELD_TYPES)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}", component="harness")
    try:
        return TrainConfig(**{k: _coerce(k, v) for k, v in d.items()})
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc), component="harness") from exc


def load_config(path) -> TrainConfig:
    """Read a flat key/value document (YAML or JSON; JSON is valid YAML)."""
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}", component="harness") from exc
    if not isinstance(data, dict) or any(isinstance(v, dict) for v in data.values()):
        raise ConfigError(f"{path}: config must be a flat key/value mapping", component="harness")
    return config_from_dict(data)


def dump_config(config: TrainConfig) -> str:
    return json.dumps(config.to_dict(), sort_keys=True, indent=1)


__all__ = ["TrainConfig", "config_from_dict", "load_config", "dump_config"]
