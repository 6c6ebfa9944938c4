"""Run configuration: a flat ``key = value`` file, typed and validated.

Precedence is defaults < config file < explicit overrides (CLI flags).
Unknown keys are rejected rather than ignored so typos fail loudly, and the
effective configuration is persisted next to the run artifacts for replay.
"""

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

__all__ = ["RunConfig", "load_config_file", "make_config", "write_effective"]

_CHOICES = {
    "rank_mode": ("boundary", "uncert"),
    "label_policy": ("none", "strict"),
    "resume_policy": ("best_so_far", "last"),
    "tau_policy": ("reset", "persist"),
    "memory_policy": ("rebuild", "frozen_seed"),
}


@dataclass
class RunConfig:
    image_size: int = 256
    out_dim: int = 256
    warmup_epochs: int = 5
    warmup_lr: float = 1e-4
    finetune_lr: float = 3e-5
    batch_size: int = 32
    proto_budget: int = 2048
    coreset_ratio: float = 0.3
    grid_cap: int = 16
    knn_k: int = 3
    top_q: float = 0.03
    rounds: int = 5
    budget: int = 200
    noise_scale: float = 0.02
    swag_samples: int = 4
    tau: float = 1.0
    tau_relaxed: float = 1.5
    rank_mode: str = "boundary"
    label_policy: str = "none"
    resume_policy: str = "best_so_far"
    tau_policy: str = "reset"
    memory_policy: str = "rebuild"
    seed: int = 123
    seed_fraction: float = 0.30

    def __post_init__(self) -> None:
        for key, allowed in _CHOICES.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}")
        for key in ("image_size", "out_dim", "batch_size", "proto_budget",
                    "grid_cap", "knn_k", "budget", "swag_samples", "rounds"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")
        for key in ("warmup_lr", "finetune_lr"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be positive")
        if not 0 < self.coreset_ratio <= 1:
            raise ConfigError("coreset_ratio must be in (0, 1]")
        if not 0 < self.top_q <= 1:
            raise ConfigError("top_q must be in (0, 1]")
        if not 0 < self.seed_fraction < 1:
            raise ConfigError("seed_fraction must be in (0, 1)")
        if self.noise_scale < 0:
            raise ConfigError("noise_scale must be >= 0")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key: str, raw: str):
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key: {key}")
    kind = _FIELD_TYPES[key]
    try:
        if kind == "int" or kind is int:
            return int(raw)
        if kind == "float" or kind is float:
            return float(raw)
        return str(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def load_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values: dict = {}
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key}")
        values[key] = _convert(key, raw)
    return values


def make_config(config_file=None, overrides: dict | None = None) -> RunConfig:
    values: dict = {}
    if config_file is not None:
        values.update(load_config_file(config_file))
    for key, raw in (overrides or {}).items():
        if raw is None:
            continue
        values[key] = _convert(key, str(raw))
    return RunConfig(**values)


def write_effective(config: RunConfig, path) -> None:
    lines = []
    for key in sorted(_FIELD_TYPES):
        value = getattr(config, key)
        rendered = repr(value) if isinstance(value, float) else str(value)
        lines.append(f"{key} = {rendered}")
    Path(path).write_text("\n".join(lines) + "\n")
