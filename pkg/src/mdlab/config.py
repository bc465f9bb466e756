"""Run configuration: a JSON document with fixed sections, strict key checking
and dotted ``--set`` overrides."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Malformed configuration; ``path`` names the offending key."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class ScheduleSection:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class SamplerSection:
    steps: int = 50
    capture_frac: float = 0.25


@dataclass
class ModelSection:
    widths: list[int] = field(default_factory=lambda: [32, 64])
    d_c: int = 32
    tokens: int = 4
    temb_dim: int = 64


@dataclass
class TrainSection:
    lr: float = 1e-3
    iters: int = 500
    batch: int = 8
    seed: int = 0
    lr_decay: str = "cosine"


@dataclass
class DatasetSection:
    n_normal: int = 64
    n_per_defect: int = 32
    size: int = 16
    channels: int = 4
    seed: int = 0


@dataclass
class DownstreamSection:
    epochs: int = 200
    gamma: float = 2.0
    alpha_bal: float = 0.75
    lr: float = 1e-3
    batch: int = 32
    seed: int = 0
    synthetic_per_class: int = 100
    label: str = "target"  # "target" (painted mask) or "refined" (attention-refined mask)
    landscape_resolution: int = 21
    landscape_span: float = 1.0


@dataclass
class PathsSection:
    runs: str = "runs"


@dataclass
class RunConfig:
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    downstream: DownstreamSection = field(default_factory=DownstreamSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _coerce(path: str, value: Any, current: Any) -> Any:
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if isinstance(current, list):
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(path, f"expected a list of integers, got {value!r}")
        return list(value)
    raise ConfigError(path, "unsupported field type")


_CHOICES = {
    "downstream.label": ("target", "refined"),
    "train.lr_decay": ("cosine", "constant"),
}


def _apply(obj, data: dict, prefix: str = "") -> None:
    if not isinstance(data, dict):
        raise ConfigError(prefix or "<root>", "expected an object")
    names = {f.name for f in dataclasses.fields(obj)}
    for key, value in data.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in names:
            raise ConfigError(path, "unknown key")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            _apply(current, value, path)
        else:
            value = _coerce(path, value, current)
            if path in _CHOICES and value not in _CHOICES[path]:
                raise ConfigError(path, f"expected one of {_CHOICES[path]}, got {value!r}")
            setattr(obj, key, value)


def config_from_dict(data: dict) -> RunConfig:
    cfg = RunConfig()
    _apply(cfg, data)
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError(str(p), "config file does not exist")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(str(p), f"invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    return config_from_dict(data)


def apply_override(cfg: RunConfig, assignment: str) -> None:
    """Apply one ``section.key=value`` override; the value is parsed as JSON
    when possible, otherwise taken as a plain string."""
    key, sep, raw = assignment.partition("=")
    if not sep or not key:
        raise ConfigError(assignment, "override must look like section.key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    nested: Any = value
    for part in reversed(key.split(".")):
        nested = {part: nested}
    _apply(cfg, nested)
