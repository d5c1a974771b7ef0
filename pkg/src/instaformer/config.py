"""JSON run configuration: one document covering every tunable section.

Layout (all keys optional; omitted keys take their defaults)::

    {
      "lr": 2e-4, "batch": 2, "steps": 2000, ..., "dtype": "float64",
      "weights":    {"glob": 1, "ins": 1, "style": 10, "img": 5},
      "backbone":   {"image_size": 64, "base_channels": 16, ...},
      "aggregator": {"patch_stride": 2, "token_dim": 64, ...},
      "nce":        {"temperature": 0.07, "layers": ["conv1", "conv2", "content"], ...},
      "paths":      {"data_a": null, "data_b": null, "out": null}
    }
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .aggregator import AggregatorConfig
from .backbone import BackboneConfig
from .losses import LossWeights, NceConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Invalid or unreadable run configuration."""


@dataclass(frozen=True)
class Paths:
    data_a: str | None = None
    data_b: str | None = None
    out: str | None = None


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: Paths = field(default_factory=Paths)

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self.train)
        d["nce"]["layers"] = list(d["nce"]["layers"])
        d["paths"] = dataclasses.asdict(self.paths)
        return d


_SECTIONS = {"weights": LossWeights, "backbone": BackboneConfig, "aggregator": AggregatorConfig,
             "nce": NceConfig}


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"unknown config key {where + '.' if where else ''}{key!r}")
    kwargs = dict(data)
    if cls is NceConfig and "layers" in kwargs:
        kwargs["layers"] = tuple(kwargs["layers"])
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where or 'config'}: {err}") from None


def from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    data = dict(data)
    paths = _build(Paths, data.pop("paths", {}), "paths")
    sections = {name: _build(cls, data.pop(name, {}), name) for name, cls in _SECTIONS.items()}
    train_names = {f.name for f in dataclasses.fields(TrainConfig)} - set(_SECTIONS)
    for key in data:
        if key not in train_names:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        train = TrainConfig(**data, **sections)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"config: {err}") from None
    return RunConfig(train, paths)


def load(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"{p}: invalid JSON ({err})") from None
    return from_dict(data)


def dump(cfg: RunConfig) -> str:
    return json.dumps(cfg.as_dict(), indent=2) + "\n"
