"""Layered run configuration: defaults <- YAML file <- command-line overrides.

Every section maps onto one module's config dataclass. Unknown sections or
keys are hard errors, and the fully resolved config is echoed into every
output directory so runs stay reproducible from their artifacts alone.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .adaptation import AdaptConfig
from .datagen import GenerativeSpec
from .dcutil import UnknownKeyError, dataclass_from_dict, dataclass_to_dict
from .evaluation import EvalConfig
from .mi import MiSchedule
from .model import WorldModelConfig
from .sparsity import SparsityConfig
from .training import TrainConfig


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class DataConfig:
    n_holdout: int = 3
    n_per_task: int = 12


_SECTIONS = {
    "generator": GenerativeSpec,
    "data": DataConfig,
    "model": WorldModelConfig,
    "train": TrainConfig,
    "mi": MiSchedule,
    "sparsity": SparsityConfig,
    "eval": EvalConfig,
    "adapt": AdaptConfig,
}

# sections that carry their own seed field, all driven by the global seed
# unless the file or an override sets them explicitly
_SEEDED = ("train", "eval", "adapt")


@dataclass
class RunConfig:
    seed: int = 0
    generator: GenerativeSpec = field(default_factory=GenerativeSpec)
    data: DataConfig = field(default_factory=DataConfig)
    model: WorldModelConfig = field(default_factory=WorldModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    mi: MiSchedule = field(default_factory=MiSchedule)
    sparsity: SparsityConfig = field(default_factory=SparsityConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)

    def to_dict(self) -> dict:
        out = {"seed": self.seed}
        for name in _SECTIONS:
            out[name] = dataclass_to_dict(getattr(self, name))
        return out

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def echo_yaml(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))


def _parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    path = key.strip().split(".")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigError(f"override {text!r}: bad value: {e}") from e
    return path, value


def resolve_config(config_file: str | Path | None = None,
                   overrides: list[str] | None = None,
                   seed: int | None = None) -> RunConfig:
    """Merge defaults, an optional YAML file, and key=value overrides."""
    layers: dict = {}
    if config_file is not None:
        text = Path(config_file).read_text()
        loaded = yaml.safe_load(text) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{config_file}: top level must be a mapping")
        layers = loaded
    for item in overrides or []:
        path, value = _parse_override(item)
        node = layers
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {'.'.join(path)} crosses a scalar")
        node[path[-1]] = value
    if seed is not None:
        layers["seed"] = seed

    unknown = sorted(set(layers) - set(_SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown config sections: {unknown}")
    global_seed = int(layers.get("seed", 0))
    sections = {}
    for name, cls in _SECTIONS.items():
        body = dict(layers.get(name) or {})
        if not isinstance(body, dict):
            raise ConfigError(f"section {name!r} must be a mapping")
        if name in _SEEDED and "seed" not in body:
            body["seed"] = global_seed
        try:
            sections[name] = dataclass_from_dict(cls, body)
        except UnknownKeyError as e:
            raise ConfigError(str(e)) from e
        except (TypeError, ValueError) as e:
            raise ConfigError(f"section {name!r}: {e}") from e
    return RunConfig(seed=global_seed, **sections)
