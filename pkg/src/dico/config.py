"""Declarative experiment configuration.

One YAML file with nested sections drives every command; unknown keys are
rejected and all violations are reported at once. The fully-resolved
config is hashed and embedded in checkpoints and result files so outputs
stay traceable to the exact settings that produced them.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from dico.inference import SlidingWindowConfig
from dico.losses import LossWeights
from dico.networks import BackboneConfig
from dico.trainer import TrainConfig
from dico.volume import ViewGeometry


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in self.problems))


@dataclass
class DataConfig:
    manifest: str = ""
    normalize: bool = True
    labeled_fraction: float = 0.05


@dataclass
class ModelConfig:
    m1: BackboneConfig = field(default_factory=lambda: BackboneConfig(kind="conv"))
    m2: BackboneConfig = field(default_factory=lambda: BackboneConfig(kind="transformer"))
    disc_base_channels: int = 16
    disc_layers: int = 4
    view_n1: int = 2
    view_n2: int = 2
    view_n3: int = 1


@dataclass
class MetricsConfig:
    nsd_tolerance: float = 1.0
    connectivity: int = 6


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    inference: SlidingWindowConfig = field(default_factory=SlidingWindowConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    output_dir: str = "runs/default"

    def view_geometry(self) -> ViewGeometry:
        m = self.model
        return ViewGeometry(m.view_n1, m.view_n2, m.view_n3)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]


_TUPLE_FIELDS = {"crop", "window", "grid", "radius_range"}


def _coerce(value, target_type, path, problems):
    if target_type is float and isinstance(value, int):
        return float(value)
    if "tuple" in str(target_type) and isinstance(value, (list, tuple)):
        return tuple(value)
    return value


def _fill_dataclass(cls, raw: dict, path: str, problems: list[str]):
    obj = cls()
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in raw.items():
        if key not in fields:
            problems.append(f"{path}{key}: unknown key")
            continue
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                problems.append(f"{path}{key}: expected a mapping")
                continue
            setattr(obj, key, _fill_dataclass(type(current), value, f"{path}{key}.", problems))
        else:
            value = _coerce(value, type(current), f"{path}{key}", problems)
            try:
                setattr(obj, key, value)
            except (TypeError, ValueError) as e:
                problems.append(f"{path}{key}: {e}")
    try:
        # re-run invariant checks with the final field values
        if hasattr(obj, "__post_init__"):
            obj.__post_init__()
    except (TypeError, ValueError) as e:
        problems.append(f"{path.rstrip('.') or 'config'}: {e}")
    return obj


def parse_override(expr: str):
    """Parse a ``section.key=value`` command-line override."""
    if "=" not in expr:
        raise ConfigError([f"override {expr!r}: expected section.key=value"])
    key, _, value = expr.partition("=")
    return key.strip(), yaml.safe_load(value)


def _apply_override(raw: dict, dotted: str, value):
    parts = dotted.split(".")
    node = raw
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError([f"override {dotted}: {p} is not a section"])
    node[parts[-1]] = value


def load_config(path=None, overrides: list[str] | None = None) -> ExperimentConfig:
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError([f"config file not found: {p}"])
        loaded = yaml.safe_load(p.read_text())
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError([f"{p}: top level must be a mapping"])
        raw = loaded
    for expr in overrides or []:
        key, value = parse_override(expr)
        _apply_override(raw, key, value)
    problems: list[str] = []
    cfg = _fill_dataclass(ExperimentConfig, raw, "", problems)
    if problems:
        raise ConfigError(problems)
    return cfg


def dump_config(cfg: ExperimentConfig, path):
    with open(path, "w") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=True)
