"""
Experiment Configuration

`ExperimentConfig` gathers every section of a run:

    [model] [alignment] [consistency] [matching] [train] [ablation] [shift] [paths]

Files are TOML or JSON (chosen by suffix). Values are resolved with the
precedence  command-line overrides > SFA_SEED environment variable > file >
dataclass defaults. Unknown sections or keys are rejected.
"""

from __future__ import annotations

import json
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Sequence

from src import __version__
from src.data.synthetic_scenes import SHIFT_PRESETS, ShiftConfig
from src.errors import ConfigError
from src.losses.alignment import AlignmentConfig
from src.losses.consistency import ConsistencyConfig
from src.losses.matching import LossWeights
from src.models.detection_transformer import ModelConfig
from src.training.trainer import AblationFlags, TrainConfig

SEED_ENV = "SFA_SEED"
RESOLVED_CONFIG_FILE = "resolved_config.json"


@dataclass
class PathsConfig:
    data_dir: str = "data"
    output_dir: str = "runs/default"

    def validate(self) -> "PathsConfig":
        return self


SECTIONS = {
    "model": ModelConfig,
    "alignment": AlignmentConfig,
    "consistency": ConsistencyConfig,
    "matching": LossWeights,
    "train": TrainConfig,
    "ablation": AblationFlags,
    "shift": ShiftConfig,
    "paths": PathsConfig,
}


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    consistency: ConsistencyConfig = field(default_factory=ConsistencyConfig)
    matching: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: AblationFlags = field(default_factory=AblationFlags)
    shift: ShiftConfig = field(default_factory=ShiftConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> "ExperimentConfig":
        for name in SECTIONS:
            getattr(self, name).validate()
        return self

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ExperimentConfig":
        config = cls()
        config.update(data)
        return config

    def update(self, data: Mapping[str, Any]) -> "ExperimentConfig":
        """Merge a nested {section: {key: value}} mapping into this config."""
        for section, values in data.items():
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            if not isinstance(values, Mapping):
                raise ConfigError(f"[{section}] must be a table of key = value pairs")
            values = dict(values)
            if section == "shift" and "preset" in values:
                preset = values.pop("preset")
                if preset not in SHIFT_PRESETS:
                    raise ConfigError(f"unknown shift preset {preset!r}; choose from {sorted(SHIFT_PRESETS)}")
                self.shift = ShiftConfig(**asdict(SHIFT_PRESETS[preset]))
            target = getattr(self, section)
            known = {f.name for f in fields(target)}
            for key, value in values.items():
                if key not in known:
                    raise ConfigError(f"unknown key {section}.{key}")
                setattr(target, key, value)
        return self

    def set(self, assignment: str) -> "ExperimentConfig":
        """Apply one `section.key=value` override; the value is parsed as TOML when possible."""
        if "=" not in assignment or "." not in assignment.split("=", 1)[0]:
            raise ConfigError(f"override {assignment!r} is not of the form section.key=value")
        path, raw = assignment.split("=", 1)
        section, key = path.strip().split(".", 1)
        return self.update({section: {key: parse_value(raw.strip())}})

    @property
    def seed(self) -> int:
        return self.train.seed


def parse_value(raw: str) -> Any:
    try:
        return tomllib.loads(f"value = {raw}")["value"]
    except tomllib.TOMLDecodeError:
        return raw


def read_config_file(path: Path | str) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        if path.suffix == ".json":
            return json.loads(path.read_text(encoding="utf-8"))
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def load_config(path: Path | str | None = None, overrides: Sequence[str] = (),
                env: Mapping[str, str] | None = None) -> ExperimentConfig:
    """
    Resolve a configuration.

    Parameters
    ----------
    path : path, optional
        TOML or JSON file.
    overrides : sequence of str
        `section.key=value` assignments applied last.
    env : mapping, optional
        Environment to read SFA_SEED from, default `os.environ`.

    Returns
    -------
    ExperimentConfig
        Validated.
    """
    config = ExperimentConfig()
    if path is not None:
        config.update(read_config_file(path))
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            config.train.seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    for assignment in overrides:
        config.set(assignment)
    return config.validate()


def write_resolved_config(config: ExperimentConfig, output_dir: Path | str) -> Path:
    """Write the effective configuration, seed and code version of a run."""
    path = Path(output_dir) / RESOLVED_CONFIG_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    document = {"version": __version__, "seed": config.seed, "config": config.to_dict()}
    path.write_text(json.dumps(document, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


__all__ = [
    "SEED_ENV",
    "RESOLVED_CONFIG_FILE",
    "PathsConfig",
    "SECTIONS",
    "ExperimentConfig",
    "parse_value",
    "read_config_file",
    "load_config",
    "write_resolved_config",
]
