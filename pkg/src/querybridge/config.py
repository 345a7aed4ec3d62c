"""Run configuration: one JSON file per run, strict validation, CLI overrides.

Every field is validated before any work starts; unknown keys are rejected
with the offending key in the message. A resolved snapshot is written beside
outputs so a run can be reproduced from it.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .backbone import BackboneConfig
from .connector import ConnectorConfig
from .diffusion import DiffusionConfig
from .errors import ConfigError
from .queries import SOURCE_LEARNABLE
from .training import FreezePolicy, ObjectiveSpec, ScheduleConfig


@dataclass(frozen=True)
class QueriesConfig:
    num_tokens: int = 16
    source: str = SOURCE_LEARNABLE
    init_seed: int = 1

    def __post_init__(self):
        if self.num_tokens <= 0:
            raise ValueError("num_tokens must be positive")


@dataclass(frozen=True)
class DataConfig:
    dataset_size: int = 3000
    dataset_seed: int = 100
    batch_size: int = 16
    manifest: str | None = None          # curate input / instruction image manifest
    images_root: str | None = None       # root for image_refs in JSONL files
    samples: str | None = None           # curation output JSONL (instruction objective)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    max_steps: int | None = None
    backbone_pretrain_steps: int = 300
    checkpoint: str | None = None        # resume / eval / sample source


@dataclass
class RunConfig:
    seed: int = 0
    deterministic: bool = False
    output_dir: str = "runs/out"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    queries: QueriesConfig = field(default_factory=QueriesConfig)
    connector: ConnectorConfig = field(default_factory=ConnectorConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    objective: ObjectiveSpec = field(default_factory=ObjectiveSpec)
    freeze: FreezePolicy = field(default_factory=FreezePolicy)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


_SECTIONS = {
    "backbone": BackboneConfig,
    "queries": QueriesConfig,
    "connector": ConnectorConfig,
    "diffusion": DiffusionConfig,
    "schedule": ScheduleConfig,
    "objective": ObjectiveSpec,
    "freeze": FreezePolicy,
    "data": DataConfig,
    "train": TrainConfig,
}
_SCALARS = {"seed": int, "deterministic": bool, "output_dir": str}


def _build_section(name: str, cls, values: dict):
    allowed = {f.name for f in fields(cls)}
    for key in values:
        if key not in allowed:
            raise ConfigError(f"unknown config key '{name}.{key}'")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config section {name!r}: {exc}") from exc


def from_dict(raw: dict) -> RunConfig:
    cfg = RunConfig()
    for key, value in raw.items():
        if key in _SCALARS:
            if not isinstance(value, _SCALARS[key]):
                raise ConfigError(
                    f"config key {key!r} must be {_SCALARS[key].__name__}, got {value!r}"
                )
            setattr(cfg, key, value)
        elif key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key!r} must be an object")
            setattr(cfg, key, _build_section(key, _SECTIONS[key], value))
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return cfg


def load(path: str | Path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    return from_dict(raw)


def to_dict(cfg: RunConfig) -> dict:
    out = {name: getattr(cfg, name) for name in _SCALARS}
    for name in _SECTIONS:
        out[name] = asdict(getattr(cfg, name))
    return out


def _coerce(text: str, like) -> object:
    if isinstance(like, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {text!r}")
    if like is None:
        if text.lower() in ("null", "none"):
            return None
        try:
            return json.loads(text)
        except json.JSONDecodeError:
            return text
    if isinstance(like, int) and not isinstance(like, bool):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply --set section.key=value (or key=value) assignments."""
    raw = to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        dotted, text = item.split("=", 1)
        parts = dotted.split(".")
        if len(parts) == 1:
            key = parts[0]
            if key not in _SCALARS:
                raise ConfigError(f"unknown config key {key!r}")
            raw[key] = _coerce(text, raw[key])
        elif len(parts) == 2:
            section, key = parts
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section {section!r}")
            if key not in raw[section]:
                raise ConfigError(f"unknown config key {section}.{key!r}")
            raw[section][key] = _coerce(text, raw[section][key])
        else:
            raise ConfigError(f"override key {dotted!r} has too many parts")
    return from_dict(raw)


def save_snapshot(cfg: RunConfig, out_dir: str | Path, name: str = "config.json") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n")
    return path
