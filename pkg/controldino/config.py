# controldino/config.py
"""Run configuration.

A run is described by a flat ``key=value`` file (read with python-dotenv) whose
dotted keys address one section dataclass each, e.g. ``control.blocks=4`` or
``augment.weights=real:1``. Command-line flags override single keys.
"""

import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from django.conf import settings
from dotenv import dotenv_values

from .augment import AugmentConfig
from .backbone import BackboneConfig
from .control import ControlConfig
from .errors import ContractError
from .features import EncoderSpec
from .rollout import SampleConfig
from .temporal import AdapterConfig
from .trainer import TrainConfig

logger = logging.getLogger(__name__)

# config key → dataclass field, where they differ
KEY_ALIASES = {
    "control.scale": "control.residual_scale",
    "control.width": "control.branch_width",
    "features.downscale": "train.feature_downscale",
}

TRUE_VALUES = {"1", "true", "yes", "on"}
FALSE_VALUES = {"0", "false", "no", "off"}


@dataclass
class DataConfig:
    root: str = ""
    frames: int = 5
    height: int = 32
    width: int = 32
    clips: int = 4
    prompt: str = "a moving shape"

    def __post_init__(self):
        if self.frames < 1 or (self.frames - 1) % 4:
            raise ContractError(f"data.frames={self.frames} must satisfy ≡ 1 (mod 4)")

    def resolved_root(self) -> str:
        return self.root or getattr(settings, "CDK_DATA_ROOT", "")


def _toy_control():
    return ControlConfig(blocks=4, branch_width=32)


def _toy_adapter():
    return AdapterConfig(channels=(32, 32))


SECTIONS = {
    "backbone": BackboneConfig,
    "control": ControlConfig,
    "adapter": AdapterConfig,
    "encoder": EncoderSpec,
    "augment": AugmentConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "sample": SampleConfig,
}


@dataclass
class RunConfig:
    """All sections of a run. Defaults describe the desk-scale toy setup."""

    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    control: ControlConfig = field(default_factory=_toy_control)
    adapter: AdapterConfig = field(default_factory=_toy_adapter)
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        unknown = set(data) - set(SECTIONS)
        if unknown:
            raise ContractError(f"unknown config section(s) {sorted(unknown)}")
        defaults = cls()
        sections = {}
        for name in SECTIONS:
            values = dict(data.get(name, {}))
            base = getattr(defaults, name)
            for key, value in values.items():
                if not hasattr(base, key):
                    raise ContractError(f"unknown config key {name}.{key}")
                if isinstance(getattr(base, key), tuple) and isinstance(value, list):
                    values[key] = tuple(value)
            sections[name] = replace(base, **values)
        return cls(**sections)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls().override(read_config_file(path))

    def override(self, values: dict) -> "RunConfig":
        """New config with dotted `values` (strings or already-typed) applied."""
        updates = {}
        for key, raw in values.items():
            section, name = _resolve_key(key)
            current = getattr(getattr(self, section), name)
            updates.setdefault(section, {})[name] = _coerce(key, raw, current)
        sections = {}
        for section in SECTIONS:
            base = getattr(self, section)
            sections[section] = replace(base, **updates[section]) if section in updates else base
        return RunConfig(**sections)


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ContractError(f"config file {path} does not exist")
    raw = dotenv_values(path)
    logger.debug("loaded %d keys from %s", len(raw), path)
    return raw


def _resolve_key(key: str):
    target = KEY_ALIASES.get(key, key)
    section, _, name = target.partition(".")
    if section not in SECTIONS or not name or name not in {f.name for f in fields(SECTIONS[section])}:
        raise ContractError(f"unknown config key {key!r}")
    return section, name


def _coerce(key: str, raw, current):
    if raw is None:
        raise ContractError(f"config key {key!r} has no value")
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if isinstance(current, bool):
            lowered = text.lower()
            if lowered in TRUE_VALUES:
                return True
            if lowered in FALSE_VALUES:
                return False
            raise ValueError(text)
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        if isinstance(current, tuple):
            item = type(current[0]) if current else str
            return tuple(item(part.strip()) for part in text.split(",") if part.strip())
        if isinstance(current, dict):
            out = {}
            for part in text.split(","):
                name, sep, value = part.partition(":")
                if not sep:
                    raise ValueError(part)
                out[name.strip()] = float(value)
            return out
    except ValueError:
        raise ContractError(f"config key {key!r}: cannot parse {raw!r} like {current!r}") from None
    return text
