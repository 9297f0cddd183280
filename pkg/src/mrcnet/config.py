"""INI run configuration: one section per component, typed keys, unknown keys rejected.

Example::

    [dataset]
    root = data/DRIVE
    name = drive

    [train]
    rounds = 10
    adversarial = true
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .discriminator import DiscriminatorConfig
from .errors import ConfigError
from .generator import GeneratorConfig
from .losses import LossConfig
from .metrics import AGGREGATIONS
from .training import TrainConfig

DATA_ROOT_ENV = "MRCNET_DATA_ROOT"
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass
class DatasetSection:
    root: str = "data/DRIVE"
    name: str = "drive"
    split_file: str | None = None
    native_eval: bool = False


@dataclass
class EvalSection:
    threshold: float = 0.5
    fov_mask: bool = False
    aggregation: str = "per_image_mean"

    def __post_init__(self) -> None:
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"aggregation must be one of {AGGREGATIONS}, got {self.aggregation!r}")


@dataclass
class OutputSection:
    directory: str = "runs/default"
    overlay: bool = True


@dataclass
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    output: OutputSection = field(default_factory=OutputSection)

    def __post_init__(self) -> None:
        self.train.loss = self.loss
        if self.discriminator.input_size != self.generator.input_size:
            self.discriminator = dataclasses.replace(self.discriminator, input_size=self.generator.input_size)

    def with_seed(self, seed: int) -> "RunConfig":
        return RunConfig(
            dataset=self.dataset,
            generator=dataclasses.replace(self.generator, seed=seed),
            discriminator=dataclasses.replace(self.discriminator, seed=seed),
            loss=self.loss,
            train=dataclasses.replace(self.train, seed=seed),
            eval=self.eval,
            output=self.output,
        )


SECTIONS = {
    "dataset": DatasetSection,
    "generator": GeneratorConfig,
    "discriminator": DiscriminatorConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "eval": EvalSection,
    "output": OutputSection,
}
_SKIP = {("train", "loss")}  # filled from the [loss] section


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in _TRUE:
        return True
    if t in _FALSE:
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_value(section: str, key: str, text: str, default):
    text = text.strip()
    if default is None or (section == "train" and key.startswith("use_")):
        if text.lower() in ("", "none"):
            return None
        return _parse_bool(text) if key.startswith("use_") else text
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if key == "downsample_schedule":
        pairs = []
        for item in filter(None, (p.strip() for p in text.split(","))):
            idx, _, method = item.partition(":")
            pairs.append((int(idx), method.strip()))
        return tuple(pairs)
    if isinstance(default, tuple):
        return tuple(int(p) for p in text.split(",") if p.strip())
    return text


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ", ".join(f"{i}:{m}" for i, m in value)
        return ", ".join(str(v) for v in value)
    return str(value)


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config parse error: {exc}") from exc
    unknown_sections = set(parser.sections()) - set(SECTIONS)
    if unknown_sections:
        raise ConfigError(f"unknown config sections: {sorted(unknown_sections)}")

    built = {}
    for section, cls in SECTIONS.items():
        defaults = cls()
        known = {f.name: getattr(defaults, f.name) for f in fields(cls) if (section, f.name) not in _SKIP}
        kwargs = {}
        if parser.has_section(section):
            for key, raw in parser.items(section):
                if key not in known:
                    raise ConfigError(f"unknown key [{section}] {key}")
                try:
                    kwargs[key] = _parse_value(section, key, raw, known[key])
                except ValueError as exc:
                    raise ConfigError(f"[{section}] {key}: {exc}") from exc
        try:
            built[section] = cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(f"[{section}]: {exc}") from exc
    return RunConfig(**built)


def load_config(path=None) -> RunConfig:
    """Read a config file (or use all defaults) and apply the data-root environment override."""
    if path is None:
        cfg = RunConfig()
    else:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        cfg = parse_config(path.read_text())
    env_root = os.environ.get(DATA_ROOT_ENV)
    if env_root:
        cfg.dataset.root = env_root
    return cfg


def dump_config(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    for section in SECTIONS:
        obj = getattr(cfg, section)
        parser[section] = {
            f.name: _format_value(getattr(obj, f.name))
            for f in fields(obj) if (section, f.name) not in _SKIP
        }
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
