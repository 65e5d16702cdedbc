"""
Module for the run configuration.

A RunConfig is flat: every hyperparameter, path and logging option is one
field with a default, so an empty configuration runs the desk-scale
MNIST -> MNIST pipeline. Two file syntaxes map onto it:

- ``key = value`` lines with ``#`` comments (parse_config)
- YAML whose top-level sections only group keys (load_config on .yaml/.yml)
"""

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple, Union

import yaml

from src.latent_domain_transfer.exceptions import ConfigError

logger = logging.getLogger(__name__)

DATASETS = ("mnist", "fashion")
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


@dataclass
class RunConfig:
    # data
    mnist_dir: str = "data/mnist"
    fashion_dir: str = "data/fashion"
    domain2_dataset: str = "mnist"
    domain1_classes: Tuple[int, ...] = (0, 1, 2, 3, 4)
    domain2_classes: Tuple[int, ...] = (5, 6, 7, 8, 9)
    conditional_map: str = ""
    shuffle_seed: Optional[int] = None
    train_size: Optional[int] = 2000
    strict_domains: bool = False
    # model
    latent_dim: int = 100
    alpha: float = 0.1
    base_channels: int = 32
    encoder_hidden: int = 256
    gan_hidden: int = 512
    gan_layers: int = 4
    use_mean_conditional: bool = False
    # losses
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda_reg: float = 0.1
    # training
    batch_size: int = 64
    vae_epochs: int = 20
    vae_lr: float = 1e-3
    vae_beta1: float = 0.9
    transfer_steps: int = 3000
    gan_lr: float = 2e-4
    gan_beta1: float = 0.5
    adam_beta2: float = 0.999
    classifier_epochs: int = 3
    classifier_lr: float = 1e-3
    log_interval: int = 100
    # evaluation
    samples_per_class: int = 200
    n_shuffles: int = 3
    grid_per_class: int = 2
    diversity_samples: int = 8
    # run
    seed: int = 0
    out_dir: str = "runs/default"
    log_level: str = "INFO"
    log_format: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    log_file: Optional[str] = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        """
        Check value ranges and cross-field constraints.

        Raises:
            ConfigError: On the first violated constraint.
        """
        for item in dataclasses.fields(self):
            value = getattr(self, item.name)
            if isinstance(value, (int, float)) and not isinstance(value, bool) and value < 0:
                raise ConfigError(f"{item.name} must be non-negative, got {value}")
        if self.latent_dim < 1:
            raise ConfigError(f"latent_dim must be at least 1, got {self.latent_dim}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be at least 2, got {self.batch_size}")
        if self.base_channels < 2 or self.base_channels % 2:
            raise ConfigError(f"base_channels must be even and at least 2, got {self.base_channels}")
        if self.gan_layers < 1:
            raise ConfigError(f"gan_layers must be at least 1, got {self.gan_layers}")
        if self.train_size == 0:
            raise ConfigError("train_size must be positive or 'full'")
        if self.domain2_dataset not in DATASETS:
            raise ConfigError(f"domain2_dataset must be one of {DATASETS}, got '{self.domain2_dataset}'")
        if self.log_level.upper() not in LOG_LEVELS:
            raise ConfigError(f"log_level must be one of {LOG_LEVELS}, got '{self.log_level}'")
        for name in ("domain1_classes", "domain2_classes"):
            classes = getattr(self, name)
            if not classes or any(c < 0 or c > 9 for c in classes) or len(set(classes)) != len(classes):
                raise ConfigError(f"{name} must be distinct class ids in 0-9, got {classes}")
        if self.domain2_dataset == "mnist" and set(self.domain1_classes) & set(self.domain2_classes):
            raise ConfigError("MNIST -> MNIST domains must have disjoint class sets")
        if len(self.domain1_classes) != len(self.domain2_classes):
            raise ConfigError("Both domains need the same number of classes for a bijective map")

    @property
    def output_dir(self) -> Path:
        return Path(self.out_dir)

    def to_dict(self) -> Dict[str, Any]:
        values = dataclasses.asdict(self)
        for name in ("domain1_classes", "domain2_classes"):
            values[name] = list(values[name])
        return values

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def save(self, path: Union[str, Path]) -> Path:
        """Write the effective configuration as YAML."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            yaml.safe_dump(self.to_dict(), f, default_flow_style=False, sort_keys=False)
        return path


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("true", "yes", "on", "1"):
        return True
    if lowered in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {raw}")


def _parse_optional_int(raw: str) -> Optional[int]:
    return None if raw.strip().lower() in ("", "none", "null") else int(raw)


def _parse_train_size(raw: str) -> Optional[int]:
    return None if raw.strip().lower() in ("full", "none", "") else int(raw)


def _parse_optional_str(raw: str) -> Optional[str]:
    return raw.strip() or None


def _parse_classes(raw: str) -> Tuple[int, ...]:
    return tuple(int(part) for part in raw.replace(" ", "").split(",") if part)


_PARSERS: Dict[str, Callable[[str], Any]] = {
    "shuffle_seed": _parse_optional_int,
    "train_size": _parse_train_size,
    "log_file": _parse_optional_str,
    "domain1_classes": _parse_classes,
    "domain2_classes": _parse_classes,
}

_TYPE_NAMES = {int: "integer", float: "number", bool: "boolean", str: "string"}


def _field_defaults() -> Dict[str, Any]:
    return {item.name: item.default for item in dataclasses.fields(RunConfig)}


def convert_value(key: str, raw: Any) -> Any:
    """
    Convert a raw value (text, or a YAML scalar/list) to the type of ``key``.

    Raises:
        ConfigError: If the key is unknown or the value does not parse.
    """
    defaults = _field_defaults()
    if key not in defaults:
        raise ConfigError(f"Unknown configuration key '{key}'")
    if isinstance(raw, (list, tuple)):
        raw = ",".join(str(item) for item in raw)
    elif raw is None:
        raw = ""
    text = str(raw).strip()

    if key in _PARSERS:
        parser = _PARSERS[key]
    else:
        kind = type(defaults[key])
        parser = _parse_bool if kind is bool else kind
    try:
        return parser(text)
    except ValueError:
        expected = _TYPE_NAMES.get(type(defaults[key]), "value")
        raise ConfigError(f"Cannot parse '{text}' for key '{key}' as {expected}") from None


def parse_config(text: str) -> RunConfig:
    """
    Parse ``key = value`` lines into a RunConfig.

    Blank lines and ``#`` comments are ignored; missing keys keep their
    defaults.

    Raises:
        ConfigError: On a malformed line, unknown key or unparsable value,
            naming the line number.
    """
    values: Dict[str, Any] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        if "=" not in content:
            raise ConfigError(f"Line {number}: expected 'key = value', got '{content}'")
        key, raw = (part.strip() for part in content.split("=", 1))
        if not key:
            raise ConfigError(f"Line {number}: missing key")
        try:
            values[key] = convert_value(key, raw)
        except ConfigError as e:
            raise ConfigError(f"Line {number}: {e}") from None
    return RunConfig(**values)


def config_from_mapping(data: Optional[Dict[str, Any]]) -> RunConfig:
    """
    Build a RunConfig from a YAML mapping whose sections group flat keys.
    """
    values: Dict[str, Any] = {}
    for section, content in (data or {}).items():
        items = content.items() if isinstance(content, dict) else [(section, content)]
        for key, raw in items:
            if key in values:
                raise ConfigError(f"Key '{key}' appears in more than one section")
            values[key] = convert_value(key, raw)
    return RunConfig(**values)


def load_config(config_path: Union[str, Path]) -> RunConfig:
    """
    Load a configuration file, YAML or ``key = value`` by extension.

    Raises:
        ConfigError: If the file is missing or invalid.
    """
    path = Path(config_path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"Error loading configuration from {path}: {e}") from None

    if path.suffix in (".yaml", ".yml"):
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigError(f"Invalid YAML in {path}: {e}") from None
        if data is not None and not isinstance(data, dict):
            raise ConfigError(f"{path} must hold a mapping of sections")
        config = config_from_mapping(data)
    else:
        config = parse_config(text)
    logger.debug(f"Loaded configuration from {path}")
    return config
