"""
Run Configuration Helper Module

This module reads the flat ``section.key = value`` run configuration, applies
command-line overrides and hands out the typed per-module configurations.
"""

import hashlib
import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, List, Optional, Tuple, Union, get_args, get_origin, get_type_hints

from .backbone import BackboneConfig
from .errors import ConfigError
from .model import ExpressionModel, build_model
from .numerics import Precision
from .train import TrainConfig

logger = logging.getLogger(__name__)

ARCHITECTURE_SECTIONS = ("backbone", "cbam", "sequence")
# Flag aliases accepted next to --section.key
ALIASES = {"lr": "train.learning_rate", "seed": "train.seed", "iterations": "train.max_iterations"}
# Keys that do not change tensor shapes and stay out of the architecture digest.
_NON_ARCHITECTURE_KEYS = {"backbone.freeze", "backbone.bn_momentum", "backbone.bn_epsilon"}


@dataclass
class BackboneSection:
    stage_blocks: Tuple[int, ...] = (3, 4, 23, 3)
    base_width: int = 64
    input_size: int = 256
    use_cbam: bool = True
    freeze: bool = False
    bn_momentum: float = 0.1
    bn_epsilon: float = 1e-5


@dataclass
class CbamSection:
    reduction_ratio: int = 16
    spatial_kernel: int = 7


@dataclass
class SequenceSection:
    hidden_size: int = 128
    head_hidden: int = 64


@dataclass
class DataSection:
    frames_root: str = "data/frames"
    annotations_root: str = "data/annotations"
    workers: int = 1
    eval_batch_clips: int = 4


@dataclass
class RunSection:
    precision: int = 32
    deterministic: bool = True


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise ValueError(f"'{text}' is not a boolean")


def _parse_value(kind: Any, text: str) -> Any:
    text = text.strip()
    if kind is bool:
        return _parse_bool(text)
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    if kind is str:
        return text
    if get_origin(kind) is tuple:
        item = get_args(kind)[0]
        return tuple(_parse_value(item, part) for part in text.split(",") if part.strip())
    raise TypeError(f"unsupported config field type {kind!r}")


def _render_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


@dataclass
class RunConfig:
    """Every configurable value of a run, grouped by section"""

    backbone: BackboneSection = field(default_factory=BackboneSection)
    cbam: CbamSection = field(default_factory=CbamSection)
    sequence: SequenceSection = field(default_factory=SequenceSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataSection = field(default_factory=DataSection)
    run: RunSection = field(default_factory=RunSection)

    def keys(self) -> List[str]:
        return sorted(f"{s.name}.{f.name}" for s in fields(self) for f in fields(getattr(self, s.name)))

    def set(self, key: str, text: str) -> None:
        """
        Assign one value from its text form

        Args:
            key: ``section.key`` or a flag alias
            text: Value text
        """
        key = ALIASES.get(key, key)
        section_name, _, name = key.partition(".")
        section = getattr(self, section_name, None) if section_name in {f.name for f in fields(self)} else None
        if section is None or name not in {f.name for f in fields(section)}:
            raise ConfigError(f"unknown config key '{key}'")
        kind = get_type_hints(type(section))[name]
        try:
            value = _parse_value(kind, text)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{key}: {e}") from None
        setattr(self, section_name, replace(section, **{name: value}))

    def get(self, key: str) -> Any:
        section_name, _, name = ALIASES.get(key, key).partition(".")
        return getattr(getattr(self, section_name), name)

    def items(self, sections: Optional[Iterable[str]] = None) -> List[Tuple[str, str]]:
        wanted = set(sections) if sections is not None else None
        return [(key, _render_value(self.get(key))) for key in self.keys()
                if wanted is None or key.split(".")[0] in wanted]

    def to_text(self) -> str:
        """Canonical file form: sorted ``key = value`` lines"""
        return "".join(f"{key} = {value}\n" for key, value in self.items())

    def architecture_digest(self) -> str:
        """sha256 over the shape-determining backbone, cbam and sequence keys"""
        lines = [f"{k}={v}" for k, v in self.items(ARCHITECTURE_SECTIONS) if k not in _NON_ARCHITECTURE_KEYS]
        return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()

    @property
    def precision(self) -> Precision:
        try:
            return Precision.from_bits(self.run.precision)
        except ValueError as e:
            raise ConfigError(f"run.precision: {e}") from None

    def backbone_config(self) -> BackboneConfig:
        b = self.backbone
        config = BackboneConfig(
            stage_blocks=tuple(b.stage_blocks),
            base_width=b.base_width,
            input_size=b.input_size,
            reduction_ratio=self.cbam.reduction_ratio,
            spatial_kernel=self.cbam.spatial_kernel,
            use_cbam=b.use_cbam,
            bn_momentum=b.bn_momentum,
            bn_epsilon=b.bn_epsilon,
        )
        config.validate()
        return config

    def build_model(self) -> ExpressionModel:
        """Freshly initialized model for this configuration, seeded by train.seed"""
        return build_model(self.backbone_config(), self.sequence.hidden_size, self.sequence.head_hidden,
                           self.train.seed, self.precision, self.backbone.freeze)

    def validate(self) -> None:
        self.backbone_config()
        self.train.validate()
        _ = self.precision
        if self.sequence.hidden_size < 1 or self.sequence.head_hidden < 0:
            raise ConfigError("sequence.hidden_size must be positive and sequence.head_hidden non-negative")
        if self.data.workers < 1 or self.data.eval_batch_clips < 1:
            raise ConfigError("data.workers and data.eval_batch_clips must be positive")


def parse_config_text(text: str, config: Optional[RunConfig] = None, source: str = "<text>") -> RunConfig:
    """
    Apply ``section.key = value`` lines to a configuration

    Args:
        text: File contents; ``#`` starts a comment, blank lines are ignored
        config: Configuration to update (defaults when None)
        source: Name used in error messages

    Returns:
        The updated configuration
    """
    config = config or RunConfig()
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{number}: expected 'key = value', got '{raw.strip()}'")
        try:
            config.set(key.strip(), value)
        except ConfigError as e:
            raise ConfigError(f"{source}:{number}: {e}") from None
    return config


class ConfigHelper:
    """Resolves a run configuration from an optional file plus overrides"""

    def __init__(self, path: Optional[Union[str, Path]] = None,
                 overrides: Iterable[Tuple[str, str]] = ()):
        """
        Initialize configuration helper

        Args:
            path: Config file; defaults apply when None
            overrides: (key, value) pairs applied after the file, in order
        """
        self.path = Path(path) if path is not None else None
        self.overrides = list(overrides)
        self._config: Optional[RunConfig] = None

    def add_override(self, key: str, value: str) -> None:
        self.overrides.append((key, value))
        self._config = None

    def get_config(self) -> RunConfig:
        """
        Build (once) and validate the configuration

        Returns:
            RunConfig
        """
        if self._config is None:
            config = RunConfig()
            if self.path is not None:
                try:
                    text = self.path.read_text()
                except OSError as e:
                    raise ConfigError(f"cannot read config file {self.path}: {e}") from None
                parse_config_text(text, config, str(self.path))
            for key, value in self.overrides:
                config.set(key, value)
            config.validate()
            logger.debug(f"Run configuration:\n{config.to_text()}")
            self._config = config
        return self._config


def load_run_config(path: Optional[Union[str, Path]] = None,
                    overrides: Iterable[Tuple[str, str]] = ()) -> RunConfig:
    """
    Load and validate a run configuration

    Args:
        path: Config file or None for defaults
        overrides: (key, value) pairs; later pairs win

    Returns:
        RunConfig
    """
    return ConfigHelper(path, overrides).get_config()


def split_overrides(argv: Iterable[str]) -> List[Tuple[str, str]]:
    """
    Turn ``--section.key value`` / ``--section.key=value`` / alias flags into pairs

    Args:
        argv: Remaining command-line tokens

    Returns:
        (key, value) pairs in order
    """
    pairs: List[Tuple[str, str]] = []
    tokens = list(argv)
    i = 0
    while i < len(tokens):
        token = tokens[i]
        if not token.startswith("--"):
            raise ConfigError(f"unexpected argument '{token}'")
        key, eq, value = token[2:].partition("=")
        if not eq:
            if i + 1 >= len(tokens):
                raise ConfigError(f"flag --{key} needs a value")
            value = tokens[i + 1]
            i += 1
        if key not in ALIASES and "." not in key:
            raise ConfigError(f"unknown option --{key}")
        pairs.append((key, value))
        i += 1
    return pairs
