"""Configuration management for avm-lab."""

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

from dotenv import load_dotenv

from .errors import ConfigError

# Load environment variables from .env file
load_dotenv()

logger = logging.getLogger(__name__)

VARIANTS = ("plain", "avm", "avm-s", "avm-b")


@dataclass
class BackboneConfig:
    """Shape of the frozen visual encoder."""

    image_h: int = 36
    image_w: int = 64
    patch: int = 4
    embed_dim: int = 64
    num_blocks: int = 4
    num_heads: int = 4
    behavior_dim: int = 5
    layernorm_enabled: bool = False
    seed: int = 0

    def validate(self) -> None:
        for name in ("image_h", "image_w", "patch", "embed_dim", "num_heads", "behavior_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"backbone.{name} must be >= 1, got {getattr(self, name)}")
        if self.image_h % self.patch or self.image_w % self.patch:
            raise ConfigError(
                f"image size {self.image_h}x{self.image_w} is not divisible by patch {self.patch}"
            )
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"backbone.embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}"
            )
        if self.num_blocks < 1:
            raise ConfigError(f"backbone.num_blocks must be >= 1, got {self.num_blocks}")

    @property
    def grid_h(self) -> int:
        return self.image_h // self.patch

    @property
    def grid_w(self) -> int:
        return self.image_w // self.patch

    @property
    def num_tokens(self) -> int:
        return self.grid_h * self.grid_w


@dataclass
class ModulationConfig:
    """Which modulation wiring to attach and how large each unit is."""

    variant: str = "plain"
    bottleneck_dim: int = 31
    weight: float = 1.0
    seed: int = 1

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"modulation.variant must be one of {VARIANTS}, got '{self.variant}'")
        if self.bottleneck_dim < 1:
            raise ConfigError(f"modulation.bottleneck_dim must be >= 1, got {self.bottleneck_dim}")


@dataclass
class ReadoutConfig:
    """Gaussian readout options."""

    bias: bool = False
    train_in_phase2: bool = True
    init_sigma: float = 0.25
    seed: int = 2

    def validate(self) -> None:
        if self.init_sigma <= 0:
            raise ConfigError(f"readout.init_sigma must be positive, got {self.init_sigma}")


@dataclass
class TrainConfig:
    """Optimization schedule shared by both training phases."""

    batch_size: int = 16
    lr: float = 0.0016
    max_epochs: int = 400
    plateau_patience: int = 10
    lr_decay_factor: float = 0.3
    weight_decay: float = 1e-4
    max_decays_before_stop: int = 3
    improvement_threshold: float = 1e-6
    loss_eps: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    prefetch: bool = True
    seed: int = 0

    def validate(self) -> None:
        for name in ("batch_size", "max_epochs", "plateau_patience", "max_decays_before_stop"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name} must be >= 1, got {getattr(self, name)}")
        for name in ("lr", "loss_eps", "adam_eps", "improvement_threshold"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"train.{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0:
            raise ConfigError(f"train.weight_decay must be >= 0, got {self.weight_decay}")
        if not 0 < self.lr_decay_factor < 1:
            raise ConfigError(f"train.lr_decay_factor must be in (0, 1), got {self.lr_decay_factor}")
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(f"train.{name} must be in [0, 1), got {getattr(self, name)}")


@dataclass
class WorldConfig:
    """Synthetic V1 world used in place of recorded data."""

    num_neurons: int = 200
    image_h: int = 36
    image_w: int = 64
    behavior_dim: int = 5
    num_train_images: int = 2000
    num_test_images: int = 50
    test_repeats: int = 10
    val_fraction: float = 0.1
    spectral_exponent: float = 2.0
    gabor_frequency_range: tuple[float, float] = (1.0, 3.0)
    gabor_sigma_range: tuple[float, float] = (0.15, 0.35)
    amplitude_range: tuple[float, float] = (1.0, 2.5)
    baseline_range: tuple[float, float] = (-0.5, 0.5)
    behavior_gain_scale: float = 0.3
    poisson_sampling: bool = True
    seed: int = 7

    def validate(self) -> None:
        for name in ("num_neurons", "image_h", "image_w", "behavior_dim", "num_train_images", "num_test_images"):
            if getattr(self, name) < 1:
                raise ConfigError(f"world.{name} must be >= 1, got {getattr(self, name)}")
        if self.test_repeats < 2:
            raise ConfigError(f"world.test_repeats must be >= 2, got {self.test_repeats}")
        if not 0 < self.val_fraction < 1:
            raise ConfigError(f"world.val_fraction must be in (0, 1), got {self.val_fraction}")
        for name in ("gabor_frequency_range", "gabor_sigma_range", "amplitude_range", "baseline_range"):
            low, high = getattr(self, name)
            if low > high:
                raise ConfigError(f"world.{name} must be (low, high), got {(low, high)}")


@dataclass
class PathsConfig:
    """Default locations for run artifacts."""

    output_dir: Path = Path("./runs")
    data_dir: Optional[Path] = None


@dataclass
class RunConfig:
    """Effective configuration of one run."""

    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    modulation: ModulationConfig = field(default_factory=ModulationConfig)
    readout: ReadoutConfig = field(default_factory=ReadoutConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    world: WorldConfig = field(default_factory=WorldConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    log_level: str = "INFO"

    def validate(self) -> "RunConfig":
        for section in (self.backbone, self.modulation, self.readout, self.train, self.world):
            section.validate()
        if (self.world.image_h, self.world.image_w) != (self.backbone.image_h, self.backbone.image_w):
            raise ConfigError(
                f"world image size {self.world.image_h}x{self.world.image_w} differs from "
                f"backbone image size {self.backbone.image_h}x{self.backbone.image_w}"
            )
        if self.world.behavior_dim != self.backbone.behavior_dim:
            raise ConfigError(
                f"world.behavior_dim {self.world.behavior_dim} differs from "
                f"backbone.behavior_dim {self.backbone.behavior_dim}"
            )
        if self.log_level.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR"):
            raise ConfigError(f"log_level must be DEBUG/INFO/WARNING/ERROR, got '{self.log_level}'")
        return self

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        """Build a config from a (possibly partial) JSON document."""
        if not isinstance(data, dict):
            raise ConfigError("run config must be a JSON object")
        sections = {
            "backbone": BackboneConfig,
            "modulation": ModulationConfig,
            "readout": ReadoutConfig,
            "train": TrainConfig,
            "world": WorldConfig,
            "paths": PathsConfig,
        }
        kwargs: dict[str, Any] = {}
        for key, value in data.items():
            if key == "log_level":
                kwargs[key] = str(value)
            elif key in sections:
                kwargs[key] = _section_from_dict(sections[key], key, value)
            else:
                raise ConfigError(f"unknown key '{key}' in run config")
        return cls(**kwargs)

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["paths"] = {k: (str(v) if v is not None else None) for k, v in data["paths"].items()}
        for key, value in data["world"].items():
            if isinstance(value, tuple):
                data["world"][key] = list(value)
        return data

    def reseed(self, base: int) -> "RunConfig":
        """Derive every section seed from one base seed."""
        self.backbone.seed = base
        self.modulation.seed = base + 1
        self.readout.seed = base + 2
        self.train.seed = base
        self.world.seed = base + 7
        return self

    def write(self, path: Path) -> None:
        """Echo the effective configuration next to a run's artifacts."""
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        logger.info(f"Effective config written to: {path}")


def _section_from_dict(section_cls, section_name: str, value: Any):
    if not isinstance(value, dict):
        raise ConfigError(f"section '{section_name}' must be a JSON object")
    known = {f.name: f for f in fields(section_cls)}
    kwargs = {}
    for key, item in value.items():
        if key not in known:
            raise ConfigError(f"unknown key '{key}' in section '{section_name}'")
        default = getattr(section_cls(), key)
        if isinstance(default, tuple):
            item = tuple(float(v) for v in item)
        elif isinstance(default, Path) or key.endswith("_dir"):
            item = Path(item) if item is not None else None
        elif isinstance(default, bool):
            if not isinstance(item, bool):
                raise ConfigError(f"{section_name}.{key} must be a boolean, got {item!r}")
        elif isinstance(default, int):
            if isinstance(item, bool) or not isinstance(item, int):
                raise ConfigError(f"{section_name}.{key} must be an integer, got {item!r}")
        elif isinstance(default, float):
            if isinstance(item, bool) or not isinstance(item, (int, float)):
                raise ConfigError(f"{section_name}.{key} must be a number, got {item!r}")
            item = float(item)
        kwargs[key] = item
    return section_cls(**kwargs)


def load_run_config(path: Optional[Path] = None) -> RunConfig:
    """Load defaults, overlay a JSON file, then environment overrides.

    Environment variables (also read from ``.env``): ``AVM_SEED`` (applied to
    every section seed), ``AVM_LOG_LEVEL``, ``AVM_OUTPUT_DIR``,
    ``AVM_MAX_EPOCHS``.
    """
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"run config {path} is not valid JSON: {e}") from e
        config = RunConfig.from_dict(data)
    else:
        config = RunConfig()

    seed = os.getenv("AVM_SEED")
    if seed:
        try:
            base = int(seed)
        except ValueError as e:
            raise ConfigError(f"AVM_SEED must be an integer, got '{seed}'") from e
        config.reseed(base)

    if os.getenv("AVM_LOG_LEVEL"):
        config.log_level = os.environ["AVM_LOG_LEVEL"]
    if os.getenv("AVM_OUTPUT_DIR"):
        config.paths.output_dir = Path(os.environ["AVM_OUTPUT_DIR"])
    if os.getenv("AVM_MAX_EPOCHS"):
        try:
            config.train.max_epochs = int(os.environ["AVM_MAX_EPOCHS"])
        except ValueError as e:
            raise ConfigError(f"AVM_MAX_EPOCHS must be an integer, got '{os.environ['AVM_MAX_EPOCHS']}'") from e

    return config.validate()
