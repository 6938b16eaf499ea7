"""Configuration defaults and the structured run configuration for maskslot."""

import dataclasses
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import yaml

from .validators import (
    BACKGROUND_MODES,
    EVAL_MODES,
    FEATURE_MODES,
    PRECISIONS,
    SHAPE_CLASSES,
    SLOT_INITS,
    validate_at_least,
    validate_choice,
    validate_divisible,
    validate_positive,
    validate_unit_interval,
)


def _get_path(env_var: str, default: Path) -> Path:
    """Get a path from environment variable or use default."""
    value = os.environ.get(env_var)
    if value:
        return Path(value)
    return default


RUNS_DIR = _get_path("MASKSLOT_RUNS_DIR", Path.cwd() / "runs")
DATA_DIR = _get_path("MASKSLOT_DATA_DIR", Path.cwd() / "data")
LOG_FILE = _get_path("MASKSLOT_LOG_FILE", RUNS_DIR / "events.log")

DEFAULT_IMAGE_SIZE = 64
DEFAULT_PATCH_SIZE = 8
DEFAULT_DIM = 32
DEFAULT_MIXER_BLOCKS = 2
DEFAULT_NUM_SEMANTICS = 16
DEFAULT_NUM_INSTANCES = 4
DEFAULT_ITERS = 3
DEFAULT_TAU = 0.5
DEFAULT_TAU1 = 0.2
DEFAULT_TAU2 = 0.5
DEFAULT_MOMENTUM = 0.999
DEFAULT_LR = 2e-4
NUM_EPS = 1e-8


class ConfigError(Exception):
    """Invalid configuration file, key or value."""

    pass


@dataclass
class ModelConfig:
    image_size: int = DEFAULT_IMAGE_SIZE
    patch_size: int = DEFAULT_PATCH_SIZE
    dim: int = DEFAULT_DIM
    mixer_blocks: int = DEFAULT_MIXER_BLOCKS
    mixer_hidden: int = 64
    num_semantics: int = DEFAULT_NUM_SEMANTICS
    num_instances: int = DEFAULT_NUM_INSTANCES
    iters: int = DEFAULT_ITERS
    tau: float = DEFAULT_TAU
    layer_norm: bool = True
    feature_mode: str = "fused"
    slot_init: str = "query"
    use_semantic: bool = True
    use_instance: bool = True

    @property
    def grid(self) -> int:
        """Patches per side."""
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        """HW, the token count the correlation head is bound to."""
        return self.grid * self.grid


@dataclass
class SinkhornConfig:
    epsilon: float = 0.05
    max_iters: int = 200
    tol: float = 1e-6
    log_domain: bool = False
    epsilon_start: float = 1.0
    epsilon_decay: float = 0.5
    anneal_iters: int = 10
    newton_steps: int = 20


@dataclass
class LossConfig:
    lambda_margin: float = 1.0
    tau1: float = DEFAULT_TAU1
    tau2: float = DEFAULT_TAU2
    enable_sem: bool = True
    enable_reg: bool = True
    enable_obj: bool = True


@dataclass
class AugmentConfig:
    enabled: bool = True
    crop: bool = True
    min_crop_scale: float = 0.6
    flip: bool = True
    flip_prob: float = 0.5
    jitter: bool = True
    brightness: float = 0.2
    contrast: float = 0.2


@dataclass
class TrainConfig:
    frames: int = 4
    stride: int = 4
    lr: float = DEFAULT_LR
    batch_size: int = 8
    momentum: float = DEFAULT_MOMENTUM
    steps: int = 10000
    seed: int = 0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    warmup_steps: int = 0
    precision: str = "float32"
    checkpoint_every: int = 1000
    eval_every: int = 1000
    log_every: int = 50


@dataclass
class DataConfig:
    train_videos: int = 200
    eval_videos: int = 50
    frames: int = 12
    classes: int = 2
    min_objects: int = 2
    max_objects: int = 3
    background: str = "flat"
    seed: int = 0


@dataclass
class EvalConfig:
    use_teacher: bool = True
    mode: str = "single"
    boundary_tolerance: float = 0.008
    border_background: bool = True
    propagation_k: int = 10
    propagation_temperature: float = 0.07
    propagation_context: int = 7


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = ""


def default_config() -> RunConfig:
    """Return a config with every documented default."""
    return RunConfig()


def config_to_dict(cfg: RunConfig) -> Dict[str, Any]:
    """Convert a config to a plain nested dict."""
    return dataclasses.asdict(cfg)


def config_from_dict(data: Dict[str, Any]) -> RunConfig:
    """Build a config from a nested dict, starting from defaults."""
    cfg = default_config()
    for key, value in data.items():
        if isinstance(value, dict):
            section = getattr(cfg, key, None)
            if section is None or not dataclasses.is_dataclass(section):
                raise ConfigError(f"Unknown config section: {key}")
            for sub_key, sub_value in value.items():
                _set_field(section, sub_key, sub_value, f"{key}.{sub_key}")
        else:
            _set_field(cfg, key, value, key)
    validate_config(cfg)
    return cfg


def load_config(path: Optional[Path]) -> RunConfig:
    """Load a YAML config file merged over the defaults."""
    if path is None:
        return default_config()
    try:
        data = yaml.safe_load(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"Cannot read config file {path}: {e}")
    except yaml.YAMLError as e:
        raise ConfigError(f"Invalid YAML in {path}: {e}")
    if data is None:
        return default_config()
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must contain a mapping")
    return config_from_dict(data)


def save_config(cfg: RunConfig, path: Path) -> None:
    """Write the resolved config as YAML."""
    path.write_text(dump_config(cfg))


def dump_config(cfg: RunConfig) -> str:
    """Canonical YAML dump (sorted keys)."""
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True)


def config_fingerprint(cfg: RunConfig) -> str:
    """SHA-256 of the canonical YAML dump."""
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()


def apply_overrides(cfg: RunConfig, overrides: Sequence[str]) -> RunConfig:
    """Apply dotted-path overrides such as ``train.lr=1e-3``."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"Override must look like key=value: {item}")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        target: Any = cfg
        for part in parts[:-1]:
            if not hasattr(target, part) or not dataclasses.is_dataclass(
                getattr(target, part)
            ):
                raise ConfigError(f"Unknown config section in override: {key}")
            target = getattr(target, part)
        value = yaml.safe_load(raw) if raw.strip() else ""
        _set_field(target, parts[-1], value, key)
    validate_config(cfg)
    return cfg


def _set_field(target: Any, name: str, value: Any, key: str) -> None:
    """Set a dataclass field, coercing to the declared type."""
    fields = {f.name: f for f in dataclasses.fields(target)}
    if name not in fields:
        raise ConfigError(f"Unknown config key: {key}")
    current = getattr(target, name)
    try:
        if isinstance(current, bool):
            if isinstance(value, str):
                lowered = value.lower()
                if lowered not in ("true", "false"):
                    raise ValueError(f"expected true/false, got {value!r}")
                value = lowered == "true"
            elif not isinstance(value, bool):
                raise ValueError(f"expected a boolean, got {value!r}")
        elif isinstance(current, int):
            if isinstance(value, bool) or (
                isinstance(value, float) and not value.is_integer()
            ):
                raise ValueError(f"expected an integer, got {value!r}")
            value = int(value)
        elif isinstance(current, float):
            if isinstance(value, bool):
                raise ValueError(f"expected a number, got {value!r}")
            value = float(value)
        elif isinstance(current, str):
            value = str(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid value for {key}: {e}")
    setattr(target, name, value)


def validate_config(cfg: RunConfig) -> None:
    """Check every documented config invariant, raising ConfigError."""
    m, s, lo, t, d, e = cfg.model, cfg.sinkhorn, cfg.loss, cfg.train, cfg.data, cfg.eval
    try:
        validate_at_least("model.patch_size", m.patch_size, 1)
        validate_divisible("model.image_size", m.image_size, m.patch_size)
        validate_at_least("model.dim", m.dim, 1)
        validate_at_least("model.mixer_blocks", m.mixer_blocks, 0)
        validate_at_least("model.mixer_hidden", m.mixer_hidden, 1)
        validate_at_least("model.num_semantics", m.num_semantics, 1)
        validate_at_least("model.num_instances", m.num_instances, 1)
        validate_at_least("model.iters", m.iters, 1)
        validate_unit_interval("model.tau", m.tau)
        validate_choice("model.feature_mode", m.feature_mode, FEATURE_MODES)
        validate_choice("model.slot_init", m.slot_init, SLOT_INITS)
        if not (m.use_semantic or m.use_instance):
            raise ValueError("at least one of model.use_semantic/use_instance must be on")
        validate_positive("sinkhorn.epsilon", s.epsilon)
        validate_at_least("sinkhorn.max_iters", s.max_iters, 1)
        validate_positive("sinkhorn.tol", s.tol)
        validate_positive("sinkhorn.epsilon_start", s.epsilon_start)
        if not 0.0 < s.epsilon_decay < 1.0:
            raise ValueError(f"sinkhorn.epsilon_decay must be in (0, 1), got {s.epsilon_decay}")
        validate_at_least("sinkhorn.anneal_iters", s.anneal_iters, 0)
        validate_at_least("sinkhorn.newton_steps", s.newton_steps, 0)
        validate_positive("loss.lambda_margin", lo.lambda_margin)
        validate_unit_interval("loss.tau1", lo.tau1)
        validate_unit_interval("loss.tau2", lo.tau2)
        validate_at_least("train.frames", t.frames, 2)
        validate_at_least("train.stride", t.stride, 1)
        validate_at_least("train.batch_size", t.batch_size, 1)
        validate_at_least("train.steps", t.steps, 0)
        validate_at_least("train.warmup_steps", t.warmup_steps, 0)
        validate_unit_interval("train.momentum", t.momentum)
        validate_unit_interval("train.beta1", t.beta1)
        validate_unit_interval("train.beta2", t.beta2)
        if t.lr < 0 or t.weight_decay < 0:
            raise ValueError("train.lr and train.weight_decay must be non-negative")
        validate_choice("train.precision", t.precision, PRECISIONS)
        validate_at_least("train.checkpoint_every", t.checkpoint_every, 1)
        validate_at_least("train.eval_every", t.eval_every, 1)
        validate_at_least("train.log_every", t.log_every, 1)
        validate_unit_interval("augment.min_crop_scale", cfg.augment.min_crop_scale)
        validate_unit_interval("augment.flip_prob", cfg.augment.flip_prob)
        validate_at_least("data.frames", d.frames, 1)
        validate_at_least("data.classes", d.classes, 1)
        if d.classes > len(SHAPE_CLASSES):
            raise ValueError(f"data.classes must be at most {len(SHAPE_CLASSES)}, got {d.classes}")
        validate_at_least("data.min_objects", d.min_objects, 0)
        validate_at_least("data.max_objects", d.max_objects, d.min_objects)
        validate_choice("data.background", d.background, BACKGROUND_MODES)
        validate_choice("eval.mode", e.mode, EVAL_MODES)
        validate_positive("eval.boundary_tolerance", e.boundary_tolerance)
        validate_at_least("eval.propagation_k", e.propagation_k, 1)
        validate_positive("eval.propagation_temperature", e.propagation_temperature)
        validate_at_least("eval.propagation_context", e.propagation_context, 0)
    except ValueError as err:
        raise ConfigError(str(err))


def list_keys(cfg: Optional[RunConfig] = None) -> List[str]:
    """All dotted config keys in declaration order."""
    cfg = cfg or default_config()
    keys: List[str] = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            keys.extend(f"{f.name}.{sub.name}" for sub in dataclasses.fields(value))
        else:
            keys.append(f.name)
    return keys
