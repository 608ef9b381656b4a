"""Configuration schema, flat TOML files and validation.

Every hyperparameter lives in one flat key space so a config file is a plain
list of ``key = value`` lines. Unknown keys are rejected. Values that come
straight from the published training setup are listed in ``PUBLISHED_DEFAULTS``
and tagged in emitted files.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import tomli_w

from .errors import ConfigurationError
from .io import stable_hash

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

MODES = ("mutual", "single-ffpe", "single-frozen", "mixed")
CONTRASTIVE = ("nmc", "nt-xent", "kl", "none")
PUBLISHED_DEFAULTS = {"batch_size", "epochs", "lr_max", "tau", "delta", "taylor_t", "image_size", "tile_size", "crop_size"}


@dataclass
class TrainConfig:
    mode: str = "mutual"
    batch_size: int = 32
    epochs: int = 10
    lr_max: float = 1.6e-4
    lr_min: float = 0.0
    restart_period_epochs: float = 1.0
    restart_mult: float = 2.0
    tau: float = 0.5
    delta: float = 1.0
    taylor_t: int = 3
    loss_weights: tuple = (1.0, 1.0, 1.0)
    seed: int = 0
    num_classes: int = 3
    backbone: str = "small-cnn"
    backbone_channels: tuple = (16, 32, 64, 128)
    shared_head: bool = False
    eps: float = 1e-5
    sv_threshold: float = 1e-6
    norm_mode: str = "row"
    stacking: str = "vertical"
    contrastive: str = "nmc"
    alternating_updates: bool = False
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    collapse_var_threshold: float = 1e-8
    collapse_patience: int = 10
    augment: bool = True
    soft_vote: bool = False

    def validate(self) -> list[str]:
        p = []
        if self.mode not in MODES:
            p.append(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.tau > 0:
            p.append(f"tau must be > 0 (got {self.tau})")
        if self.delta < 0:
            p.append(f"delta must be >= 0 (got {self.delta})")
        if int(self.taylor_t) != self.taylor_t or self.taylor_t < 1:
            p.append(f"taylor_t must be an integer >= 1 (got {self.taylor_t})")
        min_batch = 2 if self.mode == "mutual" else 1
        if self.batch_size < min_batch:
            p.append(f"batch_size must be >= {min_batch} in {self.mode} mode (got {self.batch_size})")
        if self.epochs < 0:
            p.append(f"epochs must be >= 0 (got {self.epochs})")
        if self.lr_max < 0 or self.lr_min < 0:
            p.append("learning rates must be >= 0")
        if self.lr_min > self.lr_max:
            p.append(f"lr_min ({self.lr_min}) exceeds lr_max ({self.lr_max})")
        if not self.restart_period_epochs > 0:
            p.append(f"restart_period_epochs must be > 0 (got {self.restart_period_epochs})")
        if self.restart_mult < 1:
            p.append(f"restart_mult must be >= 1 (got {self.restart_mult})")
        if len(self.loss_weights) != 3 or any(w < 0 for w in self.loss_weights):
            p.append("loss_weights must be three non-negative numbers (cls, nmc, lr)")
        if self.num_classes < 2:
            p.append(f"num_classes must be >= 2 (got {self.num_classes})")
        if not self.eps > 0:
            p.append(f"eps must be > 0 (got {self.eps})")
        if not self.sv_threshold > 0:
            p.append(f"sv_threshold must be > 0 (got {self.sv_threshold})")
        if self.norm_mode not in ("row", "batch"):
            p.append(f"norm_mode must be 'row' or 'batch' (got {self.norm_mode!r})")
        if self.stacking not in ("vertical", "horizontal"):
            p.append(f"stacking must be 'vertical' or 'horizontal' (got {self.stacking!r})")
        if self.contrastive not in CONTRASTIVE:
            p.append(f"contrastive must be one of {CONTRASTIVE} (got {self.contrastive!r})")
        if not self.backbone_channels:
            p.append("backbone_channels must not be empty")
        return p


@dataclass
class PipelineConfig:
    tile_size: int = 500
    crop_size: int = 224
    image_size: int = 224
    downsample: int = 4
    min_tissue_fraction: float = 0.5
    min_blob_count: int = 1
    min_blob_area_fraction: float = 0.01
    max_crops_per_bag: int = 0

    def validate(self) -> list[str]:
        p = []
        if self.tile_size < 1 or self.crop_size < 1:
            p.append("tile_size and crop_size must be positive")
        elif self.crop_size > self.tile_size:
            p.append(f"crop_size ({self.crop_size}) exceeds tile_size ({self.tile_size})")
        if self.image_size != self.crop_size:
            p.append(f"image_size ({self.image_size}) must equal crop_size ({self.crop_size})")
        if self.downsample < 1:
            p.append("downsample must be >= 1")
        if not 0 <= self.min_tissue_fraction <= 1:
            p.append("min_tissue_fraction must lie in [0, 1]")
        if self.min_blob_count < 0:
            p.append("min_blob_count must be >= 0")
        if not 0 <= self.min_blob_area_fraction <= 1:
            p.append("min_blob_area_fraction must lie in [0, 1]")
        if self.max_crops_per_bag < 0:
            p.append("max_crops_per_bag must be >= 0 (0 keeps all)")
        return p


@dataclass
class GlobalConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    data_dir: str = ""
    out_dir: str = "runs"
    log_level: str = "INFO"

    def to_flat(self) -> dict:
        flat = {}
        for section in (self.train, self.pipeline):
            for f in fields(section):
                v = getattr(section, f.name)
                flat[f.name] = list(v) if isinstance(v, tuple) else v
        flat.update(data_dir=self.data_dir, out_dir=self.out_dir, log_level=self.log_level)
        return flat

    def hash(self) -> str:
        return stable_hash(self.to_flat())

    def validate(self) -> list[str]:
        p = self.train.validate() + self.pipeline.validate()
        if self.log_level.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR"):
            p.append(f"log_level must be DEBUG/INFO/WARNING/ERROR (got {self.log_level!r})")
        return p


_TOP_KEYS = ("data_dir", "out_dir", "log_level")


def _field_types():
    out = {}
    for cls, section in ((TrainConfig, "train"), (PipelineConfig, "pipeline")):
        for f in fields(cls):
            out[f.name] = (section, f.default if f.default is not dataclasses.MISSING else f.default_factory())
    for k in _TOP_KEYS:
        out[k] = (None, "")
    return out


def known_keys() -> list[str]:
    return sorted(_field_types())


def _coerce(key, value, default, problems):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
    elif isinstance(default, int):
        try:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        except (TypeError, ValueError):
            pass
    elif isinstance(default, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            pass
    elif isinstance(default, tuple):
        items = value.split(",") if isinstance(value, str) else value
        try:
            conv = type(default[0]) if default else float
            return tuple(conv(v) for v in items)
        except (TypeError, ValueError):
            pass
    else:
        return str(value)
    problems.append(f"{key}: cannot interpret {value!r} as {type(default).__name__}")
    return default


def build_config(values: dict, base: GlobalConfig | None = None) -> GlobalConfig:
    """Apply flat ``values`` on top of ``base`` and validate; raise with every problem found."""
    base = base or GlobalConfig()
    cfg = dataclasses.replace(base, train=dataclasses.replace(base.train), pipeline=dataclasses.replace(base.pipeline))
    types = _field_types()
    problems = []
    for key, value in values.items():
        if key not in types:
            problems.append(f"unknown config key {key!r}")
            continue
        section, default = types[key]
        value = _coerce(key, value, default, problems)
        target = cfg if section is None else getattr(cfg, section)
        setattr(target, key, value)
    problems += cfg.validate()
    if problems:
        raise ConfigurationError("invalid configuration:\n  " + "\n  ".join(problems), problems)
    return cfg


def read_config_file(path) -> dict:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    nested = [k for k, v in data.items() if isinstance(v, dict)]
    if nested:
        raise ConfigurationError(f"{path}: config must be flat, found tables {nested}")
    return data


def load_config(path=None, overrides: dict | None = None) -> GlobalConfig:
    """Defaults < config file < overrides."""
    values = read_config_file(path) if path else {}
    values.update(overrides or {})
    return build_config(values)


def train_config(**overrides) -> TrainConfig:
    """Validated :class:`TrainConfig` from keyword overrides."""
    return build_config(overrides).train


def render_config(cfg: GlobalConfig | None = None) -> str:
    """Flat TOML with one line per key; values from the published setup are marked "published default"."""
    cfg = cfg or GlobalConfig()
    lines = ["# mcl configuration (flat key = value). Unknown keys are rejected."]
    for key, value in cfg.to_flat().items():
        line = tomli_w.dumps({key: value}).strip()
        if key in PUBLISHED_DEFAULTS:
            line += "  # published default"
        lines.append(line)
    return "\n".join(lines) + "\n"
