"""Configuration dataclasses, presets and the YAML config document.

A run config has four sections (``model``, ``data``, ``optim``, ``train``) whose
keys mirror the dataclass fields below. Overrides use dotted keys, e.g.
``model.window_size=4``; unknown keys are rejected with :class:`ConfigError`.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError


@dataclass
class ArchitectureConfig:
    in_channels: int = 3
    stem_channels: int = 64
    stage_channels: tuple[int, ...] = (64, 128, 256, 512)
    blocks_per_stage: tuple[int, ...] = (2, 2, 2, 2)
    decoder_blocks: int = 2
    window_size: int = 8
    grid_size: int = 8
    head_dim: int = 32
    mbconv_expansion: int = 4
    se_reduction: int = 4
    # "input": squeeze width = block input channels / se_reduction;
    # "expanded": squeeze width = expanded (depthwise) channels / se_reduction
    se_relative_to: str = "input"
    ffn_expansion: int = 2
    num_classes: int = 2
    input_size: tuple[int, int] = (256, 256)

    @property
    def s3_repeats(self) -> int:
        return self.blocks_per_stage[2]

    def stage_sizes(self, input_size=None) -> list[tuple[int, int]]:
        h, w = input_size or self.input_size
        return [(h // 2 ** (i + 2), w // 2 ** (i + 2)) for i in range(len(self.stage_channels))]

    def validate(self, input_size=None) -> None:
        h, w = input_size or self.input_size
        if len(self.stage_channels) != 4 or len(self.blocks_per_stage) != 4:
            raise ConfigError("exactly four encoder stages are supported")
        if any(n < 1 for n in self.blocks_per_stage) or self.decoder_blocks < 1:
            raise ConfigError("every stage needs at least one block")
        for a, b in zip(self.stage_channels, self.stage_channels[1:]):
            if b != 2 * a:
                raise ConfigError(f"stage channels must double per stage, got {self.stage_channels}")
        if self.stage_channels[0] % 4:
            raise ConfigError("first stage channels must be divisible by 4 for the segmentation head")
        for c in self.stage_channels:
            if c % self.head_dim:
                raise ConfigError(f"stage width {c} not divisible by head_dim {self.head_dim}")
        if self.se_relative_to not in ("input", "expanded"):
            raise ConfigError(f"se_relative_to must be 'input' or 'expanded', got {self.se_relative_to!r}")
        if h % 32 or w % 32:
            raise ConfigError(f"input size {(h, w)} must be divisible by 32")
        for i, (sh, sw) in enumerate(self.stage_sizes((h, w))):
            for name, size in (("window_size", self.window_size), ("grid_size", self.grid_size)):
                if sh % size or sw % size:
                    raise ConfigError(
                        f"stage S{i + 1} is {sh}x{sw} for input {h}x{w}; not divisible by {name}={size}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2 (background + at least one class)")


MONUSEG18 = ArchitectureConfig()
MONUSAC20 = dataclasses.replace(MONUSEG18, blocks_per_stage=(2, 2, 5, 2), num_classes=5)
TINY = ArchitectureConfig(stem_channels=16, stage_channels=(16, 32, 64, 128), blocks_per_stage=(1, 1, 1, 1),
                          decoder_blocks=1, window_size=2, grid_size=2, head_dim=8, input_size=(64, 64))

PRESETS = {"monuseg18": MONUSEG18, "monusac20": MONUSAC20, "tiny": TINY}


@dataclass
class NormalizationSpec:
    mean: tuple[float, float, float] = (171.31, 119.69, 157.71)
    std: tuple[float, float, float] = (56.04, 59.61, 47.69)

    def __post_init__(self):
        if len(self.mean) != 3 or len(self.std) != 3 or min(self.std) <= 0:
            raise ConfigError("normalization needs three means and three positive stds")


MONUSEG18_NORM = NormalizationSpec()
IMAGENET_NORM = NormalizationSpec(mean=(123.675, 116.28, 103.53), std=(58.395, 57.12, 57.375))


@dataclass
class AugmentationSpec:
    flip_prob: float = 0.5
    affine_prob: float = 1.0
    shift: float = 0.06
    scale: tuple[float, float] = (0.9, 1.1)
    rotate: float = 45.0
    photometric_prob: float = 0.5
    brightness: float = 32.0
    contrast: tuple[float, float] = (0.5, 1.5)
    saturation: tuple[float, float] = (0.5, 1.5)
    hue: float = 18.0
    pad_size: int = 256
    image_pad_value: float = 0.0
    mask_fill: int = 255

    def __post_init__(self):
        for name in ("flip_prob", "affine_prob", "photometric_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be a probability")

    @classmethod
    def identity(cls) -> "AugmentationSpec":
        return cls(flip_prob=0.0, affine_prob=0.0, shift=0.0, scale=(1.0, 1.0), rotate=0.0,
                   photometric_prob=0.0, brightness=0.0, contrast=(1.0, 1.0), saturation=(1.0, 1.0),
                   hue=0.0, pad_size=0)


@dataclass
class DataConfig:
    dataset_dir: str | None = None
    val_dir: str | None = None
    patch_size: int | None = None  # None: the model input size
    normalization: NormalizationSpec = field(default_factory=NormalizationSpec)
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)
    augment: bool = True
    synthetic_count: int = 16


@dataclass
class OptimizerConfig:
    lr0: float = 0.005
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_min: float = 1e-6
    total_iterations: int = 1000
    warmup_iterations: int = 0
    grad_clip: float | None = None

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("betas must lie in [0, 1)")
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be positive")


@dataclass
class TrainConfig:
    batch_size: int = 16
    eval_interval: int = 100
    log_interval: int = 10
    ce_weight: float = 1.0
    dice_weight: float = 3.0
    seed: int = 0


@dataclass
class RunConfig:
    model: ArchitectureConfig = field(default_factory=ArchitectureConfig)
    data: DataConfig = field(default_factory=DataConfig)
    optim: OptimizerConfig = field(default_factory=OptimizerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


# ------------------------------------------------------------ conversion --


def to_dict(obj) -> dict:
    def convert(v):
        if dataclasses.is_dataclass(v):
            return {f.name: convert(getattr(v, f.name)) for f in fields(v)}
        if isinstance(v, tuple):
            return [convert(x) for x in v]
        return v

    return convert(obj)


def _coerce(value, template, key: str):
    if dataclasses.is_dataclass(template):
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: expected a mapping")
        return from_dict(type(template), value, key + ".")
    if isinstance(template, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list")
        inner = template[0] if template else None
        return tuple(_coerce(v, inner, key) if inner is not None else v for v in value)
    if isinstance(template, bool):
        if isinstance(value, str):
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(template, int) and template is not None:
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(template, float):
        if isinstance(value, str):
            # YAML 1.1 reads "1e-6" (no dot) as a string
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    return value


def from_dict(cls, data: dict, prefix: str = ""):
    defaults = cls()
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in sorted(unknown))}")
    kwargs = {}
    for f in fields(cls):
        if f.name in data:
            kwargs[f.name] = _coerce(data[f.name], getattr(defaults, f.name), prefix + f.name)
    try:
        return cls(**kwargs)
    except TypeError as exc:  # pragma: no cover - defensive
        raise ConfigError(str(exc)) from None


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` overrides (values parsed as YAML scalars/lists)."""
    data = to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            if not isinstance(node, dict) or p not in node:
                raise ConfigError(f"unknown config key: {key}")
            node = node[p]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigError(f"unknown config key: {key}")
        node[parts[-1]] = yaml.safe_load(raw)
    return from_dict(RunConfig, data)


def load_config(path: str | Path | None = None, preset: str | None = None,
                overrides: list[str] | None = None) -> RunConfig:
    """Build a run config: preset model (optional) <- YAML document <- overrides."""
    cfg = RunConfig()
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        cfg.model = dataclasses.replace(PRESETS[preset])
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a mapping")
        merged = to_dict(cfg)
        for section, values in doc.items():
            if section not in merged:
                raise ConfigError(f"unknown config section: {section}")
            if not isinstance(values, dict):
                raise ConfigError(f"section {section} must be a mapping")
            for k, v in values.items():
                if k not in merged[section]:
                    raise ConfigError(f"unknown config key: {section}.{k}")
                if isinstance(merged[section][k], dict) and isinstance(v, dict):
                    merged[section][k].update(v)
                else:
                    merged[section][k] = v
        cfg = from_dict(RunConfig, merged)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def dump_config(cfg, path: str | Path | None = None) -> str:
    text = yaml.safe_dump(to_dict(cfg), sort_keys=False)
    if path is not None:
        Path(path).write_text(text)
    return text


def config_digest(model_cfg: ArchitectureConfig) -> str:
    blob = json.dumps(to_dict(model_cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def model_config_from_dict(data: dict[str, Any]) -> ArchitectureConfig:
    return from_dict(ArchitectureConfig, data, "model.")
