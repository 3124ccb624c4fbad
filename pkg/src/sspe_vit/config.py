"""Experiment configuration: one serializable record with every knob."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from .augment import AugmentConfig, KeySet
from .data import SyntheticConfig
from .encoder import PE_KINDS, EncoderConfig
from .loss import REDUCTIONS, HybridLossConfig

OPTIMIZERS = ("sgd", "adam")

# Reference settings for fine-tuning a pretrained ViT-B/16 at full scale (not the toy defaults).
LARGE_SCALE_TRAINING = {"optimizer": "adam", "learning_rate": 5e-6, "batch_size": 128, "epochs": 100}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # model
    pe_kind: str = "sinusoidal-1d"
    pe_learnable: bool = False
    depth: int = 2
    d: int = 32
    heads: int = 4
    mlp_hidden: int = 64
    patch_pixels: int = 16
    # position plans and exchange
    key_set: list[int] = field(default_factory=lambda: [4, 6])
    sspe: bool = True
    pe_dropout: float = 0.0
    exchange_n: int = 2
    dedupe_identity: bool = False
    resample_candidates: bool = True
    mask_cells: list[int] = field(default_factory=list)
    # loss
    epsilon: float = 0.2
    alpha: float = 0.3
    beta: float = 0.7
    reduction: str = "mean"
    # optimisation
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 32
    seed: int = 1
    # augmentation
    rotation_deg: float = 5.0
    brightness: list[float] = field(default_factory=lambda: [0.9, 1.1])
    contrast: list[float] = field(default_factory=lambda: [0.9, 1.1])
    oversample: bool = True
    # data
    data_dir: str = "data"
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)

    def __post_init__(self):
        if isinstance(self.synthetic, dict):
            self.synthetic = _build(SyntheticConfig, self.synthetic)
        self.key_set = [int(k) for k in self.key_set]
        self.mask_cells = [int(k) for k in self.mask_cells]
        self.validate()

    def validate(self) -> None:
        try:
            if self.pe_kind not in PE_KINDS:
                raise ConfigError(f"pe_kind must be one of {PE_KINDS}, got {self.pe_kind!r}")
            if self.optimizer not in OPTIMIZERS:
                raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
            if self.reduction not in REDUCTIONS:
                raise ConfigError(f"reduction must be one of {REDUCTIONS}")
            if self.exchange_n < 0:
                raise ConfigError("exchange_n must be >= 0")
            if not 0.0 <= self.pe_dropout < 1.0:
                raise ConfigError("pe_dropout must be in [0, 1)")
            if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
                raise ConfigError("epochs, batch_size and learning_rate must be positive")
            self.encoder_config()
            self.loss_config()
            KeySet(tuple(self.key_set)).validate(self.encoder_config().num_tokens)
            if len(self.brightness) != 2 or len(self.contrast) != 2:
                raise ConfigError("brightness and contrast are [low, high] ranges")
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def encoder_config(self) -> EncoderConfig:
        g = self.synthetic.image_side // self.patch_pixels
        if g * self.patch_pixels != self.synthetic.image_side:
            raise ConfigError("image side must be a multiple of patch_pixels")
        return EncoderConfig(
            patch_pixels=self.patch_pixels,
            grid_rows=g,
            grid_cols=g,
            d=self.d,
            heads=self.heads,
            depth=self.depth,
            mlp_hidden=self.mlp_hidden,
            pe_kind=self.pe_kind,
            pe_learnable=self.pe_learnable,
        )

    def loss_config(self) -> HybridLossConfig:
        return HybridLossConfig(self.epsilon, self.alpha, self.beta, self.reduction)

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(self.rotation_deg, tuple(self.brightness), tuple(self.contrast))

    def keys(self) -> KeySet:
        return KeySet(tuple(self.key_set))

    # serialization ---------------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["synthetic"]["key_cells"] = list(self.synthetic.key_cells)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "ExperimentConfig":
        return _build(cls, raw)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw)

    def replace(self, **changes) -> "ExperimentConfig":
        raw = self.to_dict()
        for key, value in changes.items():
            _assign(raw, key, value)
        return ExperimentConfig.from_dict(raw)

    def with_overrides(self, assignments: list[str]) -> "ExperimentConfig":
        """Apply ``key=value`` strings; values parse as JSON, else as plain strings."""
        raw = self.to_dict()
        for item in assignments:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, text = item.split("=", 1)
            try:
                value = json.loads(text)
            except json.JSONDecodeError:
                value = text
            _assign(raw, key.strip(), value)
        return ExperimentConfig.from_dict(raw)


def _assign(raw: dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = raw
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config section {p!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[parts[-1]] = value


def _build(cls, raw: dict[str, Any]):
    if not isinstance(raw, dict):
        raise ConfigError(f"{cls.__name__} must be a JSON object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    try:
        return cls(**raw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc
