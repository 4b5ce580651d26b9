"""Training configuration: nested dataclasses, TOML files and dotted-key overrides."""
from __future__ import annotations

import ast
import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .augmentation import AugmentConfig
from .losses import LossConfig
from .model import ModelConfig


@dataclass
class OptimizerConfig:
    algorithm: str = "adamw"
    weight_decay: float = 1e-4
    grad_clip: float | None = 10.0


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 4
    batches_per_epoch: int = 2000
    epochs: int = 10
    pretrain_epochs: int = 0
    learning_rate: float = 3e-5
    precision: str = "full"
    image_size: tuple[int, int] = (256, 320)
    init_checkpoint: str | None = None
    from_scratch: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.precision not in ("full", "reduced"):
            raise ValueError("precision must be 'full' or 'reduced'")
        self.image_size = tuple(int(v) for v in self.image_size)
        s = self.model.stride
        if self.image_size[0] % s or self.image_size[1] % s:
            raise ValueError(f"image_size {self.image_size} not divisible by stride {s}")

    def to_dict(self) -> dict:
        return _strip_none(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return _build(cls, d)

    def dump_toml(self, path) -> None:
        Path(path).write_text(tomli_w.dumps(self.to_dict()))

    def with_overrides(self, overrides: list[str] | dict) -> "TrainConfig":
        d = self.to_dict()
        items = overrides.items() if isinstance(overrides, dict) else (parse_override(o) for o in overrides)
        for key, value in items:
            set_dotted(d, key, value)
        return TrainConfig.from_dict(d)


def full_scale_config() -> TrainConfig:
    """Operating point of the reported experiments (ResNet-50, 256x320)."""
    return TrainConfig(
        model=ModelConfig(descriptor_dim=64, stride=8, backbone_id="resnet50"),
        loss=LossConfig(temperature=0.03, quantile_keep=0.35, num_keypoints=500),
        batch_size=4,
        batches_per_epoch=2000,
        learning_rate=3e-5,
        image_size=(256, 320),
    )


def desk_config(**kw) -> TrainConfig:
    """Tiny-backbone setup on 64x64 synthetic scenes."""
    base = dict(
        model=ModelConfig(descriptor_dim=8, stride=8, backbone_id="tiny"),
        loss=LossConfig(temperature=0.03, quantile_keep=0.35, num_keypoints=100),
        batch_size=2,
        batches_per_epoch=200,
        epochs=5,
        pretrain_epochs=2,
        learning_rate=1e-3,
        image_size=(64, 64),
    )
    base.update(kw)
    return TrainConfig(**base)


def load_config(path) -> TrainConfig:
    with open(path, "rb") as f:
        return TrainConfig.from_dict(tomllib.load(f))


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ValueError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    raw = raw.strip()
    lowered = raw.lower()
    if lowered in ("true", "false"):
        return key.strip(), lowered == "true"
    if lowered in ("none", "null"):
        return key.strip(), None
    try:
        return key.strip(), ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        return key.strip(), raw


def set_dotted(d: dict, key: str, value) -> None:
    parts = key.split(".")
    cur = d
    for p in parts[:-1]:
        if p not in cur or not isinstance(cur[p], dict):
            raise KeyError(f"unknown config section {p!r} in {key!r}")
        cur = cur[p]
    if parts[-1] not in cur and not _optional_key(key):
        raise KeyError(f"unknown config key {key!r}")
    cur[parts[-1]] = value


def _optional_key(key: str) -> bool:
    # keys whose None default is stripped from dumps
    return key in ("init_checkpoint", "optimizer.grad_clip", "model.backbone_weights")


def _strip_none(d):
    if isinstance(d, dict):
        return {k: _strip_none(v) for k, v in d.items() if v is not None}
    if isinstance(d, tuple):
        return list(d)
    return d


def _build(cls, d: dict):
    kwargs = {}
    hints = {f.name: f for f in dataclasses.fields(cls)}
    for k, v in d.items():
        if k not in hints:
            raise KeyError(f"unknown config key {k!r} for {cls.__name__}")
        sub = _NESTED.get((cls, k))
        kwargs[k] = _build(sub, v) if sub is not None and isinstance(v, dict) else v
    return cls(**kwargs)


_NESTED = {
    (TrainConfig, "model"): ModelConfig,
    (TrainConfig, "loss"): LossConfig,
    (TrainConfig, "augment"): AugmentConfig,
    (TrainConfig, "optimizer"): OptimizerConfig,
}
