"""Run configuration: one JSON document holding training, model, path and experiment settings."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from pvnet.experiments import BENCH_MODEL
from pvnet.model import ARMS, ModelConfig
from pvnet.train import ConfigError, TrainConfig

_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
_MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"arm", "n_classes", "k"}
PATH_KEYS = ("manifest", "cache_dir", "out_dir")


@dataclass
class RunConfig:
    manifest: str = "manifest.json"
    cache_dir: str = "cache"
    out_dir: str = "runs/default"
    arm: str = "full"
    # TrainConfig
    epochs: int = 60
    phase_a_epochs: int | None = None
    lr: float = 0.01
    batch_size: int = 8
    seed: int = 0
    optimizer: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 0.0
    ortho_weight: float = 1e-3
    k: int = 20
    n_points: int = 1024
    n_views: int = 12
    # rendering
    height: int = 64
    width: int = 64
    # model widths
    edge_widths: list = field(default_factory=lambda: list(BENCH_MODEL.edge_widths))
    block_widths: list = field(default_factory=lambda: list(BENCH_MODEL.block_widths))
    embed_dim: int = BENCH_MODEL.embed_dim
    view_channels: list = field(default_factory=lambda: list(BENCH_MODEL.view_channels))
    view_dim: int = BENCH_MODEL.view_dim
    fc_widths: list = field(default_factory=lambda: list(BENCH_MODEL.fc_widths))
    transform_widths: list = field(default_factory=lambda: list(BENCH_MODEL.transform_widths))
    # experiments
    arms: list = field(default_factory=lambda: list(ARMS))
    seeds: list = field(default_factory=lambda: [0])
    sweep_axis: str = "points"
    sweep_levels: list | None = None
    compare_checkpoint: str | None = None
    mask_shapes: int = 4
    retrieve_top: int = 10

    def __post_init__(self):
        if self.arm not in ARMS:
            raise ConfigError(f"arm must be one of {ARMS}, got {self.arm!r}")
        bad = [a for a in self.arms if a not in ARMS]
        if bad:
            raise ConfigError(f"unknown arms {bad}")
        if self.sweep_axis not in ("points", "views"):
            raise ConfigError(f"sweep_axis must be 'points' or 'views', got {self.sweep_axis!r}")
        if self.height < 8 or self.width < 8:
            raise ConfigError("height and width must be at least 8")
        # validates the training fields and fills derived defaults
        self.phase_a_epochs = self.train_config().phase_a_epochs
        self.model_config(4)

    @classmethod
    def from_dict(cls, doc: dict, base_dir: str | os.PathLike | None = None) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            cfg = cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        if base_dir is not None:
            for key in PATH_KEYS + ("compare_checkpoint",):
                value = getattr(cfg, key)
                if value is not None and not Path(value).is_absolute():
                    setattr(cfg, key, str(Path(base_dir) / value))
        return cfg

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RunConfig":
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(doc, Path(path).resolve().parent)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{k: getattr(self, k) for k in _TRAIN_KEYS})

    def model_config(self, n_classes: int, arm: str | None = None) -> ModelConfig:
        try:
            return ModelConfig(arm=arm or self.arm, n_classes=n_classes, k=self.k,
                               **{k: getattr(self, k) for k in _MODEL_KEYS})
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def config_diff(expected: dict, actual: dict) -> list[str]:
    """Human-readable differences between two model configurations."""
    out = []
    for key in sorted(set(expected) | set(actual)):
        if expected.get(key) != actual.get(key):
            out.append(f"{key}: config={expected.get(key)!r} checkpoint={actual.get(key)!r}")
    return out
