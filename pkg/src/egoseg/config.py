"""Run configuration: one YAML file holding every hyper-parameter."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .encoder import EncoderConfig
from .model import ModelConfig
from .synthdata import EGOHOS_MEAN, EGOHOS_STD


class ConfigError(ValueError):
    pass


@dataclass
class LossWeights:
    alpha: float = 0.5  # objects
    gamma: float = 1.0  # hands
    lam: float = 0.5  # contact boundary

    def validate(self):
        vals = (self.alpha, self.gamma, self.lam)
        if min(vals) < 0:
            raise ConfigError(f"loss weights must be non-negative, got {vals}")
        if max(vals) == 0:
            raise ConfigError("at least one loss weight must be positive")


@dataclass
class ScheduleConfig:
    warmup_iters: int = 200
    max_iters: int = 2000
    peak_lr: float = 1e-3  # from-scratch toy runs; the full-scale preset uses 1e-4
    weight_decay: float = 0.01
    batch_size: int = 8
    betas: tuple[float, float] = (0.9, 0.999)

    def validate(self):
        if not 0 <= self.warmup_iters <= self.max_iters:
            raise ConfigError(
                f"need 0 <= warmup_iters <= max_iters, got {self.warmup_iters}, {self.max_iters}"
            )
        if self.max_iters < 1 or self.batch_size < 1:
            raise ConfigError("max_iters and batch_size must be positive")
        if self.peak_lr < 0:
            raise ConfigError("peak_lr must be non-negative")


@dataclass
class DataConfig:
    image_size: int = 128
    crop: int = 128
    train_crop_mode: str = "random"
    eval_crop_mode: str = "center"
    mean: tuple[float, float, float] = EGOHOS_MEAN
    std: tuple[float, float, float] = EGOHOS_STD
    cb_radius: int = 1
    cb_iterations: int = 3
    threshold: float = 0.5


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    data: DataConfig = field(default_factory=DataConfig)
    deterministic: bool = True
    log_every: int = 10
    eval_every: int = 250

    def validate(self) -> "RunConfig":
        self.schedule.validate()
        self.loss.validate()
        try:
            self.model.encoder.check_input(self.data.crop, self.data.crop)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.data.crop > self.data.image_size:
            raise ConfigError("crop must not exceed image_size")
        return self

    @classmethod
    def paper(cls) -> "RunConfig":
        """Full-scale setting: 448 crops, Swin-B widths, 180k iterations."""
        enc = EncoderConfig(
            patch_size=4, window_size=12, embed_dim=128,
            depths=[2, 2, 18, 2], num_heads=[4, 8, 16, 32], pos_embed_grid=0,
        )
        return cls(
            model=ModelConfig(encoder=enc, decoder_depths=[2, 2, 2, 2], hofe_max_positions=112 * 112),
            schedule=ScheduleConfig(warmup_iters=10_000, max_iters=180_000, peak_lr=1e-4,
                                    weight_decay=0.01, batch_size=12),
            data=DataConfig(image_size=448, crop=448),
            eval_every=5000,
            log_every=50,
        )

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d or {})
        model = dict(d.pop("model", {}) or {})
        enc = EncoderConfig(**_known(EncoderConfig, model.pop("encoder", {}) or {}))
        cfg = cls(
            model=ModelConfig(encoder=enc, **_known(ModelConfig, model)),
            schedule=ScheduleConfig(**_known(ScheduleConfig, d.pop("schedule", {}) or {})),
            loss=LossWeights(**_known(LossWeights, d.pop("loss", {}) or {})),
            data=DataConfig(**_known(DataConfig, d.pop("data", {}) or {})),
            **_known(cls, d),
        )
        for sub in (cfg.schedule, cfg.data):
            for name in ("betas", "mean", "std"):
                if hasattr(sub, name):
                    setattr(sub, name, tuple(getattr(sub, name)))
        return cfg

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dump())

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))

    def digest(self) -> str:
        return hashlib.sha256(self.dump().encode()).hexdigest()[:12]


def _known(klass, d: dict) -> dict:
    names = {f.name for f in dataclasses.fields(klass)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {klass.__name__} keys: {sorted(unknown)}")
    return d


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj
