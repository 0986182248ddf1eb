"""Flat ``key = value`` run configuration shared by every command."""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .data import SceneSpec
from .network import ModelConfig
from .training import AugmentConfig, TrainConfig


class ConfigError(ValueError):
    """Unknown key or unparsable value."""


def _bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("on", "true", "yes", "1"):
        return True
    if s in ("off", "false", "no", "0"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def _ints(v: str) -> tuple:
    return tuple(int(p) for p in v.replace(" ", "").split(",") if p)


def _floats(v: str) -> tuple:
    return tuple(float(p) for p in v.replace(" ", "").split(",") if p)


@dataclass
class RunConfig:
    seed: int = 0
    # model
    fusion: str = "gff"
    dfp: bool = True
    dfp_literal_indexing: bool = False
    width: int = 32
    classes: int = 5
    aux_weight: float = 0.4
    backbone_widths: tuple = (16, 32, 64, 128)
    ppm_bins: tuple = (1, 2, 3, 6)
    # optimisation
    iterations: int = 2000
    batch: int = 8
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    power: float = 0.9
    # augmentation
    crop: int = 64
    flip_prob: float = 0.5
    jitter: float = 10.0
    scale_min: float = 0.75
    scale_max: float = 2.0
    # data
    image_size: int = 64
    n_train: int = 256
    n_test: int = 64
    noise_sigma: float = 12.0
    data: str = ""
    # evaluation / io
    scales: tuple = (0.75, 1.0, 1.25, 1.5, 1.75)
    bench_size: int = 512
    threads: int = 1
    out: str = "runs/default"

    def model(self) -> ModelConfig:
        return ModelConfig(
            classes=self.classes, width=self.width, fusion=self.fusion, dfp=self.dfp,
            dfp_literal_indexing=self.dfp_literal_indexing, aux_weight=self.aux_weight,
            backbone_widths=self.backbone_widths, ppm_bins=self.ppm_bins,
        )

    def training(self) -> TrainConfig:
        aug = AugmentConfig((self.crop, self.crop), self.flip_prob, self.jitter, (self.scale_min, self.scale_max))
        return TrainConfig(self.iterations, self.batch, self.lr, self.momentum, self.weight_decay, self.power, aug)

    def scene(self) -> SceneSpec:
        return SceneSpec(height=self.image_size, width=self.image_size, noise_sigma=self.noise_sigma,
                         seed=self.seed)

    def set(self, key: str, value: str):
        key = key.strip().replace("-", "_")
        if key not in {f.name for f in fields(self)}:
            raise ConfigError(f"unknown config key {key!r}")
        default = getattr(type(self), key)
        try:
            if isinstance(default, bool):
                parsed = _bool(value)
            elif isinstance(default, int):
                parsed = int(value)
            elif isinstance(default, float):
                parsed = float(value)
            elif isinstance(default, tuple):
                parsed = _floats(value) if key == "scales" else _ints(value)
            else:
                parsed = value.strip()
        except ValueError as e:
            raise ConfigError(f"bad value for {key}: {value!r} ({e})") from None
        setattr(self, key, parsed)

    def dumps(self, skip=()) -> str:
        lines = []
        for f in fields(self):
            if f.name in skip:
                continue
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "on" if v else "off"
            elif isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def parse(text: str, cfg: RunConfig | None = None) -> RunConfig:
    cfg = cfg or RunConfig()
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {raw!r}")
        k, v = line.split("=", 1)
        cfg.set(k, v)
    return cfg


def load(path) -> RunConfig:
    return parse(Path(path).read_text())
