"""Experiment configuration: one flat dataclass, loadable from YAML with
``key=value`` overrides from the command line.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .channels import CHANNEL_KINDS
from .errors import ConfigurationError

PAPER_LAMBDAS = (200.0, 400.0, 800.0, 1600.0, 3200.0)


@dataclass
class ExperimentConfig:
    # data
    dataset: str = "desk"
    image_size: tuple = (32, 32)
    # architecture
    c_out: int = 24
    jscc_features: int = 256
    jscc_res_blocks: int = 4
    jscc_snr_range_db: tuple = (1.0, 9.0)
    comp_features: int = 192
    comp_res_blocks: int = 1
    c_z: int = 256
    c_v: int = 192
    snr_adaptive: bool = True
    rate_adaptive: bool = False
    # operating grid
    lambdas: tuple = PAPER_LAMBDAS
    eta_min_db: float = 1.0
    eta_max_db: float = 9.0
    channel: str = "awgn"
    r_n: float = 2.0
    # training
    seed: int = 0
    batch_size: int = 128
    lr: float = 1e-4
    lr_factor: float = 0.8
    lr_patience: int = 10
    epoch_steps: int = 0
    max_steps: int = 1000
    train_quantization: str = "noise"
    val_images: int = 512
    init: str = "pretrained"
    freeze_jscc: bool = True
    pretrained: str | None = None
    notes: dict = field(default_factory=dict)

    def validate(self) -> "ExperimentConfig":
        if not self.lambdas:
            raise ConfigurationError("lambda set must be non-empty")
        if list(self.lambdas) != sorted(self.lambdas) or len(set(self.lambdas)) != len(self.lambdas):
            raise ConfigurationError("lambda set must be strictly ascending")
        if self.eta_min_db > self.eta_max_db:
            raise ConfigurationError("eta_min_db must not exceed eta_max_db")
        if self.r_n <= 0:
            raise ConfigurationError("backhaul rate r_n must be positive")
        if self.channel not in CHANNEL_KINDS:
            raise ConfigurationError(f"channel must be one of {CHANNEL_KINDS}")
        if self.train_quantization not in ("noise", "mixed"):
            raise ConfigurationError("train_quantization must be 'noise' or 'mixed'")
        if self.init not in ("pretrained", "random"):
            raise ConfigurationError("init must be 'pretrained' or 'random'")
        h, w = self.image_size
        if h % 16 or w % 16:
            raise ConfigurationError("image size must be divisible by 16")
        return self

    @property
    def n_rates(self) -> int:
        return len(self.lambdas)

    @property
    def eta_range_db(self) -> tuple:
        return (self.eta_min_db, self.eta_max_db)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(d) - set(names)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for k, v in d.items():
            default = names[k].default
            if isinstance(default, tuple) and isinstance(v, list):
                v = tuple(v)
            elif isinstance(default, float) and isinstance(v, (int, str)) and not isinstance(v, bool):
                # YAML 1.1 reads "1e-3" as a string
                try:
                    v = float(v)
                except ValueError:
                    raise ConfigurationError(f"{k} must be a number, got {v!r}") from None
            kwargs[k] = v
        return cls(**kwargs).validate()


def parse_override(item: str):
    if "=" not in item:
        raise ConfigurationError(f"override {item!r} must look like key=value")
    key, raw = item.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def load_config(path=None, overrides=()) -> ExperimentConfig:
    d = {}
    if path is not None:
        d = yaml.safe_load(Path(path).read_text()) or {}
    for item in overrides:
        k, v = parse_override(item)
        d[k] = v
    return ExperimentConfig.from_dict(d)


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
