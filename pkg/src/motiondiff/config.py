"""Experiment configuration: TOML with sections [data], [schedule], [network],
[train], [refine], [eval]. Every key must be present; unknown keys are errors."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli
import tomli_w

from .errors import ConfigError
from .networks import NetworkConfig
from .refine import RefineConfig


@dataclass
class DataConfig:
    dir: str = "data/train"
    T: int = 25
    f: int = 100
    stride: int = 1
    root: int = 0


@dataclass
class ScheduleConfig:
    K: int = 100
    beta_1: float = 1e-4
    beta_K: float = 0.05


@dataclass
class OptimConfig:
    lr: float = 5e-4
    epochs: int = 500
    batch_size: int = 64
    decay_start: int = 100
    decay_final: float = 0.1  # lr at the last epoch, as a fraction of lr
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    k_per_example: int = 1
    precision: str = "float64"

    def __post_init__(self):
        if self.precision not in ("float32", "float64"):
            raise ValueError("train.precision must be 'float32' or 'float64'")
        if not self.lr > 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("train.lr, train.epochs and train.batch_size must be positive")
        if not 0 <= self.decay_start <= self.epochs:
            raise ValueError("train.decay_start must lie in [0, epochs]")
        if not 0 < self.decay_final <= 1:
            raise ValueError("train.decay_final must lie in (0, 1]")
        if self.k_per_example < 1:
            raise ValueError("train.k_per_example must be >= 1")


@dataclass
class RefineTrainConfig:
    N: int = 50
    epochs: int = 50
    lr: float = 5e-4
    batch_size: int = 16
    seed: int = 0
    stride: int = 1  # window stride for the refiner's training set
    resample_every: int = 1  # epochs between fresh draws of the N samples

    def __post_init__(self):
        if self.resample_every < 1:
            raise ValueError("refine.resample_every must be >= 1")
        if self.stride < 1:
            raise ValueError("refine.stride must be >= 1")
        if self.N < 2:
            raise ValueError("refine.N must be >= 2")
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("refine.epochs, refine.batch_size and refine.lr must be positive")


@dataclass
class EvalConfig:
    N: int = 50
    delta: float = 0.5
    stride: int = 125
    seed: int = 0


@dataclass
class TrainConfig:
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: OptimConfig = field(default_factory=OptimConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    refine_train: RefineTrainConfig = field(default_factory=RefineTrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        # network T/f always follow the data windows
        self.network.T, self.network.f = self.data.T, self.data.f

    def to_toml_dict(self) -> dict:
        net = self.network.to_dict()
        del net["T"], net["f"]
        return {
            "data": asdict(self.data),
            "schedule": asdict(self.schedule),
            "network": net,
            "train": asdict(self.train),
            "refine": {**self.refine.to_dict(), **asdict(self.refine_train)},
            "eval": asdict(self.eval),
        }


def full_profile(data_dir: str = "data/train") -> TrainConfig:
    """Published full-scale settings: 17 joints, 25 observed and 100 future frames, K=100."""
    return TrainConfig(data=DataConfig(dir=data_dir))


def desk_profile(data_dir: str = "data/train") -> TrainConfig:
    """Small enough to train on a laptop CPU in minutes.

    Sized for 128 synthetic sequences of 200 frames. Flattened joint tokens
    keep per-joint detail in the past encoding at this width, and the chain
    diffuses offsets from the last observed frame scaled to roughly unit spread.
    """
    return TrainConfig(
        data=DataConfig(dir=data_dir, T=8, f=16, stride=16),
        schedule=ScheduleConfig(K=50, beta_1=1e-4, beta_K=0.05),
        network=NetworkConfig(J=5, c=16, d_model=64, n_heads=4, n_spatial_layers=1,
                              n_temporal_layers=2, d_c=64, head_dims=(64, 32),
                              encoder_pool="flatten", target="offset", target_scale=3.0),
        train=OptimConfig(lr=2e-3, epochs=80, batch_size=32, decay_start=10, seed=0,
                          precision="float32"),
        refine=RefineConfig(n_gcn_layers=4, gcn_hidden=64, cond_dim=16,
                            lam=0.01, gamma=0.005, sigma=100.0),
        refine_train=RefineTrainConfig(N=10, epochs=10, lr=1e-3, batch_size=16, stride=32,
                                       resample_every=5),
        eval=EvalConfig(N=10, delta=0.5, stride=24, seed=0),
    )


def _section(cls, raw: dict, name: str, skip=()):
    expected = [f.name for f in fields(cls) if f.name not in skip]
    for key in raw:
        if key not in expected:
            raise ConfigError(f"unknown config key: {name}.{key}")
    for key in expected:
        if key not in raw:
            raise ConfigError(f"missing config key: {name}.{key}")
    try:
        return cls(**{k: raw[k] for k in expected})
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid [{name}] section: {e}") from None


def config_from_dict(raw: dict) -> TrainConfig:
    sections = ["data", "schedule", "network", "train", "refine", "eval"]
    for s in raw:
        if s not in sections:
            raise ConfigError(f"unknown config section: [{s}]")
    for s in sections:
        if s not in raw:
            raise ConfigError(f"missing config section: [{s}]")
    data = _section(DataConfig, raw["data"], "data")
    net_raw = dict(raw["network"], T=data.T, f=data.f)
    for k in ("T", "f"):
        if k in raw["network"]:
            raise ConfigError(f"unknown config key: network.{k} (set data.{k})")
    refine_keys = {f.name for f in fields(RefineConfig)}
    ref_raw = {k: v for k, v in raw["refine"].items() if k in refine_keys}
    rt_raw = {k: v for k, v in raw["refine"].items() if k not in refine_keys}
    for key in set(refine_keys) - set(ref_raw):
        raise ConfigError(f"missing config key: refine.{key}")
    return TrainConfig(
        data=data,
        schedule=_section(ScheduleConfig, raw["schedule"], "schedule"),
        network=_section(NetworkConfig, net_raw, "network"),
        train=_section(OptimConfig, raw["train"], "train"),
        refine=_section(RefineConfig, ref_raw, "refine"),
        refine_train=_section(RefineTrainConfig, rt_raw, "refine"),
        eval=_section(EvalConfig, raw["eval"], "eval"),
    )


def load_config(path) -> TrainConfig:
    with open(path, "rb") as fh:
        raw = tomli.load(fh)
    cfg = config_from_dict(raw)
    # a relative data dir is resolved against the config file's directory
    data_dir = Path(cfg.data.dir)
    if not data_dir.is_absolute():
        cfg.data.dir = str((Path(path).parent / data_dir).resolve())
    return cfg


def dump_config(cfg: TrainConfig) -> str:
    return tomli_w.dumps(cfg.to_toml_dict())


def save_config(path, cfg: TrainConfig) -> None:
    Path(path).write_text(dump_config(cfg), encoding="utf-8")
