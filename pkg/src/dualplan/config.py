"""Experiment configuration: nested dataclasses serialised as versioned JSON.

The config hash is the sha256 of the canonical JSON (sorted keys, no
whitespace) and is stamped into checkpoints, reports and run manifests.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ConfigError
from .scenario import GridConfig, ScenarioConfig

CONFIG_VERSION = 1
ENV_CONFIG = "DUALPLAN_CONFIG"
STAGE_ORDER = ("static", "detection", "lane")


@dataclass
class DataConfig:
    n_train: int = 400
    n_val: int = 60
    n_test: int = 500


@dataclass
class BankConfig:
    k: int = 36
    k_l: int = 5
    max_iter: int = 100


@dataclass
class ModelConfig:
    d: int = 64
    heads: int = 4
    layers: int = 2
    ffn: int = 128
    n_collect: int = 48
    n_det: int = 32
    n_lane: int = 16
    lane_points: int = 4
    memory_frames: int = 4
    stage_order: tuple = STAGE_ORDER
    # which stages read the temporal memory
    memory_stages: tuple = ("detection", "lane")
    n_short: int = 6
    n_long: int = 8


@dataclass
class SynergyConfig:
    delay: float = 1.0
    period: float = 1.0
    capacity: int = 8
    jitter: float = 0.0
    first_launch_tick: int = 4


@dataclass
class StageConfig:
    epochs: int
    lr: float


@dataclass
class TrainConfig:
    batch: int = 16
    ego_mlp: StageConfig = field(default_factory=lambda: StageConfig(100, 1e-3))
    compressor: StageConfig = field(default_factory=lambda: StageConfig(6, 2e-3))
    adapter: StageConfig = field(default_factory=lambda: StageConfig(12, 1e-3))
    e2e_head: StageConfig = field(default_factory=lambda: StageConfig(12, 1e-3))
    joint: StageConfig = field(default_factory=lambda: StageConfig(2, 3e-4))
    synergy: StageConfig = field(default_factory=lambda: StageConfig(6, 3e-4))
    baseline: StageConfig = field(default_factory=lambda: StageConfig(12, 1e-3))
    select_weight: float = 1.0
    select_tau: float = 1.0  # metres; 0 selects with one-hot oracle labels
    teacher_frac: float = 0.5
    refine_weight: float = 1.0
    aux_weight: float = 0.5
    clip_norm: float = 5.0
    dtype: str = "float32"


@dataclass
class ExperimentConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    data: DataConfig = field(default_factory=DataConfig)
    bank: BankConfig = field(default_factory=BankConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    synergy: SynergyConfig = field(default_factory=SynergyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    version: int = CONFIG_VERSION

    def validate(self) -> "ExperimentConfig":
        self.scenario.validate()
        m = self.model
        if m.d % m.heads:
            raise ConfigError(f"d={m.d} not divisible by heads={m.heads}")
        if sorted(m.stage_order) != sorted(STAGE_ORDER):
            raise ConfigError(f"stage_order must be a permutation of {STAGE_ORDER}")
        if m.n_long != self.scenario.horizon_long or m.n_short != self.scenario.horizon_short:
            raise ConfigError("model horizons disagree with scenario horizons")
        if not 1 <= self.bank.k_l <= self.bank.k:
            raise ConfigError(f"k_l={self.bank.k_l} outside 1..{self.bank.k}")
        if self.synergy.delay < 0 or self.synergy.period <= 0:
            raise ConfigError("synergy delay must be >= 0 and period > 0")
        if self.train.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.train.dtype}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scenario"] = self.scenario.to_dict()
        return _listify(d)

    def hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()

    def with_overrides(self, **changes) -> "ExperimentConfig":
        """Dotted-key overrides, e.g. ``{"model.n_collect": 96}``."""
        d = self.to_dict()
        for key, value in changes.items():
            node = d
            *path, leaf = key.split(".")
            for p in path:
                if p not in node:
                    raise ConfigError(f"unknown config key {key}")
                node = node[p]
            if leaf not in node:
                raise ConfigError(f"unknown config key {key}")
            node[leaf] = value
        return ExperimentConfig.from_dict(d)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        version = d.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"config version {version}, expected {CONFIG_VERSION}")
        try:
            scen = ScenarioConfig.from_dict(d.pop("scenario", {}))
            train = dict(d.pop("train", {}))
            for k, v in list(train.items()):
                if isinstance(v, dict):
                    train[k] = StageConfig(**v)
            model = dict(d.pop("model", {}))
            for k in ("stage_order", "memory_stages"):
                if k in model:
                    model[k] = tuple(model[k])
            cfg = cls(
                scenario=scen,
                data=DataConfig(**d.pop("data", {})),
                bank=BankConfig(**d.pop("bank", {})),
                model=ModelConfig(**model),
                synergy=SynergyConfig(**d.pop("synergy", {})),
                train=TrainConfig(**train),
                **d,
            )
        except TypeError as e:
            raise ConfigError(f"bad config: {e}") from e
        return cfg.validate()


def _listify(obj):
    if isinstance(obj, dict):
        return {k: _listify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_listify(v) for v in obj]
    return obj


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def load_config(path=None) -> ExperimentConfig:
    """Load from ``path``, else from $DUALPLAN_CONFIG, else defaults."""
    path = path or os.environ.get(ENV_CONFIG)
    if not path:
        return ExperimentConfig().validate()
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return ExperimentConfig.from_dict(raw)


def save_config(path, cfg: ExperimentConfig) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n")


def small_grid(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    """Copy of ``cfg`` with a replaced render grid (tests use tiny grids)."""
    scen = dataclasses.replace(cfg.scenario, grid=GridConfig(**kw))
    return dataclasses.replace(cfg, scenario=scen)
