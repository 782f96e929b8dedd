"""Experiment configuration: one YAML tree per experiment, hashed canonically."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import yaml

from dmdlab.data import CHECKERBOARD, COMPONENT_LABEL, TWO_MOONS, UNCONDITIONAL, DatasetSpec, ring_mixture, standardize
from dmdlab.distill import TrainConfig
from dmdlab.errors import ConfigError, ContractViolation
from dmdlab.nets import DiscConfig, NetConfig
from dmdlab.schedules import Schedule


@dataclass(frozen=True)
class DatasetConfig:
    family: str = "ring"  # ring | two_moons | checkerboard
    k: int = 8
    radius: float = 4.0
    std: float = 0.3
    condition_mode: str = COMPONENT_LABEL
    standardize: bool = True

    def build(self) -> DatasetSpec:
        if self.family == "ring":
            spec = ring_mixture(self.k, self.radius, self.std, self.condition_mode)
            return standardize(spec) if self.standardize else spec
        if self.family == TWO_MOONS:
            return DatasetSpec(TWO_MOONS, (), self.condition_mode)
        if self.family == CHECKERBOARD:
            return DatasetSpec(CHECKERBOARD, (), UNCONDITIONAL)
        raise ConfigError(f"unknown dataset family {self.family!r}")


@dataclass(frozen=True)
class TeacherConfig:
    iters: int = 20000
    lr: float = 1e-3
    batch: int = 256
    seed: int = 0
    eval_steps: int = 32


@dataclass(frozen=True)
class EvalConfig:
    every: int = 50
    n: int = 4096
    seed: int = 123


@dataclass(frozen=True)
class TrackConfig:
    enabled: bool = True
    n: int = 256
    seed: int = 7
    keep_every: int = 60
    probe_scale: float = 1e-3
    n_probes: int = 4


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    schedule: str = "fmot"
    net: NetConfig = field(default_factory=NetConfig)
    disc: DiscConfig = field(default_factory=DiscConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    track: TrackConfig = field(default_factory=TrackConfig)
    seeds: tuple[int, ...] = (0, 1, 2)
    out: str = "runs/default"

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seed list must be nonempty")
        if self.eval.every < 1:
            raise ConfigError("eval cadence must be a positive iteration count")
        n_cond = self.dataset.build().n_conditions
        if self.net.n_cond < n_cond or self.disc.n_cond < n_cond:
            raise ConfigError(f"nets embed {self.net.n_cond} conditions but the dataset has {n_cond}")
        Schedule(self.schedule)

    def with_train(self, **kw) -> "ExperimentConfig":
        return _replace(self, train=_replace(self.train, **kw))

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]


def _replace(obj, **kw):
    try:
        return replace(obj, **kw)
    except (ContractViolation, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _build(cls, raw, where: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping")
    unknown = set(raw) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    base = cls()
    kw = {}
    for name, value in raw.items():
        default = getattr(base, name)
        if is_dataclass(default):
            kw[name] = _build(type(default), value, f"{where}.{name}")
        elif isinstance(default, tuple):
            kw[name] = tuple(value)
        else:
            kw[name] = value
    try:
        return cls(**kw)
    except (ContractViolation, TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(raw: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, raw, "config")


def load_config(path) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(raw)


def dump_config(cfg: ExperimentConfig) -> str:
    """Sorted-key YAML with LF line endings."""
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True, default_flow_style=False)
