"""Pipeline configuration: nested dataclasses loaded from YAML or JSON.

Defaults: 1 km cells, 30 min slots, 200 m /
10 min stay points, top-25% cells, top-10% high class, k=12, 8:2 split,
batch 16, loss weights (0.7, 1.2, 1.1), vote weights (1.1, 1.1, 0.5, 1.3),
ten seeds.  :func:`default_fixture` swaps in the desk-scale synthetic world
and a smaller training budget.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .ensemble import EnsembleConfig
from .models import KINDS, ModelConfig, TrainConfig
from .synth import WorldConfig


class ConfigError(ValueError):
    pass


@dataclass
class StayConfig:
    delta: float = 200.0
    theta: float = 600.0
    max_gap: float = 1800.0


@dataclass
class GridConfig:
    cell_size: float = 1000.0
    slot_len: int = 1800
    bbox: tuple | None = None        # (lat_min, lon_min, lat_max, lon_max); data extent when None
    t0: int | None = None            # start of slot 0; first fix floored to a day when None
    n_slots: int | None = None       # through the last fix when None
    tz: str = "UTC"


@dataclass
class LabelConfig:
    downsample: bool = True          # False trains on every grid cell (ablation)
    keep_fraction: float = 0.25
    top_fraction: float = 0.10
    medium_bound: int | None = None  # pin the class bound (e.g. 4) instead of deriving it


@dataclass
class FeatureConfig:
    k: int = 12
    horizon: int = 1
    dtw_radius: int = 1
    train_ratio: float = 0.8
    chronological: bool = True
    inputs: str = "onehot"           # or "counts"


@dataclass
class PipelineConfig:
    trajectories: str | None = None  # input CSV; the synthetic world is generated when None
    synth: WorldConfig | None = None
    stay: StayConfig = field(default_factory=StayConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    labels: LabelConfig = field(default_factory=LabelConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    models: dict = field(default_factory=lambda: {k: ModelConfig(kind=k) for k in KINDS})
    train: TrainConfig = field(default_factory=TrainConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    seeds: list = field(default_factory=lambda: list(range(10)))
    jobs: int = 1
    geojson_seed: int | None = None  # which seed's predictions to map; first seed when None

    def __post_init__(self):
        self.seeds = [int(s) for s in self.seeds]
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if self.trajectories is None and self.synth is None:
            raise ConfigError("set either trajectories (input CSV) or synth (generator config)")
        if set(self.models) != set(KINDS):
            raise ConfigError(f"models must configure exactly {KINDS}")
        if self.features.inputs not in ("onehot", "counts"):
            raise ConfigError("features.inputs must be 'onehot' or 'counts'")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data):
    if data is None:
        return None
    if isinstance(data, cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{cls.__name__} section must be a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from exc


def from_dict(data: dict) -> PipelineConfig:
    data = dict(data or {})
    known = {f.name for f in dataclasses.fields(PipelineConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kw = dict(data)
    for name, cls in (("synth", WorldConfig), ("stay", StayConfig), ("grid", GridConfig),
                      ("labels", LabelConfig), ("features", FeatureConfig),
                      ("train", TrainConfig), ("ensemble", EnsembleConfig)):
        if name in kw:
            kw[name] = _build(cls, kw[name])
    if "models" in kw:
        models = {k: ModelConfig(kind=k) for k in KINDS}
        for kind, section in (kw["models"] or {}).items():
            if kind not in models:
                raise ConfigError(f"unknown model {kind!r}")
            section = dict(section or {})
            section.setdefault("kind", kind)
            models[kind] = _build(ModelConfig, section)
        kw["models"] = models
    try:
        return PipelineConfig(**kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load(path) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    return from_dict(data)


def dump(cfg: PipelineConfig, path):
    path = Path(path)
    d = cfg.to_dict()
    if path.suffix == ".json":
        path.write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
    else:
        path.write_text(yaml.safe_dump(d, sort_keys=True))


def fixture_models(hidden=8) -> dict:
    return {k: ModelConfig(kind=k, hidden=hidden) for k in KINDS}


def default_fixture(**overrides) -> PipelineConfig:
    """The synthetic ~64-cell, 14-day world with a desk-scale training budget."""
    cfg = dict(
        synth=WorldConfig(),
        labels=LabelConfig(keep_fraction=0.5),
        models=fixture_models(),
        train=TrainConfig(lr=0.01, epochs=6, patience=6),
    )
    cfg.update(overrides)
    return PipelineConfig(**cfg)
