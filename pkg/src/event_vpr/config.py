"""Run configuration: one declarative document with a section per stage.

Unknown keys are rejected. Every default lives here.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError, ParameterError

REPRESENTATION_VARIANTS = ("est-mlp", "est-trilinear", "ef", "evg", "4ch")


@dataclass
class DataSection:
    manifest: str | None = None
    test_fraction: float = 0.25  # share of places held out for testing
    query_fraction: float = 0.5  # share of each test place's bins used as queries

    def validate(self):
        if not 0 < self.test_fraction < 1:
            raise ConfigError("data.test_fraction must be in (0, 1)")
        if not 0 < self.query_fraction < 1:
            raise ConfigError("data.query_fraction must be in (0, 1)")


@dataclass
class RepresentationSection:
    kind: str = "est"  # est | ef | evg | 4ch
    kernel: str = "mlp"  # trilinear | mlp (est only)
    channels: int = 5
    polarity_mode: str = "split"  # split (2C channels) | signed (C channels)
    tau_max: float = 1.5
    activation: str = "tanh"
    scale: float = 1.0

    def validate(self):
        if self.kind not in ("est", "ef", "evg", "4ch"):
            raise ConfigError(f"representation.kind {self.kind!r} not one of est, ef, evg, 4ch")
        if self.kernel not in ("trilinear", "mlp"):
            raise ConfigError(f"representation.kernel {self.kernel!r} not one of trilinear, mlp")
        if self.polarity_mode not in ("split", "signed"):
            raise ConfigError("representation.polarity_mode must be split or signed")
        if self.channels < 1:
            raise ConfigError("representation.channels must be >= 1")

    @property
    def out_channels(self) -> int:
        if self.kind == "est":
            return 2 * self.channels if self.polarity_mode == "split" else self.channels
        return {"evg": self.channels, "ef": 1, "4ch": 4}[self.kind]


@dataclass
class BackboneSection:
    architecture: str = "desk-small"
    input_channels: int | None = None  # derived from the representation when unset
    descriptor_depth: int = 128
    bias: bool = True
    freeze: bool = False

    def validate(self):
        if self.architecture not in ("desk-small", "paper-deep"):
            raise ConfigError("backbone.architecture must be desk-small or paper-deep")


@dataclass
class VladSection:
    num_clusters: int = 64
    alpha: float = 100.0
    eps: float = 1e-12
    normalize_input: bool = True
    init_bins: int = 64  # bins sampled for the k-means corpus
    init_descriptors: int = 4096  # local descriptors kept from them
    kmeans_max_iter: int = 100

    def validate(self):
        if self.num_clusters < 1:
            raise ConfigError("vlad.num_clusters must be >= 1")
        if not self.alpha > 0:
            raise ConfigError("vlad.alpha must be > 0")


@dataclass
class MiningSection:
    pos_radius: float = 10.0
    neg_radius: float = 25.0
    n_sample: int = 100
    n_neg: int = 10
    cache_interval: int = 1000

    def validate(self):
        if not 0 < self.pos_radius < self.neg_radius:
            raise ConfigError("mining requires 0 < pos_radius < neg_radius")
        if self.n_sample < 1 or self.n_neg < 0:
            raise ConfigError("mining.n_sample must be >= 1 and mining.n_neg >= 0")
        if not 500 <= self.cache_interval <= 1000:
            raise ConfigError("mining.cache_interval must be in [500, 1000]")


@dataclass
class TrainingSection:
    margin: float = 0.1
    optimizer: str = "adam"  # sgd | adam
    lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 0.0
    epochs: int = 6
    batch_size: int = 4  # triplets per step
    seed: int = 0
    checkpoint_every: int = 0  # epochs; 0 keeps only the final checkpoint
    eval_every: int = 1
    dtype: str = "float32"

    def validate(self):
        if not self.margin > 0:
            raise ConfigError("training.margin must be > 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError("training.optimizer must be sgd or adam")
        if not self.lr > 0:
            raise ConfigError("training.lr must be > 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("training.epochs must be >= 0 and batch_size >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("training.dtype must be float32 or float64")


@dataclass
class EvalSection:
    recall_ns: tuple[int, ...] = (1, 5, 10, 20)
    phi: float = 20.0
    batch_size: int = 32

    def validate(self):
        if not self.recall_ns or any(n < 1 for n in self.recall_ns):
            raise ConfigError("eval.recall_ns must be positive integers")
        if self.phi < 0:
            raise ConfigError("eval.phi must be >= 0")


@dataclass
class AblationSection:
    variants: tuple[str, ...] = REPRESENTATION_VARIANTS
    backbones: tuple[str, ...] = ("desk-small",)

    def validate(self):
        bad = [v for v in self.variants if v not in REPRESENTATION_VARIANTS]
        if bad:
            raise ConfigError(f"unknown ablation variant(s) {bad}")


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    representation: RepresentationSection = field(default_factory=RepresentationSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    vlad: VladSection = field(default_factory=VladSection)
    mining: MiningSection = field(default_factory=MiningSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    eval: EvalSection = field(default_factory=EvalSection)
    ablation: AblationSection = field(default_factory=AblationSection)

    def validate(self) -> RunConfig:
        for f in fields(self):
            getattr(self, f.name).validate()
        rc = self.representation.out_channels
        if self.backbone.input_channels is not None and self.backbone.input_channels != rc:
            raise ConfigError(
                f"backbone.input_channels={self.backbone.input_channels} but the representation yields {rc}"
            )
        return self

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, data: dict | None) -> RunConfig:
        return _build(cls, data or {}, "").validate()

    def with_overrides(self, **sections) -> RunConfig:
        """Copy with some keys replaced, e.g. ``with_overrides(training={"epochs": 0})``."""
        d = self.to_dict()
        for section, values in sections.items():
            if section not in d:
                raise ConfigError(f"unknown section {section!r}")
            d[section].update(values)
        return RunConfig.from_dict(d)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _check_scalar(value: Any, default: Any, where: str):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
    elif isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where} must be a list")
        return tuple(_check_scalar(v, default[0], where) for v in value) if default else tuple(value)
    return value


def _build(cls, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {prefix or '<root>'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join(prefix + k for k in unknown)}")
    defaults = cls()
    kwargs = {}
    for name, value in data.items():
        default = getattr(defaults, name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value if value is not None else {}, f"{prefix}{name}.")
        else:
            kwargs[name] = _check_scalar(value, default, prefix + name)
    try:
        return cls(**kwargs)
    except (TypeError, ParameterError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML/JSON: {exc}") from None
    cfg = RunConfig.from_dict(data)
    if cfg.data.manifest is not None and not Path(cfg.data.manifest).is_absolute():
        cfg.data.manifest = str((path.parent / cfg.data.manifest).resolve())
    return cfg


def write_resolved(cfg: RunConfig, out_dir) -> Path:
    path = Path(out_dir) / "resolved_config.json"
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
