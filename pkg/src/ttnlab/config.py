"""Run configuration: a JSON document with one section per pipeline stage.

Unknown keys are rejected, missing keys take the defaults below, and the
resolved document is what every command echoes into its output directory.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .adapt import METHODS, ORDERINGS, SCENARIOS, AdaptConfig, parse_method
from .nn import TrainConfig
from .posttrain import PosttrainConfig
from .shift import ALPHA_TRANSFORMS, CORRUPTIONS, PRIOR_TRANSFORMS, AugmentConfig, CorruptionSpec

SWEEP_AXES = ("const_alpha", "lambda", "batch_size", "scale")
ALPHA_GRANULARITIES = ("channel", "layer", "global")


class ConfigError(ValueError):
    """Invalid configuration (exit code 1)."""


@dataclass
class DataSection:
    dataset: str = "shapeset"  # or "cifar10"
    n_per_class: int = 500
    num_classes: int = 10
    train_files: list = field(default_factory=list)
    test_files: list = field(default_factory=list)

    def check(self):
        if self.dataset not in ("shapeset", "cifar10"):
            raise ConfigError(f"data.dataset must be 'shapeset' or 'cifar10', got {self.dataset!r}")
        if self.dataset == "cifar10" and not (self.train_files and self.test_files):
            raise ConfigError("data.dataset 'cifar10' needs train_files and test_files")
        if self.dataset == "shapeset" and self.n_per_class < 10:
            raise ConfigError("data.n_per_class must be >= 10")


@dataclass
class ModelSection:
    arch: str = "tiny_convnet"
    dtype: str = "float32"

    def check(self):
        if self.arch != "tiny_convnet":
            raise ConfigError(f"model.arch {self.arch!r} is not supported")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("model.dtype must be float32 or float64")


@dataclass
class PretrainSection:
    epochs: int = 5
    batch_size: int = 64
    lr: float = 1e-2
    optimizer: str = "adam"
    schedule: str = "cosine"
    momentum: float = 0.1

    def build(self, seed: int) -> TrainConfig:
        return TrainConfig(**asdict(self), seed=seed)


@dataclass
class PosttrainSection:
    prior_samples: int = 1024
    prior_micro_batch: int = 1
    epochs: int = 30
    batch_size: int = 200
    lr: float = 1e-3
    lam: float = 1.0
    init: str = "prior"
    losses: list = field(default_factory=lambda: ["ce", "mse"])
    dynamic_batch: list | None = None
    samples_per_epoch: int | None = None
    prior_transforms: list = field(default_factory=lambda: list(PRIOR_TRANSFORMS))
    alpha_transforms: list = field(default_factory=lambda: list(ALPHA_TRANSFORMS))

    def build(self, seed: int) -> PosttrainConfig:
        kw = {f.name: getattr(self, f.name) for f in fields(PosttrainConfig) if hasattr(self, f.name)}
        kw["dynamic_batch"] = None if self.dynamic_batch is None else tuple(self.dynamic_batch)
        return PosttrainConfig(**kw, seed=seed)

    def prior_aug(self, seed: int) -> AugmentConfig:
        return AugmentConfig(tuple(self.prior_transforms), seed=seed)

    def alpha_aug(self, seed: int) -> AugmentConfig:
        return AugmentConfig(tuple(self.alpha_transforms), seed=seed)


@dataclass
class AdaptSection:
    methods: list = field(default_factory=lambda: ["CBN", "TBN", "CONST_ALPHA(0.1)", "ADAPTIVE_BN", "TTN"])
    scenarios: list = field(default_factory=lambda: ["single"])
    batch_sizes: list = field(default_factory=lambda: [200, 64, 16, 4, 2, 1])
    corruptions: list = field(default_factory=lambda: list(CORRUPTIONS))
    severity: int = 5
    episode_length: int | None = None
    ordering: str = "shuffled"
    lr: float = 1e-3
    accum_samples: int = 200
    reset: str = "per_corruption"
    anchor_weight: float = 1.0
    scale: float = 0.4
    online_lr: float | None = None
    alpha_granularity: str = "channel"  # post-hoc averaging of the loaded alpha: channel, layer or global

    def check(self):
        if not self.methods:
            raise ConfigError("adapt.methods must not be empty")
        for m in self.methods:
            parse_method(m)
        for s in self.scenarios:
            if s not in SCENARIOS:
                raise ConfigError(f"adapt.scenarios: unknown scenario {s!r}")
        if self.ordering not in ORDERINGS:
            raise ConfigError(f"adapt.ordering must be one of {ORDERINGS}")
        if not self.batch_sizes or any(int(b) < 1 for b in self.batch_sizes):
            raise ConfigError("adapt.batch_sizes must be a nonempty list of positive integers")
        if not 1 <= self.severity <= 5:
            raise ConfigError("adapt.severity must lie in 1..5")
        if self.alpha_granularity not in ALPHA_GRANULARITIES:
            raise ConfigError(f"adapt.alpha_granularity must be one of {ALPHA_GRANULARITIES}")
        self.corruption_specs()

    def corruption_specs(self) -> list[CorruptionSpec]:
        """Entries are ``kind`` or ``kind:severity``; the bare form uses ``severity``."""
        specs = []
        for text in self.corruptions:
            spec = CorruptionSpec.parse(text) if ":" in text else CorruptionSpec(text, self.severity)
            specs.append(spec)
        if len({s.kind for s in specs}) != len(specs):
            raise ConfigError("adapt.corruptions lists a kind twice")
        return specs

    def adapt_config(self, method: str, seed: int, reset: str | None = None) -> AdaptConfig:
        return AdaptConfig(method=method, lr=self.lr, accum_samples=self.accum_samples,
                           reset=reset or self.reset, anchor_weight=self.anchor_weight, scale=self.scale,
                           online_lr=self.online_lr, seed=seed)


@dataclass
class SweepSection:
    axis: str = "const_alpha"
    values: list = field(default_factory=lambda: [round(0.1 * i, 1) for i in range(11)])

    def check(self):
        if self.axis not in SWEEP_AXES:
            raise ConfigError(f"sweep.axis must be one of {SWEEP_AXES}, got {self.axis!r}")
        if not self.values:
            raise ConfigError("sweep.values must not be empty")


@dataclass
class OutputSection:
    dir: str = "runs/default"


SECTIONS = {
    "data": DataSection, "model": ModelSection, "pretrain": PretrainSection, "posttrain": PosttrainSection,
    "adapt": AdaptSection, "sweep": SweepSection, "output": OutputSection,
}


@dataclass
class RunConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    posttrain: PosttrainSection = field(default_factory=PosttrainSection)
    adapt: AdaptSection = field(default_factory=AdaptSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    output: OutputSection = field(default_factory=OutputSection)

    def to_dict(self) -> dict:
        return asdict(self)


def _section(name: str, raw) -> object:
    cls = SECTIONS[name]
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in section {name!r}: {', '.join(unknown)}")
    try:
        obj = cls(**copy.deepcopy(raw))
    except TypeError as exc:
        raise ConfigError(f"section {name!r}: {exc}") from None
    return obj


def from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - set(SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    cfg = RunConfig(seed=seed, **{name: _section(name, doc.get(name, {})) for name in SECTIONS})
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    """Run every section's checks, converting library errors to ConfigError."""
    try:
        cfg.data.check()
        cfg.model.check()
        cfg.pretrain.build(cfg.seed)
        cfg.posttrain.build(cfg.seed)
        cfg.posttrain.prior_aug(cfg.seed)
        cfg.posttrain.alpha_aug(cfg.seed)
        cfg.adapt.check()
        for m in cfg.adapt.methods:
            cfg.adapt.adapt_config(m, cfg.seed)
        cfg.sweep.check()
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> RunConfig:
    """Parse and validate a config file; JSON syntax errors report line and column."""
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return from_dict(doc)


__all__ = ["ConfigError", "RunConfig", "SWEEP_AXES", "METHODS", "from_dict", "load_config", "validate"]
