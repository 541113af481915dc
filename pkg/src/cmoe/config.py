"""Run configuration: a YAML file of five sections plus flat CLI overrides.

Unknown sections or keys are rejected rather than ignored, so a typo like
``model.num_expert`` fails loudly instead of silently training the default.
Override values are parsed with YAML scalar rules, hence ``true``, ``null``
and ``5e-4`` mean what they look like.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .features import FEATURE_KINDS, EffectiveBand
from .optim import SCHEDULES

_NORM_FUNCS = ("softmax", "sigmoid")


@dataclass
class DatasetSection:
    manifest: str | None = None
    split_table: str | None = None  # path or a bundled table name
    sample_rate: int | None = None
    band: list | None = None  # [f_lo, f_hi] Hz


@dataclass
class FeatureSection:
    kind: str = "mel"
    frame_ms: float = 50.0
    shift_ms: float | None = None  # defaults to frame_ms / 2
    n_filters: int = 300
    stft_component: str = "real"
    cqt_b: int = 48
    cqt_hop_ms: float = 100.0 / 3.0
    cache_dir: str | None = None


@dataclass
class ModelSection:
    num_experts: int = 4
    residual: bool = False
    norm_func: str = "softmax"
    balance: bool = True
    alpha: float = 1e-2
    attn_heads: int = 4


@dataclass
class TrainSection:
    lr: float = 5e-4
    weight_decay: float = 1e-5
    epochs: int = 200
    batch_size: int = 32
    seed: int | None = None  # None runs the default seed pair
    schedule: str = "cosine"


@dataclass
class OutSection:
    dir: str = "runs"


_SECTIONS = {
    "dataset": DatasetSection,
    "feature": FeatureSection,
    "model": ModelSection,
    "train": TrainSection,
    "out": OutSection,
}

SEED_PAIR = (42, 123)


@dataclass
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    feature: FeatureSection = field(default_factory=FeatureSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    out: OutSection = field(default_factory=OutSection)

    def validate(self) -> "RunConfig":
        f, m, t = self.feature, self.model, self.train
        if f.kind not in FEATURE_KINDS:
            raise ConfigError(f"feature.kind must be one of {FEATURE_KINDS}, got {f.kind!r}")
        if m.norm_func not in _NORM_FUNCS:
            raise ConfigError(f"model.norm_func must be one of {_NORM_FUNCS}")
        if m.num_experts < 1 or m.attn_heads < 1:
            raise ConfigError("model.num_experts and model.attn_heads must be >= 1")
        if m.alpha < 0:
            raise ConfigError("model.alpha must be >= 0")
        if t.schedule not in SCHEDULES:
            raise ConfigError(f"train.schedule must be one of {sorted(SCHEDULES)}")
        if t.epochs < 1 or t.batch_size < 1:
            raise ConfigError("train.epochs and train.batch_size must be >= 1")
        if self.dataset.band is not None:
            band = self.dataset.band
            if not (isinstance(band, (list, tuple)) and len(band) == 2):
                raise ConfigError("dataset.band must be a [f_lo, f_hi] pair")
        return self

    def band(self) -> EffectiveBand:
        if self.dataset.band is None:
            raise ConfigError("dataset.band is required for feature extraction")
        lo, hi = self.dataset.band
        return EffectiveBand(float(lo), float(hi))

    def feature_kwargs(self) -> dict:
        f = self.feature
        return dict(frame_ms=f.frame_ms, shift_ms=f.shift_ms, n_filters=f.n_filters,
                    stft_component=f.stft_component, cqt_b=f.cqt_b, cqt_hop_ms=f.cqt_hop_ms)

    def seeds(self) -> tuple:
        return SEED_PAIR if self.train.seed is None else (self.train.seed,)

    def out_dir(self) -> Path:
        return Path(self.out.dir)


def _coerce(section: str, key: str, value, default):
    """Light type discipline keyed off each field's default."""
    if value is None or default is None:
        return value
    want = type(default)
    if want is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{section}.{key} expects a boolean, got {value!r}")
        return value
    if want is int:
        if isinstance(value, str):
            try:
                value = int(value)
            except ValueError:
                raise ConfigError(f"{section}.{key} expects an integer, got {value!r}") from None
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{section}.{key} expects an integer, got {value!r}")
        return value
    if want is float:
        # YAML 1.1 reads "5e-4" as a string (no dot); accept it as a number anyway
        if isinstance(value, str):
            try:
                value = float(value)
            except ValueError:
                raise ConfigError(f"{section}.{key} expects a number, got {value!r}") from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{section}.{key} expects a number, got {value!r}")
        return float(value)
    if want is str:
        if not isinstance(value, str):
            raise ConfigError(f"{section}.{key} expects a string, got {value!r}")
        return value
    return value


def _build(section: str, cls, data: dict):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {sorted(unknown)}")
    defaults = cls()
    kwargs = {}
    for key, value in data.items():
        kwargs[key] = _coerce(section, key, value, getattr(defaults, key))
    return cls(**kwargs)


def load_config(path=None, overrides=()) -> RunConfig:
    """Build a RunConfig from an optional YAML file plus dotted overrides.

    overrides is a sequence of ("section.key", "raw value") pairs, applied
    after the file in order.
    """
    data: dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                loaded = yaml.safe_load(fh)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse config {path}: {e}") from None
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping of sections")
        data = loaded
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    for name in _SECTIONS:
        if data.get(name) is not None and not isinstance(data[name], dict):
            raise ConfigError(f"section [{name}] must be a mapping")
    merged = {name: dict(data.get(name) or {}) for name in _SECTIONS}
    for path_key, raw in overrides:
        if "." not in path_key:
            raise ConfigError(f"override {path_key!r} must look like section.key")
        section, key = path_key.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        try:
            value = yaml.safe_load(raw) if isinstance(raw, str) else raw
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse override {path_key}={raw!r}: {e}") from None
        merged[section][key] = value
    cfg = RunConfig(**{name: _build(name, cls, merged[name])
                       for name, cls in _SECTIONS.items()})
    return cfg.validate()
