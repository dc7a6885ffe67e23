"""Declarative run configuration (YAML).

Unknown keys are rejected at every level.  ``RunConfig.resolved()`` returns
the full config with every default filled in; commands write it next to
their outputs.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .model import ModelConfig
from .noise import NoiseDomain, awgn_domain
from .tensor import ConfigurationError
from .train import TrainConfig


@dataclass
class NoiseConfig:
    kind: str = "pipeline"  # "pipeline" or "awgn"
    sigma_s: tuple[float, float] = (0.0, 0.16)
    sigma_c: tuple[float, float] = (0.0, 0.06)
    crf_gamma: tuple[float, float] = (1.6, 2.6)
    field_strength: float = 0.0
    awgn_sigma: tuple[float, float] = (25 / 255, 25 / 255)

    def __post_init__(self):
        if self.kind not in ("pipeline", "awgn"):
            raise ConfigurationError(f"noise.kind must be 'pipeline' or 'awgn', got {self.kind!r}")
        for name in ("sigma_s", "sigma_c", "crf_gamma", "awgn_sigma"):
            value = getattr(self, name)
            if isinstance(value, (int, float)):
                value = (value, value)
            value = tuple(float(v) for v in value)
            if len(value) != 2 or value[0] > value[1] or value[0] < 0:
                raise ConfigurationError(f"noise.{name} must be a range [lo, hi] with 0 <= lo <= hi")
            setattr(self, name, value)

    def domain(self) -> NoiseDomain:
        if self.kind == "awgn":
            return awgn_domain(self.awgn_sigma)
        try:
            return NoiseDomain(self.sigma_s, self.sigma_c, self.crf_gamma, self.field_strength)
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from exc


def _default_target() -> NoiseConfig:
    return NoiseConfig(sigma_s=(0.02, 0.12), sigma_c=(0.01, 0.05), crf_gamma=(1.0, 1.0),
                       field_strength=0.5)


@dataclass
class DataConfig:
    clean_dir: str | None = None  # None -> procedurally generated scenes
    synthetic_count: int = 64
    synthetic_size: int = 64
    dataset_dir: str | None = None  # synthesized pairs for train/transfer/eval
    val_dir: str | None = None


@dataclass
class FewshotConfig:
    ks: tuple[int, ...] = (0, 1, 4)
    modes: tuple[str, ...] = ("scratch_rn", "retrain_all", "transfer")
    train_pairs: int = 4
    test_pairs: int = 8
    image_size: int = 64


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    target_noise: NoiseConfig = field(default_factory=_default_target)
    data: DataConfig = field(default_factory=DataConfig)
    fewshot: FewshotConfig = field(default_factory=FewshotConfig)

    def train_config(self, **overrides) -> TrainConfig:
        d = {**self.train.to_dict(), "seed": self.seed, **overrides}
        return TrainConfig(**d)

    def resolved(self) -> dict:
        out = _plain(dataclasses.asdict(self))
        for section, keys in _HIDDEN.items():
            for k in keys:
                out[section].pop(k, None)
        return out

    def dump(self) -> str:
        return yaml.safe_dump(self.resolved(), sort_keys=False)


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "noise": NoiseConfig,
             "target_noise": NoiseConfig, "data": DataConfig, "fewshot": FewshotConfig}
_HIDDEN = {"train": {"seed"}}  # derived from the top-level seed


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, values: dict, section: str):
    if not isinstance(values, dict):
        raise ConfigurationError(f"section {section!r} must be a mapping")
    allowed = {f.name for f in dataclasses.fields(cls)} - _HIDDEN.get(section, set())
    unknown = set(values) - allowed
    if unknown:
        raise ConfigurationError(f"unknown key(s) in {section}: {sorted(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigurationError(f"{section}: {exc}") from exc


def config_from_dict(raw: dict | None) -> RunConfig:
    raw = dict(raw or {})
    unknown = set(raw) - {"seed", *_SECTIONS}
    if unknown:
        raise ConfigurationError(f"unknown top-level key(s): {sorted(unknown)}")
    kwargs = {}
    if "seed" in raw:
        if not isinstance(raw["seed"], int):
            raise ConfigurationError("seed must be an integer")
        kwargs["seed"] = raw["seed"]
    for name, cls in _SECTIONS.items():
        if name in raw:
            kwargs[name] = _build(cls, raw[name] or {}, name)
    return RunConfig(**kwargs)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file {p} not found")
    try:
        raw = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"cannot parse {p}: {exc}".replace("\n", " ")) from exc
    return config_from_dict(raw)
