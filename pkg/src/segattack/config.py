"""Declarative experiment configuration (TOML) with strict validation."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .errors import ConfigError

GRADIENT_SERVICE_ENV = "FB_GRADIENT_SERVICE"


def parse_fraction(text) -> float:
    """Parse ``"8/255"``, ``"0.5"`` or a number exactly as a rational, then round once to double."""
    if isinstance(text, bool):
        raise ConfigError(f"not a number: {text!r}")
    if isinstance(text, (int, float)):
        return float(text)
    try:
        return float(Fraction(str(text).strip()))
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"cannot parse {text!r} as a fraction") from exc


def parse_epsilons(text: str) -> list[float]:
    values = [parse_fraction(t) for t in str(text).split(",") if t.strip()]
    if not values or any(v < 0 for v in values):
        raise ConfigError(f"epsilon list must be non-empty and non-negative: {text!r}")
    return values


def parse_shape(text) -> tuple[int, int]:
    if isinstance(text, (list, tuple)):
        parts = list(text)
    else:
        parts = str(text).lower().split("x")
    try:
        h, w = (int(p) for p in parts)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"shape must look like HxW, got {text!r}") from exc
    if h < 1 or w < 1:
        raise ConfigError(f"shape must be positive, got {text!r}")
    return h, w


@dataclass
class DatasetSection:
    kind: str = "synthetic"
    n_eval: int = 20
    n_train: int = 20
    size: int = 96
    contrast: float = 0.16
    texture: float = 1.0
    seed: int = 0
    min_area: int = 900
    images_dir: str = ""
    segmaps_dir: str = ""
    train_dir: str = ""
    resize: str = "NONE"


@dataclass
class EncoderSection:
    kind: str = "toy"
    seed: int = 0
    gain: float = 2.0
    taper: float = 0.8
    address: str = ""


@dataclass
class SegmenterSection:
    kind: str = "toy"
    encoder_seed: int | None = None
    tau: float = 0.3


@dataclass
class AttackSection:
    method: str = "apgd"
    epsilons: list = field(default_factory=lambda: ["1/255", "2/255", "4/255", "8/255"])
    iterations: int = 100
    step_size: str = "auto"
    init: str = "RANDOM_UNIFORM"
    p_crop: float = 0.8
    min_frac: float = 0.3
    max_frac: float = 0.9


@dataclass
class UniversalSection:
    enabled: bool = True
    iterations: int = 100
    step_size: str = "1/255"
    native_shape: list = field(default_factory=lambda: [96, 96])
    train_pool_size: int = 20
    batch_size: int = 10
    normalize_at: str = "native"


@dataclass
class TransferSection:
    enabled: bool = False
    target_encoder_seed: int = 1


@dataclass
class ExperimentConfig:
    output_dir: str = "runs/default"
    seed: int = 0
    workers: int = 1
    eval_per: str = "pair"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    segmenter: SegmenterSection = field(default_factory=SegmenterSection)
    attack: AttackSection = field(default_factory=AttackSection)
    universal: UniversalSection = field(default_factory=UniversalSection)
    transfer: TransferSection = field(default_factory=TransferSection)

    @property
    def epsilons(self) -> list[float]:
        return [parse_fraction(e) for e in self.attack.epsilons]

    def validate(self) -> "ExperimentConfig":
        if self.dataset.kind not in ("synthetic", "paths"):
            raise ConfigError(f"dataset.kind must be 'synthetic' or 'paths', got {self.dataset.kind!r}")
        if self.dataset.kind == "paths" and not (self.dataset.images_dir and self.dataset.segmaps_dir):
            raise ConfigError("dataset.kind = 'paths' needs images_dir and segmaps_dir")
        if self.encoder.kind not in ("toy", "remote"):
            raise ConfigError(f"encoder.kind must be 'toy' or 'remote', got {self.encoder.kind!r}")
        if self.encoder.kind == "remote" and not (self.encoder.address or os.environ.get(GRADIENT_SERVICE_ENV)):
            raise ConfigError(f"remote encoder needs encoder.address or ${GRADIENT_SERVICE_ENV}")
        if self.segmenter.kind != "toy":
            raise ConfigError("only the toy segmenter is available in-process")
        if self.attack.method not in ("pgd", "apgd", "multicrop"):
            raise ConfigError(f"attack.method must be pgd, apgd or multicrop, got {self.attack.method!r}")
        if self.attack.iterations < 1 or self.universal.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.attack.method == "apgd" and self.attack.step_size != "auto":
            raise ConfigError("APGD requires attack.step_size = 'auto'")
        if self.attack.step_size != "auto":
            parse_fraction(self.attack.step_size)
        if any(e < 0 for e in self.epsilons):
            raise ConfigError("epsilons must be non-negative")
        parse_fraction(self.universal.step_size)
        parse_shape(self.universal.native_shape)
        if not 1 <= self.universal.batch_size <= self.universal.train_pool_size:
            raise ConfigError("need 1 <= universal.batch_size <= universal.train_pool_size")
        if self.eval_per not in ("pair", "image"):
            raise ConfigError("eval_per must be 'pair' or 'image'")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        return self


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a table")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'top level'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}".lstrip("."))
            continue
        if default is not None and not isinstance(default, str) and isinstance(value, str):
            raise ConfigError(f"{where}.{name} expects {type(default).__name__}, got string {value!r}")
        if isinstance(default, bool) and not isinstance(value, bool):
            raise ConfigError(f"{where}.{name} expects a boolean")
        kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "").validate()


def load_config(path) -> ExperimentConfig:
    try:
        data = tomllib.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from exc
    return config_from_dict(data)
