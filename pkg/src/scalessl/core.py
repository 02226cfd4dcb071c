"""Domain types, experiment configuration and seeded random streams."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Literal, Mapping, Optional

import numpy as np

from .errors import ConfigError, ShapeError

SCHEMA_VERSION = 1
ENV_PREFIX = "SCALESSL_"

Split = Literal["pretrain", "train", "val", "test"]
SPLITS = ("pretrain", "train", "val", "test")
SSL_METHODS = ("simclr", "byol", "vicreg", "none")
SAMPLINGS = ("random", "proximity", "full_view")
DIVISORS = (2, 4, 8)
OPTIMIZERS = ("lars", "sgd", "adam")
ENCODERS = ("toy_cnn", "resnet18")
DECODERS = ("plain_upsample", "deeplab_aspp")

DEFAULT_STRIDES = {"toy_cnn": (1, 2, 2), "resnet18": (2, 2, 2, 2, 2)}
DEFAULT_FEATURE_DIM = {"toy_cnn": 64, "resnet18": 512}


@dataclass(frozen=True, eq=False)
class ImageRecord:
    """One 2-D grayscale slice with an optional label mask."""

    id: str
    pixels: np.ndarray
    mask: Optional[np.ndarray] = None
    split: Split = "pretrain"

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels)
        if px.ndim != 2:
            raise ShapeError(f"{self.id}: pixels must be 2-D, got shape {px.shape}")
        if px.shape[0] < 8 or px.shape[1] < 8:
            raise ShapeError(f"{self.id}: image {px.shape} smaller than 8x8")
        if not np.all(np.isfinite(px)):
            raise ValueError(f"{self.id}: non-finite intensities")
        if self.mask is not None and np.shape(self.mask) != px.shape:
            raise ShapeError(f"{self.id}: mask {np.shape(self.mask)} != pixels {px.shape}")
        if self.split not in SPLITS:
            raise ValueError(f"{self.id}: unknown split {self.split!r}")

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.pixels.shape)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ImageRecord):
            return NotImplemented
        if (self.id, self.split) != (other.id, other.split):
            return False
        if not np.array_equal(self.pixels, other.pixels):
            return False
        if (self.mask is None) != (other.mask is None):
            return False
        return self.mask is None or np.array_equal(self.mask, other.mask)


@dataclass(frozen=True)
class Window:
    """Crop of extent h x w around an integer center (floor-based extents)."""

    center_u: int
    center_v: int
    h: int
    w: int

    @property
    def top(self) -> int:
        return self.center_u - self.h // 2

    @property
    def left(self) -> int:
        return self.center_v - self.w // 2

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.top, self.top + self.h), slice(self.left, self.left + self.w)

    def in_bounds(self, shape: tuple[int, int]) -> bool:
        H, W = shape[:2]
        return (self.h >= 1 and self.w >= 1 and self.top >= 0 and self.left >= 0
                and self.top + self.h <= H and self.left + self.w <= W)

    @classmethod
    def from_origin(cls, top: int, left: int, h: int, w: int) -> "Window":
        return cls(int(top + h // 2), int(left + w // 2), int(h), int(w))

    @classmethod
    def whole(cls, shape: tuple[int, int]) -> "Window":
        return cls.from_origin(0, 0, shape[0], shape[1])

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class ScaleSpec:
    base_L: int
    divisor: int

    def __post_init__(self) -> None:
        if self.divisor not in DIVISORS:
            raise ConfigError("crop_divisor", f"must be one of {DIVISORS}")
        if self.resolved_size < 4:
            raise ShapeError(f"L/{self.divisor} = {self.resolved_size} is below 4 px")

    @property
    def resolved_size(self) -> int:
        return self.base_L // self.divisor


class RngStream:
    """Named, reproducible random stream.

    The generator is keyed on ``(seed, stream_id)`` so equal keys give equal
    draws while different stream ids give independent sequences.
    """

    def __init__(self, seed: int, stream_id: str = "main"):
        if int(seed) < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)
        self.stream_id = str(stream_id)
        key = int.from_bytes(hashlib.sha256(self.stream_id.encode()).digest()[:8], "little")
        self.gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, key])))

    def child(self, name: str) -> "RngStream":
        return RngStream(self.seed, f"{self.stream_id}/{name}")

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size=size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def random(self, size=None):
        return self.gen.random(size)

    def get_state(self) -> dict:
        return self.gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.gen.bit_generator.state = state

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id!r})"


@dataclass(frozen=True)
class ExperimentConfig:
    """All knobs of one pretrain -> finetune -> evaluate run.

    Fields left as ``None`` are filled by :func:`validate_config` (or, for
    ``crop_size`` and ``delta``, once the dataset's smallest side is known).
    """

    schema_version: int = SCHEMA_VERSION
    # pretraining
    ssl_method: str = "simclr"
    sampling: str = "random"
    crop_divisor: Optional[int] = 8
    crop_size: Optional[int] = None
    delta: Optional[float] = None
    full_view_size: Optional[int] = None
    views_per_image: int = 1
    epochs: int = 100
    batch_size: int = 128
    optimizer: str = "lars"
    lr: Optional[float] = None
    momentum: float = 0.9
    weight_decay: float = 1e-6
    trust_coefficient: float = 0.001
    warmup_epochs: int = 10
    # objectives
    temperature: float = 0.5
    vicreg_lambda: float = 25.0
    vicreg_mu: float = 25.0
    vicreg_nu: float = 1.0
    vicreg_gamma: float = 1.0
    vicreg_eps: float = 1e-4
    ema_momentum: float = 0.99
    # augmentation
    augment: bool = True
    flip_prob: float = 0.5
    affine_prob: float = 0.5
    max_rotation: float = 15.0
    max_shear: float = 5.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    intensity_scale_range: tuple[float, float] = (0.8, 1.2)
    intensity_shift_range: tuple[float, float] = (-0.1, 0.1)
    # networks
    encoder: str = "toy_cnn"
    encoder_strides: Optional[tuple[int, ...]] = None
    feature_dim: Optional[int] = None
    embed_dim: int = 32
    decoder: str = "plain_upsample"
    num_classes: int = 1
    # fine-tuning
    label_fraction: float = 0.1
    finetune_epochs: int = 50
    finetune_batch_size: int = 16
    finetune_optimizer: str = "adam"
    finetune_lr: float = 1e-3
    patches_per_image: int = 4
    finetune_budget: str = "patches"
    frozen_encoder: bool = False
    # evaluation
    stride: Optional[int] = None
    threshold: float = 0.5
    metric_cap: float = 200.0
    seed: int = 0
    checkpoint_every: int = 0

    @property
    def base_lr(self) -> float:
        return self.lr if self.lr is not None else 0.3 * self.batch_size / 256

    @property
    def stride_product(self) -> int:
        strides = self.encoder_strides or DEFAULT_STRIDES[self.encoder]
        return int(np.prod(strides))

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(ExperimentConfig):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class ValidatedConfig(ExperimentConfig):
    """An :class:`ExperimentConfig` that passed :func:`validate_config`."""


_TUPLE_FIELDS = {"scale_range", "intensity_scale_range", "intensity_shift_range", "encoder_strides"}


def _choice(name: str, value: Any, allowed) -> None:
    if value not in allowed:
        raise ConfigError(name, f"{value!r} not in {allowed}")


def _positive(name: str, value) -> None:
    if value is None or not value > 0:
        raise ConfigError(name, f"must be positive, got {value!r}")


def validate_config(config: ExperimentConfig) -> ValidatedConfig:
    """Check every field invariant and fill derived defaults.

    Raises ConfigError naming the first violated field.
    """
    c = config
    if c.schema_version != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"unsupported version {c.schema_version}")
    _choice("ssl_method", c.ssl_method, SSL_METHODS)
    _choice("sampling", c.sampling, SAMPLINGS)
    if c.crop_divisor is not None:
        _choice("crop_divisor", c.crop_divisor, DIVISORS)
    if c.sampling != "full_view" and c.crop_divisor is None and c.crop_size is None:
        raise ConfigError("crop_divisor", "required unless sampling is full_view")
    if c.crop_size is not None and c.crop_size < 4:
        raise ConfigError("crop_size", "must be >= 4")
    if c.delta is not None and not c.delta > 0:
        raise ConfigError("delta", "proximity radius must be > 0 (strict inequality)")
    if c.full_view_size is not None and c.full_view_size < 8:
        raise ConfigError("full_view_size", "must be >= 8")
    if not (0.0 < c.label_fraction <= 1.0):
        raise ConfigError("label_fraction", "must lie in (0, 1]")
    for name in ("epochs", "batch_size", "finetune_epochs", "finetune_batch_size",
                 "patches_per_image", "views_per_image", "embed_dim", "num_classes"):
        v = getattr(c, name)
        if not isinstance(v, (int, np.integer)) or v < 1:
            raise ConfigError(name, "must be a positive integer")
    if c.embed_dim < 2:
        raise ConfigError("embed_dim", "must be >= 2")
    _choice("optimizer", c.optimizer, OPTIMIZERS)
    _choice("finetune_optimizer", c.finetune_optimizer, OPTIMIZERS)
    if c.lr is not None:
        _positive("lr", c.lr)
    for name in ("finetune_lr", "temperature", "trust_coefficient"):
        _positive(name, getattr(c, name))
    for name in ("momentum", "weight_decay", "vicreg_lambda", "vicreg_mu", "vicreg_nu",
                 "vicreg_gamma", "warmup_epochs", "checkpoint_every"):
        if getattr(c, name) < 0:
            raise ConfigError(name, "must be non-negative")
    _positive("vicreg_eps", c.vicreg_eps)
    if not (0.0 <= c.ema_momentum <= 1.0):
        raise ConfigError("ema_momentum", "must lie in [0, 1]")
    if not (0.0 <= c.flip_prob <= 1.0):
        raise ConfigError("flip_prob", "must lie in [0, 1]")
    if not (0.0 <= c.affine_prob <= 1.0):
        raise ConfigError("affine_prob", "must lie in [0, 1]")
    if c.max_rotation < 0 or c.max_shear < 0:
        raise ConfigError("max_rotation" if c.max_rotation < 0 else "max_shear", "must be >= 0")
    for name in ("scale_range", "intensity_scale_range", "intensity_shift_range"):
        lo, hi = getattr(c, name)
        if lo > hi:
            raise ConfigError(name, "low bound exceeds high bound")
    if c.scale_range[0] <= 0 or c.intensity_scale_range[0] <= 0:
        raise ConfigError("intensity_scale_range" if c.scale_range[0] > 0 else "scale_range",
                          "scales must be positive")
    _choice("finetune_budget", c.finetune_budget, ("patches", "pixels"))
    _choice("encoder", c.encoder, ENCODERS)
    _choice("decoder", c.decoder, DECODERS)
    strides = tuple(int(s) for s in (c.encoder_strides or DEFAULT_STRIDES[c.encoder]))
    if any(s < 1 for s in strides):
        raise ConfigError("encoder_strides", "strides must be >= 1")
    feature_dim = c.feature_dim or DEFAULT_FEATURE_DIM[c.encoder]
    _positive("feature_dim", feature_dim)
    if c.stride is not None and c.stride < 1:
        raise ConfigError("stride", "must be >= 1")
    if not (0.0 < c.threshold < 1.0):
        raise ConfigError("threshold", "must lie in (0, 1)")
    _positive("metric_cap", c.metric_cap)
    if not isinstance(c.seed, (int, np.integer)) or c.seed < 0:
        raise ConfigError("seed", "must be a non-negative integer")

    values = {f.name: getattr(c, f.name) for f in dataclasses.fields(ExperimentConfig)}
    values.update(
        lr=c.base_lr,
        encoder_strides=strides,
        feature_dim=int(feature_dim),
        delta=(float(c.delta) if c.delta is not None
               else (float(c.crop_size) if c.crop_size is not None else None)),
    )
    for name in _TUPLE_FIELDS:
        values[name] = tuple(values[name])
    return ValidatedConfig(**values)


def with_crop_size(config: ValidatedConfig, crop_size: int) -> ValidatedConfig:
    """Pin the resolved crop size; a missing proximity radius defaults to it."""
    delta = config.delta if config.delta is not None else float(crop_size)
    return validate_config(dataclasses.replace(config, crop_size=int(crop_size), delta=delta))


def config_from_dict(data: Mapping[str, Any]) -> ExperimentConfig:
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown config field")
    values = dict(data)
    for name in _TUPLE_FIELDS & set(values):
        if values[name] is not None:
            values[name] = tuple(values[name])
    return ExperimentConfig(**values)


def _parse_scalar(raw: str, current: Any) -> Any:
    if isinstance(current, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_env_overrides(data: dict, environ: Optional[Mapping[str, str]] = None) -> dict:
    """Override scalar fields from ``SCALESSL_<FIELD>`` environment variables."""
    environ = os.environ if environ is None else environ
    defaults = ExperimentConfig()
    out = dict(data)
    for f in dataclasses.fields(ExperimentConfig):
        if f.name in _TUPLE_FIELDS:
            continue
        raw = environ.get(ENV_PREFIX + f.name.upper())
        if raw is not None:
            out[f.name] = _parse_scalar(raw, getattr(defaults, f.name))
    return out


def dump_config(config: ExperimentConfig, path=None) -> str:
    text = json.dumps(config.to_dict(), indent=2, sort_keys=True)
    if path is not None:
        Path(path).write_text(text + "\n")
    return text


def load_config(path, environ: Optional[Mapping[str, str]] = None) -> ValidatedConfig:
    """Read a JSON config file, apply environment overrides and validate."""
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("file", f"{path}: {exc}") from None
    if "schema_version" not in data:
        raise ConfigError("schema_version", "missing")
    return validate_config(config_from_dict(apply_env_overrides(data, environ)))


def parse_config(text: str) -> ValidatedConfig:
    return validate_config(config_from_dict(json.loads(text)))


def smallest_side(records) -> int:
    """L: the smallest image dimension over a dataset."""
    return min(min(r.shape) for r in records)

