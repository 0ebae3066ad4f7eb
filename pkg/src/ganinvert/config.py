"""Run configuration: a YAML mapping validated up front, unknown keys rejected.

Every section is optional; omitted keys take the defaults below. Example::

    seed: 0
    out: runs/demo
    prior: {kind: standard_normal, dim: 16}
    encoder: {epochs: 20, loss_weights: {pixel: 1.0, perceptual: 1.0, z: 1.0}}
    checkpoints: {generator: runs/demo/generator.gckpt}

``GANINVERT_SEED`` in the environment overrides ``seed``; a ``--seed`` flag
on the command line overrides both.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import yaml

from .encoder import EncoderTrainConfig
from .errors import ConfigurationError
from .generator import GanTrainConfig
from .inversion import InversionConfig
from .latent import LatentPrior
from .losses import LossWeights

SEED_ENV = "GANINVERT_SEED"
METHODS = ("descent", "descent-clip", "encoder-pixel", "encoder-perceptual")


@dataclass
class PriorSection:
    kind: str = "standard_normal"
    dim: int = 16
    bounds: Optional[Tuple[float, float]] = None


@dataclass
class DataSection:
    image_size: int = 32
    channels: int = 3
    toy_count: int = 8192
    real_dir: Optional[str] = None
    # procedural "real" images used by the alternating regime when real_dir is unset
    real_count: int = 2048


@dataclass
class GanSection:
    epochs: int = 12
    batch_size: int = 64
    learning_rate: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    ema_decay: float = 0.99
    generator_channels: Tuple[int, ...] = (128, 64, 32, 16)
    discriminator_channels: Tuple[int, ...] = (16, 32, 64, 128)


@dataclass
class ExtractorSection:
    widths: Tuple[int, ...] = (16, 32, 64, 64)
    embedding_dim: int = 64
    seed: int = 1234


@dataclass
class DatasetSection:
    n: int = 5000


@dataclass
class LossWeightsSection:
    pixel: float = 1.0
    perceptual: float = 1.0
    z: float = 1.0


@dataclass
class EncoderSection:
    learning_rate: float = 2e-4
    epochs: int = 20
    batch_size: int = 32
    regime: str = "generated_only"
    start_phase: str = "z"
    widths: Tuple[int, ...] = (16, 32, 64, 128)
    blocks: Tuple[int, ...] = (1, 1, 1, 1)
    head_widths: Tuple[int, ...] = (256, 128, 64)
    output_activation: str = "linear"
    loss_weights: LossWeightsSection = field(default_factory=LossWeightsSection)


@dataclass
class InversionSection:
    iterations: int = 200
    learning_rate: float = 0.01
    loss_kind: str = "mae"
    clip_mode: str = "none"
    stop_threshold: Optional[float] = None
    restarts: int = 1
    init: str = "prior"


@dataclass
class BenchmarkSection:
    n_targets: int = 50
    methods: Tuple[str, ...] = METHODS
    grid_rows: int = 8
    warmup: bool = True


@dataclass
class CheckpointSection:
    generator: Optional[str] = None
    extractor: Optional[str] = None
    encoder: Optional[str] = None
    encoder_pixel: Optional[str] = None
    encoder_perceptual: Optional[str] = None


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    prior: PriorSection = field(default_factory=PriorSection)
    data: DataSection = field(default_factory=DataSection)
    gan: GanSection = field(default_factory=GanSection)
    extractor: ExtractorSection = field(default_factory=ExtractorSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    inversion: InversionSection = field(default_factory=InversionSection)
    benchmark: BenchmarkSection = field(default_factory=BenchmarkSection)
    checkpoints: CheckpointSection = field(default_factory=CheckpointSection)

    # -- derived module configs -------------------------------------------------
    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return (self.data.image_size, self.data.image_size, self.data.channels)

    def latent_prior(self) -> LatentPrior:
        return LatentPrior(self.prior.kind, self.prior.dim, self.prior.bounds)

    def gan_config(self) -> GanTrainConfig:
        g = self.gan
        return GanTrainConfig(epochs=g.epochs, batch_size=g.batch_size, learning_rate=g.learning_rate, beta1=g.beta1,
                              beta2=g.beta2, ema_decay=g.ema_decay, prior=self.latent_prior(),
                              generator_channels=g.generator_channels, discriminator_channels=g.discriminator_channels)

    def loss_weights(self) -> LossWeights:
        w = self.encoder.loss_weights
        return LossWeights(pixel=w.pixel, perceptual=w.perceptual, z=w.z)

    def encoder_config(self, **overrides) -> EncoderTrainConfig:
        e = self.encoder
        kwargs = dict(learning_rate=e.learning_rate, epochs=e.epochs, batch_size=e.batch_size,
                      loss_weights=self.loss_weights(), seed=self.seed, regime=e.regime, start_phase=e.start_phase)
        kwargs.update(overrides)
        return EncoderTrainConfig(**kwargs)

    def inversion_config(self, **overrides) -> InversionConfig:
        kwargs = dataclasses.asdict(self.inversion)
        kwargs["seed"] = self.seed
        kwargs.update(overrides)
        return InversionConfig(**kwargs)

    def validate(self) -> "RunConfig":
        """Build every derived config once so errors surface before any work starts."""
        try:
            self.latent_prior()
            self.gan_config()
            self.encoder_config()
            self.inversion_config()
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(str(exc)) from exc
        if self.data.image_size < 1 or self.data.channels not in (1, 3):
            raise ConfigurationError("data.image_size must be >= 1 and data.channels 1 or 3")
        for n, what in ((self.data.toy_count, "data.toy_count"), (self.data.real_count, "data.real_count"),
                        (self.dataset.n, "dataset.n"), (self.benchmark.n_targets, "benchmark.n_targets")):
            if n < 1:
                raise ConfigurationError(f"{what} must be >= 1")
        unknown = set(self.benchmark.methods) - set(METHODS)
        if unknown or not self.benchmark.methods:
            raise ConfigurationError(f"benchmark.methods must be a non-empty subset of {METHODS}")
        if not 0.0 <= self.gan.ema_decay < 1.0:
            raise ConfigurationError("gan.ema_decay must be in [0, 1)")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        # the output directory does not change results, so it is left out
        settings = {k: v for k, v in self.to_dict().items() if k != "out"}
        blob = json.dumps(settings, sort_keys=True, separators=(",", ":"), default=list)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, where)
    if origin is typing.Union and type(None) in args:
        if value is None:
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _coerce(inner, value, where)
    if origin in (tuple, list, List, Tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{where}: expected a list, got {value!r}")
        inner = args[0] if args else object
        items = [_coerce(inner, v, f"{where}[{i}]") for i, v in enumerate(value)]
        return tuple(items)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, data, where: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        prefix = f"{where}." if where else ""
        raise ConfigurationError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}" if where else k) for k, v in data.items()}
    return cls(**kwargs)


def config_from_dict(data: Optional[dict]) -> RunConfig:
    return _build(RunConfig, data, "")


def load_config(path=None, *, out: Optional[str] = None, seed: Optional[int] = None, env=None) -> RunConfig:
    """Read and validate a config; apply env/CLI overrides (CLI wins)."""
    data = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                data = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigurationError(f"{path}: cannot read config ({exc})") from exc
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"{path}: invalid YAML ({exc})") from exc
    cfg = config_from_dict(data)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            cfg.seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigurationError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    if seed is not None:
        cfg.seed = seed
    if out is not None:
        cfg.out = out
    return cfg.validate()
