"""Learned inverse map: a residual encoder predicting z from an image, and its two training regimes.

``train_on_generated`` fits the encoder on (image, z) pairs sampled from the
generator. ``train_alternating`` interleaves those epochs with epochs on real
images that have no ground-truth latent, where only reconstruction losses
apply.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint
from .errors import ConfigurationError, NumericalError, PersistenceError, ShapeError, TrainingError
from .generator import frozen, generate, seeded
from .imageio import resize_batch
from .latent import LatentPrior, sample_prior
from .losses import LossWeights, combine, perceptual_loss, pixel_mae, z_loss

logger = logging.getLogger(__name__)


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


class ResidualBlock(nn.Module):
    def __init__(self, c_in, c_out, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride, 1, bias=False)
        self.norm1 = _norm(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1, bias=False)
        self.norm2 = _norm(c_out)
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride, bias=False), _norm(c_out))

    def forward(self, x):
        out = F.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + skip)


class Encoder(nn.Module):
    """Residual backbone (stages at strides 1, 2, 2, 2), global pooling, then an FC head.

    The head is three ReLU layers of ``head_widths`` units followed by a linear
    map to ``latent_dim``. ``output_activation="tanh"`` bounds the output for
    uniform priors; the default is an unbounded linear output.
    """

    kind = "resnet"

    def __init__(self, latent_dim=16, image_shape=(32, 32, 3), widths=(16, 32, 64, 128), blocks=(1, 1, 1, 1),
                 head_widths=(256, 128, 64), output_activation="linear", seed=None):
        super().__init__()
        if len(widths) != len(blocks) or not widths:
            raise ConfigurationError("widths and blocks must be non-empty and the same length")
        if output_activation not in ("linear", "tanh"):
            raise ConfigurationError(f"unknown output activation {output_activation!r}")
        self.latent_dim = int(latent_dim)
        self.image_shape = tuple(int(s) for s in image_shape)
        self.widths = tuple(int(w) for w in widths)
        self.blocks = tuple(int(b) for b in blocks)
        self.head_widths = tuple(int(h) for h in head_widths)
        self.output_activation = output_activation

        with seeded(seed):
            c_in = self.image_shape[2]
            self.stem = nn.Sequential(nn.Conv2d(c_in, self.widths[0], 3, 1, 1, bias=False), _norm(self.widths[0]), nn.ReLU())
            stages = []
            prev = self.widths[0]
            for i, (w, n) in enumerate(zip(self.widths, self.blocks)):
                layers = [ResidualBlock(prev, w, 1 if i == 0 else 2)]
                layers += [ResidualBlock(w, w, 1) for _ in range(n - 1)]
                stages.append(nn.Sequential(*layers))
                prev = w
            self.stages = nn.Sequential(*stages)
            head = []
            for h in self.head_widths:
                head += [nn.Linear(prev, h), nn.ReLU()]
                prev = h
            head.append(nn.Linear(prev, self.latent_dim))
            self.head = nn.Sequential(*head)

    def config(self) -> dict:
        return {"latent_dim": self.latent_dim, "image_shape": list(self.image_shape), "widths": list(self.widths),
                "blocks": list(self.blocks), "head_widths": list(self.head_widths),
                "output_activation": self.output_activation}

    def layer_spec(self) -> List[str]:
        spec = [f"conv k3 s1 {self.image_shape[2]}->{self.widths[0]}", "group_norm", "relu"]
        prev = self.widths[0]
        for i, (w, n) in enumerate(zip(self.widths, self.blocks)):
            spec.append(f"stage{i + 1} residual x{n} {prev}->{w} s{1 if i == 0 else 2}")
            prev = w
        spec.append("global_avg_pool")
        for h in self.head_widths:
            spec += [f"linear {prev}->{h}", "relu"]
            prev = h
        spec.append(f"linear {prev}->{self.latent_dim}")
        if self.output_activation == "tanh":
            spec.append("tanh")
        return spec

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.stages(self.stem(x)).mean(dim=(2, 3))
        z = self.head(x)
        return torch.tanh(z) if self.output_activation == "tanh" else z


@dataclass
class PairedDataset:
    """Images with, for generated data, the latents that produced them."""

    images: torch.Tensor
    latents: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.images.dim() != 4:
            raise ShapeError(f"images must be (N, C, H, W), got {tuple(self.images.shape)}")
        if self.latents is not None and len(self.latents) != len(self.images):
            raise ShapeError(f"{len(self.images)} images but {len(self.latents)} latents")

    def __len__(self):
        return len(self.images)

    def subset(self, index) -> "PairedDataset":
        return PairedDataset(self.images[index], None if self.latents is None else self.latents[index])

    def split(self, n_holdout: int) -> Tuple["PairedDataset", "PairedDataset"]:
        """Last ``n_holdout`` items become the held-out part."""
        cut = len(self) - n_holdout
        return self.subset(slice(0, cut)), self.subset(slice(cut, None))


def build_generated_dataset(gen, prior: LatentPrior, n: int, seed: int = 0, batch_size: int = 256) -> PairedDataset:
    if n < 1:
        raise ConfigurationError("dataset size must be >= 1")
    latents = sample_prior(prior, n, seed=seed)
    images = torch.cat([generate(gen, latents[i : i + batch_size]) for i in range(0, n, batch_size)])
    return PairedDataset(images, latents)


def encode(model: Encoder, images: torch.Tensor) -> torch.Tensor:
    """Latents for a batch ``(N, C, H, W)`` -> ``(N, d)``; one ``(C, H, W)`` image gives ``(d,)``."""
    single = images.dim() == 3
    if single:
        images = images[None]
    h, w, c = model.image_shape
    if images.dim() != 4 or tuple(images.shape[1:]) != (c, h, w):
        raise ShapeError(f"encoder expects images of shape {(c, h, w)}, got {tuple(images.shape[1:])}")
    model.eval()
    with torch.no_grad():
        z = model(images.to(next(model.parameters()).dtype))
    return z[0] if single else z


def reconstruct(enc: Encoder, gen, images: torch.Tensor) -> torch.Tensor:
    return generate(gen, encode(enc, images))


@dataclass
class EncoderTrainConfig:
    learning_rate: float = 2e-4
    epochs: int = 20
    batch_size: int = 32
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    regime: str = "generated_only"
    start_phase: str = "z"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be > 0")
        if self.regime not in ("generated_only", "alternating"):
            raise ConfigurationError(f"unknown regime {self.regime!r}")
        if self.start_phase not in ("z", "real"):
            raise ConfigurationError("start_phase must be 'z' or 'real'")


@dataclass
class EpochLog:
    epoch: int
    phase: str
    mean_loss: float
    wall_time_s: float
    terms: Dict[str, float] = field(default_factory=dict)

    def to_record(self) -> dict:
        return {"epoch": self.epoch, "phase": self.phase, "mean_loss": self.mean_loss,
                "wall_time_s": self.wall_time_s, **{f"mean_{k}": v for k, v in self.terms.items()}}


def write_epoch_log(path, log: Sequence[EpochLog]) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        for entry in log:
            fh.write(json.dumps(entry.to_record()) + "\n")
    os.replace(tmp, path)


def _phase_terms(phase: str, weights: LossWeights) -> Tuple[str, ...]:
    names = ("z", "perceptual") if phase == "z" else ("pixel", "perceptual")
    active = tuple(n for n in names if getattr(weights, n) > 0)
    if not active:
        raise ConfigurationError(f"all loss weights for the {phase!r} phase are zero")
    return active


def _run_epoch(enc, gen, extractor, opt, data: PairedDataset, phase: str, weights: LossWeights,
               batch_size: int, rng: torch.Generator, epoch: int) -> EpochLog:
    start = time.perf_counter()
    active = _phase_terms(phase, weights)
    if "perceptual" in active and extractor is None:
        raise ConfigurationError("perceptual weight is non-zero but no extractor was given")
    enc.train()
    order = torch.randperm(len(data), generator=rng)
    sums = {name: 0.0 for name in active}
    total_sum = 0.0
    batches = 0
    for b, i in enumerate(range(0, len(data), batch_size)):
        idx = order[i : i + batch_size]
        images = data.images[idx]
        z_hat = enc(images)
        cache = {}

        def recon():
            if "x" not in cache:
                cache["x"] = gen(z_hat)
            return cache["x"]

        terms = {
            "z": lambda: z_loss(z_hat, data.latents[idx]),
            "pixel": lambda: pixel_mae(recon(), images),
            "perceptual": lambda: perceptual_loss(extractor, recon(), images),
        }
        values = {}

        def tracked(name):
            def fn():
                values[name] = terms[name]()
                return values[name]
            return fn

        try:
            loss = combine({name: tracked(name) for name in ("z", "pixel", "perceptual") if name in active}, weights)
        except NumericalError as exc:
            raise TrainingError(str(exc), epoch=epoch, batch=b) from exc
        if not torch.isfinite(loss):
            raise TrainingError("encoder loss is not finite", epoch=epoch, batch=b)
        opt.zero_grad()
        loss.backward()
        opt.step()
        total_sum += float(loss.detach())
        for name, v in values.items():
            sums[name] += float(v.detach())
        batches += 1
    enc.eval()
    return EpochLog(epoch, phase, total_sum / batches, time.perf_counter() - start,
                    {name: s / batches for name, s in sums.items()})


def _check_compatible(enc, gen, data: PairedDataset):
    if enc.latent_dim != gen.latent_dim:
        raise ShapeError(f"encoder latent_dim {enc.latent_dim} != generator latent_dim {gen.latent_dim}")
    if tuple(enc.image_shape) != tuple(gen.image_shape):
        raise ShapeError(f"encoder image_shape {enc.image_shape} != generator image_shape {gen.image_shape}")
    h, w, c = gen.image_shape
    if tuple(data.images.shape[1:]) != (c, h, w):
        raise ShapeError(f"dataset images {tuple(data.images.shape[1:])} do not match generator output {(c, h, w)}")


def train_on_generated(enc: Encoder, gen, extractor, data: PairedDataset, config: EncoderTrainConfig,
                       log_path=None) -> Tuple[Encoder, List[EpochLog]]:
    """Fit ``enc`` on generated pairs with ``w_z * z_loss + w_perceptual * perceptual``.

    The generator and extractor are only read; gradients flow through the
    generator into the encoder. The extractor is never called when the
    perceptual weight is zero.
    """
    if config.regime != "generated_only":
        raise ConfigurationError("train_on_generated requires regime='generated_only'")
    if data.latents is None:
        raise ConfigurationError("generated-only training needs a dataset with latents")
    _check_compatible(enc, gen, data)
    opt = torch.optim.Adam(enc.parameters(), lr=config.learning_rate)
    rng = torch.Generator().manual_seed(config.seed)
    log = []
    with frozen(gen, extractor):
        for epoch in range(1, config.epochs + 1):
            entry = _run_epoch(enc, gen, extractor, opt, data, "z", config.loss_weights, config.batch_size, rng, epoch)
            logger.info("encoder epoch %d [z]: %.5f", epoch, entry.mean_loss)
            log.append(entry)
    if log_path is not None:
        write_epoch_log(log_path, log)
    return enc, log


def train_alternating(enc: Encoder, gen, extractor, gen_data: PairedDataset, real_data: PairedDataset,
                      config: EncoderTrainConfig, log_path=None) -> Tuple[Encoder, List[EpochLog]]:
    """Alternate one epoch of the generated-pair objective with one epoch on real images.

    Real epochs minimize ``w_pixel * pixel_mae + w_perceptual * perceptual``
    between ``generate(encode(x))`` and ``x``. Each phase makes one full pass
    over its own dataset. Real images are resized to the generator's shape.
    """
    if config.regime != "alternating":
        raise ConfigurationError("train_alternating requires regime='alternating'")
    if gen_data.latents is None:
        raise ConfigurationError("the generated dataset needs latents")
    if real_data.latents is not None:
        raise ConfigurationError("real data must not carry latents")
    h, w, c = gen.image_shape
    real_data = PairedDataset(resize_batch(real_data.images, (h, w, c)))
    _check_compatible(enc, gen, gen_data)
    opt = torch.optim.Adam(enc.parameters(), lr=config.learning_rate)
    rng = torch.Generator().manual_seed(config.seed)
    phases = ("z", "real") if config.start_phase == "z" else ("real", "z")
    log = []
    with frozen(gen, extractor):
        for epoch in range(1, config.epochs + 1):
            phase = phases[(epoch - 1) % 2]
            data = gen_data if phase == "z" else real_data
            entry = _run_epoch(enc, gen, extractor, opt, data, phase, config.loss_weights, config.batch_size, rng, epoch)
            logger.info("encoder epoch %d [%s]: %.5f", epoch, phase, entry.mean_loss)
            log.append(entry)
    if log_path is not None:
        write_epoch_log(log_path, log)
    return enc, log


def save_encoder(model: Encoder, path) -> None:
    header = {
        "kind": model.kind,
        "config": model.config(),
        "latent_dim": model.latent_dim,
        "image_shape": list(model.image_shape),
        "head_widths": list(model.head_widths),
        "layer_spec": "\n".join(model.layer_spec()),
    }
    checkpoint.write_container(path, checkpoint.ENCODER_MAGIC, header, model.state_dict())


def load_encoder(path, latent_dim: Optional[int] = None) -> Encoder:
    header, tensors = checkpoint.read_container(path, checkpoint.ENCODER_MAGIC)
    if header.get("kind") != Encoder.kind:
        raise PersistenceError(f"{path}: unknown encoder kind {header.get('kind')!r}")
    if latent_dim is not None and header.get("latent_dim") != latent_dim:
        raise ShapeError(f"{path}: checkpoint latent_dim {header.get('latent_dim')} != expected {latent_dim}")
    model = Encoder(**header["config"])
    if "\n".join(model.layer_spec()) != header.get("layer_spec"):
        raise PersistenceError(f"{path}: layer_spec does not match this version's architecture")
    checkpoint.load_state(model, tensors, path)
    return model.eval()
