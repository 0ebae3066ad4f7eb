"""Desk-scale generator G: z -> image, its adversarial training and persistence.

Images are NCHW float tensors in [-1, 1]; ``image_shape`` is stored as
``(H, W, C)``.
"""

from __future__ import annotations

import contextlib
import copy
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint
from .errors import ConfigurationError, NumericalError, PersistenceError, ShapeError, TrainingError
from .latent import LatentPrior, sample_prior

logger = logging.getLogger(__name__)


@contextlib.contextmanager
def seeded(seed: Optional[int]):
    """Run the body with the global torch RNG seeded, restoring it afterwards."""
    if seed is None:
        yield
        return
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        yield


@contextlib.contextmanager
def frozen(*modules: nn.Module):
    """Temporarily stop gradient accumulation into ``modules``' parameters."""
    saved = [(p, p.requires_grad) for m in modules if m is not None for p in m.parameters()]
    for p, _ in saved:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in saved:
            p.requires_grad_(flag)


def _check_image_shape(image_shape) -> Tuple[int, int, int]:
    h, w, c = (int(s) for s in image_shape)
    if h < 1 or w < 1 or c not in (1, 3):
        raise ConfigurationError(f"invalid image_shape {image_shape!r}; channels must be 1 or 3")
    return h, w, c


def pixel_norm(x: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Scale each spatial feature vector to unit RMS across channels."""
    return x * torch.rsqrt(x.pow(2).mean(dim=1, keepdim=True) + eps)


class Generator(nn.Module):
    """Fixed-resolution decoder: linear stem, then per stage a 2x nearest upsample and 3x3 conv.

    Hidden stages use leaky ReLU followed by pixelwise feature normalization;
    the last conv maps to image channels through tanh. With the default four
    channel entries a 2x2 seed grows to 32x32.
    """

    kind = "dcgan"

    def __init__(self, latent_dim=16, image_shape=(32, 32, 3), channels=(128, 64, 32, 16), seed=None):
        super().__init__()
        self.latent_dim = int(latent_dim)
        self.image_shape = _check_image_shape(image_shape)
        self.channels = tuple(int(c) for c in channels)
        h, w, c_out = self.image_shape
        stages = len(self.channels)
        if self.latent_dim < 1 or stages < 1:
            raise ConfigurationError("latent_dim and channel list must be non-empty")
        if h != w or h % (2**stages):
            raise ConfigurationError(f"square image side must be divisible by {2**stages}, got {h}x{w}")
        self.seed_side = h // 2**stages

        with seeded(seed):
            self.fc = nn.Linear(self.latent_dim, self.channels[0] * self.seed_side**2)
            ups = []
            widths = list(self.channels) + [c_out]
            for c_in, c_next in zip(widths[:-1], widths[1:]):
                ups.append(nn.Conv2d(c_in, c_next, 3, 1, 1, padding_mode="reflect"))
            self.ups = nn.ModuleList(ups)

    def config(self) -> dict:
        return {"latent_dim": self.latent_dim, "image_shape": list(self.image_shape), "channels": list(self.channels)}

    def layer_spec(self) -> List[str]:
        s = self.seed_side
        spec = [f"linear {self.latent_dim}->{self.channels[0] * s * s}", f"reshape {self.channels[0]}x{s}x{s}",
                "leaky_relu 0.2", "pixel_norm"]
        for up in self.ups:
            spec += ["upsample nearest x2", f"conv k3 s1 reflect-pad {up.in_channels}->{up.out_channels}"]
            spec += ["leaky_relu 0.2", "pixel_norm"] if up is not self.ups[-1] else ["tanh"]
        return spec

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        x = self.fc(z).view(z.shape[0], self.channels[0], self.seed_side, self.seed_side)
        x = pixel_norm(F.leaky_relu(x, 0.2))
        for up in self.ups[:-1]:
            x = pixel_norm(F.leaky_relu(up(F.interpolate(x, scale_factor=2, mode="nearest")), 0.2))
        return torch.tanh(self.ups[-1](F.interpolate(x, scale_factor=2, mode="nearest")))


class LinearGenerator(nn.Module):
    """One linear map reshaped to an image: G(z) = act(Wz). Used as an exactly solvable target."""

    kind = "linear"

    def __init__(self, latent_dim=4, image_shape=(4, 4, 1), output_activation="identity", seed=None):
        super().__init__()
        if output_activation not in ("identity", "tanh"):
            raise ConfigurationError(f"unknown output activation {output_activation!r}")
        self.latent_dim = int(latent_dim)
        self.image_shape = _check_image_shape(image_shape)
        self.output_activation = output_activation
        h, w, c = self.image_shape
        with seeded(seed):
            self.weight = nn.Parameter(torch.randn(h * w * c, self.latent_dim) / math.sqrt(self.latent_dim))

    def config(self) -> dict:
        return {"latent_dim": self.latent_dim, "image_shape": list(self.image_shape), "output_activation": self.output_activation}

    def layer_spec(self) -> List[str]:
        h, w, c = self.image_shape
        return [f"matmul {self.latent_dim}->{h * w * c}", f"reshape {c}x{h}x{w}", self.output_activation]

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h, w, c = self.image_shape
        x = (z @ self.weight.T).view(z.shape[0], c, h, w)
        return torch.tanh(x) if self.output_activation == "tanh" else x


def minibatch_stddev(x: torch.Tensor) -> torch.Tensor:
    """Append one channel holding the batch-wide mean feature standard deviation."""
    std = x.std(dim=0, unbiased=False).mean() if len(x) > 1 else x.new_zeros(())
    return torch.cat([x, std.expand(x.shape[0], 1, *x.shape[2:])], dim=1)


class Discriminator(nn.Module):
    """Mirror of :class:`Generator`: stride-2 convs down to the seed grid, a minibatch
    standard-deviation channel, then a linear realness score."""

    kind = "discriminator"

    def __init__(self, image_shape=(32, 32, 3), channels=(16, 32, 64, 128), seed=None):
        super().__init__()
        self.image_shape = _check_image_shape(image_shape)
        self.channels = tuple(int(c) for c in channels)
        h, _, c_in = self.image_shape
        if h % (2 ** len(self.channels)):
            raise ConfigurationError(f"image side {h} not divisible by {2 ** len(self.channels)}")
        side = h // 2 ** len(self.channels)
        with seeded(seed):
            widths = [c_in] + list(self.channels)
            self.convs = nn.ModuleList(nn.Conv2d(a, b, 4, 2, 1) for a, b in zip(widths[:-1], widths[1:]))
            self.fc = nn.Linear((self.channels[-1] + 1) * side * side, 1)

    def config(self) -> dict:
        return {"image_shape": list(self.image_shape), "channels": list(self.channels)}

    def layer_spec(self) -> List[str]:
        spec = []
        for conv in self.convs:
            spec += [f"conv k4 s2 {conv.in_channels}->{conv.out_channels}", "leaky_relu 0.2"]
        return spec + ["minibatch_stddev", "flatten", f"linear {self.fc.in_features}->1"]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
        return self.fc(minibatch_stddev(x).flatten(1)).squeeze(1)


_KINDS = {cls.kind: cls for cls in (Generator, LinearGenerator, Discriminator)}


def _as_batch(model: nn.Module, z: torch.Tensor) -> Tuple[torch.Tensor, bool]:
    z = torch.as_tensor(z)
    single = z.dim() == 1
    if single:
        z = z[None]
    if z.dim() != 2 or z.shape[1] != model.latent_dim:
        raise ShapeError(f"latent batch of shape {tuple(z.shape)} does not match latent_dim {model.latent_dim}")
    return z, single


def generate(model: nn.Module, z: torch.Tensor) -> torch.Tensor:
    """Images for a latent batch ``(n, d)`` -> ``(n, C, H, W)``; a single ``(d,)`` gives ``(C, H, W)``."""
    z, single = _as_batch(model, z)
    param = next(model.parameters())
    with torch.no_grad():
        images = model(z.to(param.dtype))
    return images[0] if single else images


def loss_and_gradient(model: nn.Module, z: torch.Tensor, loss_fn: Callable, iteration=None):
    """Return ``(loss, d loss / d z)`` for a single latent; loss_fn receives a ``(C, H, W)`` image."""
    z, single = _as_batch(model, z)
    if not single:
        raise ShapeError("loss_and_gradient expects a single latent vector")
    z = z.detach().clone().to(next(model.parameters()).dtype).requires_grad_(True)
    with torch.enable_grad():
        loss = loss_fn(model(z)[0])
        if not torch.is_tensor(loss) or not loss.requires_grad:
            value = float(loss)
            if not math.isfinite(value):
                raise NumericalError("non-finite loss", iteration)
            return value, torch.zeros_like(z[0]).detach()
        (grad,) = torch.autograd.grad(loss, z)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise NumericalError("non-finite loss", iteration)
    if not torch.isfinite(grad).all():
        raise NumericalError("non-finite latent gradient", iteration)
    return value, grad[0].detach()


def latent_gradient(model: nn.Module, z: torch.Tensor, loss_fn: Callable, iteration=None) -> torch.Tensor:
    """Gradient of ``loss_fn(generate(model, z))`` with respect to ``z``."""
    return loss_and_gradient(model, z, loss_fn, iteration)[1]


@dataclass
class GanTrainConfig:
    epochs: int = 12
    batch_size: int = 64
    learning_rate: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    # decay of the exponential moving average of generator weights; 0 disables it
    ema_decay: float = 0.99
    prior: LatentPrior = field(default_factory=LatentPrior)
    generator_channels: Sequence[int] = (128, 64, 32, 16)
    discriminator_channels: Sequence[int] = (16, 32, 64, 128)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be > 0")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigurationError("ema_decay must be in [0, 1)")


def train_desk_gan(images: torch.Tensor, config: GanTrainConfig, seed: int = 0):
    """Train a generator/discriminator pair with the non-saturating GAN loss.

    Returns ``(generator, discriminator, log)``; ``log`` holds one dict per epoch
    with mean ``g_loss`` / ``d_loss``. With ``ema_decay > 0`` the returned
    generator carries the moving average of the trained weights.
    """
    images = torch.as_tensor(images, dtype=torch.float32)
    if images.dim() != 4 or len(images) == 0:
        raise ConfigurationError("dataset must be a non-empty (N, C, H, W) batch")
    n, c, h, w = images.shape
    image_shape = (h, w, c)
    gen = Generator(config.prior.dim, image_shape, config.generator_channels, seed=seed)
    disc = Discriminator(image_shape, config.discriminator_channels, seed=seed + 1)
    opt_g = torch.optim.Adam(gen.parameters(), lr=config.learning_rate, betas=(config.beta1, config.beta2))
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.learning_rate, betas=(config.beta1, config.beta2))
    rng = torch.Generator().manual_seed(seed)
    ema = copy.deepcopy(gen).requires_grad_(False) if config.ema_decay > 0 else gen

    log = []
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        order = torch.randperm(n, generator=rng)
        g_total = d_total = 0.0
        batches = 0
        for i in range(0, n, config.batch_size):
            real = images[order[i : i + config.batch_size]]
            b = len(real)
            z = sample_prior(config.prior, b, generator=rng)

            fake = gen(z)
            d_real, d_fake = disc(real), disc(fake.detach())
            d_loss = F.binary_cross_entropy_with_logits(d_real, torch.ones_like(d_real)) + \
                F.binary_cross_entropy_with_logits(d_fake, torch.zeros_like(d_fake))
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()

            with frozen(disc):
                d_gen = disc(fake)
                g_loss = F.binary_cross_entropy_with_logits(d_gen, torch.ones_like(d_gen))
            opt_g.zero_grad()
            g_loss.backward()
            opt_g.step()
            if ema is not gen:
                with torch.no_grad():
                    for p_ema, p in zip(ema.parameters(), gen.parameters()):
                        p_ema.lerp_(p, 1.0 - config.ema_decay)

            if not (torch.isfinite(d_loss) and torch.isfinite(g_loss)):
                raise TrainingError("GAN loss diverged to a non-finite value", epoch=epoch, batch=batches)
            g_total += float(g_loss.detach())
            d_total += float(d_loss.detach())
            batches += 1
        entry = {"epoch": epoch, "g_loss": g_total / batches, "d_loss": d_total / batches,
                 "wall_time_s": time.perf_counter() - start}
        logger.info("gan epoch %d: g=%.4f d=%.4f", epoch, entry["g_loss"], entry["d_loss"])
        log.append(entry)
    ema.requires_grad_(True)
    ema.eval()
    disc.eval()
    return ema, disc, log


def save_weights(model: nn.Module, path) -> None:
    header = {
        "kind": model.kind,
        "config": model.config(),
        "latent_dim": getattr(model, "latent_dim", None),
        "image_shape": list(model.image_shape),
        "layer_spec": "\n".join(model.layer_spec()),
    }
    checkpoint.write_container(path, checkpoint.GENERATOR_MAGIC, header, model.state_dict())


def load_weights(path, latent_dim: Optional[int] = None, image_shape=None) -> nn.Module:
    """Rebuild a generator (or discriminator) from a GCKPT1 file.

    ``latent_dim`` / ``image_shape``, when given, are checked against the file
    and a mismatch raises :class:`ShapeError`.
    """
    header, tensors = checkpoint.read_container(path, checkpoint.GENERATOR_MAGIC)
    try:
        cls = _KINDS[header["kind"]]
        config = header["config"]
    except KeyError as exc:
        raise PersistenceError(f"{path}: unknown or missing model kind") from exc
    if latent_dim is not None and header.get("latent_dim") != latent_dim:
        raise ShapeError(f"{path}: checkpoint latent_dim {header.get('latent_dim')} != expected {latent_dim}")
    if image_shape is not None and tuple(header["image_shape"]) != tuple(image_shape):
        raise ShapeError(f"{path}: checkpoint image_shape {tuple(header['image_shape'])} != expected {tuple(image_shape)}")
    model = cls(**config)
    if "\n".join(model.layer_spec()) != header.get("layer_spec"):
        raise PersistenceError(f"{path}: layer_spec does not match this version's architecture")
    checkpoint.load_state(model, tensors, path)
    model.eval()
    return model
