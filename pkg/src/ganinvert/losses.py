"""Reconstruction objectives: pixel losses, z-loss, perceptual loss and their weighted sum.

Every loss reduces by mean, so values do not depend on image resolution or
batch size. Single images ``(C, H, W)`` and batches ``(N, C, H, W)`` are both
accepted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint
from .errors import ConfigurationError, NumericalError, PersistenceError, ShapeError
from .generator import seeded


def _check_pair(a: torch.Tensor, b: torch.Tensor, what: str = "image") -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what} shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def pixel_mae(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_pair(a, b)
    return (a - b).abs().mean()


def pixel_l2(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_pair(a, b)
    return (a - b).pow(2).mean()


def z_loss(z_hat: torch.Tensor, z_true: torch.Tensor) -> torch.Tensor:
    """Mean absolute coordinate difference between predicted and ground-truth latents."""
    _check_pair(z_hat, z_true, "latent")
    return (z_hat - z_true).abs().mean()


class FeatureExtractor(nn.Module):
    """Frozen network exposing named intermediate activations and a final embedding.

    Subclasses implement :meth:`forward` returning ``(taps, embedding)`` where
    ``taps`` is a list aligned with :attr:`tap_points`.
    """

    tap_points: Sequence[str] = ()
    embedding_dim: int = 0

    def freeze(self) -> "FeatureExtractor":
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()

    def features(self, images: torch.Tensor) -> Tuple[List[torch.Tensor], torch.Tensor]:
        single = images.dim() == 3
        if single:
            images = images[None]
        taps, embedding = self(images)
        if len(taps) != len(self.tap_points):
            raise ShapeError(f"extractor returned {len(taps)} taps for {len(self.tap_points)} tap points")
        if single:
            return [t[0] for t in taps], embedding[0]
        return list(taps), embedding

    def embedding(self, images: torch.Tensor) -> torch.Tensor:
        return self.features(images)[1]


class ConvFeatureExtractor(FeatureExtractor):
    """Small conv stack; each block's post-activation output is a tap point.

    Weights come from a fixed seed and are never trained, which keeps the
    perceptual objective reproducible from the seed or checkpoint alone. He
    initialization keeps tap activations near unit scale through the stack, so
    the perceptual term stays commensurate with pixel losses at unit weights.
    """

    kind = "conv"

    def __init__(self, image_shape=(32, 32, 3), widths=(16, 32, 64, 64), embedding_dim=64, seed=0):
        super().__init__()
        h, w, c = (int(s) for s in image_shape)
        self.image_shape = (h, w, c)
        self.widths = tuple(int(x) for x in widths)
        self.embedding_dim = int(embedding_dim)
        self.seed = seed
        self.tap_points = tuple(f"block{i + 1}" for i in range(len(self.widths)))
        with seeded(seed):
            chans = [c] + list(self.widths)
            self.blocks = nn.ModuleList(
                nn.Conv2d(a, b, 3, stride=1 if i == 0 else 2, padding=1)
                for i, (a, b) in enumerate(zip(chans[:-1], chans[1:]))
            )
            for conv in self.blocks:
                nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
                nn.init.zeros_(conv.bias)
            self.head = nn.Linear(self.widths[-1], self.embedding_dim)
        self.freeze()

    def config(self) -> dict:
        return {"image_shape": list(self.image_shape), "widths": list(self.widths),
                "embedding_dim": self.embedding_dim, "seed": self.seed}

    def layer_spec(self) -> List[str]:
        spec = []
        for i, conv in enumerate(self.blocks):
            spec += [f"conv k3 s{conv.stride[0]} {conv.in_channels}->{conv.out_channels}", f"relu tap={self.tap_points[i]}"]
        return spec + ["global_avg_pool", f"linear {self.widths[-1]}->{self.embedding_dim} embedding"]

    def forward(self, x: torch.Tensor):
        if tuple(x.shape[1:]) != (self.image_shape[2], self.image_shape[0], self.image_shape[1]):
            raise ShapeError(f"extractor expects images of shape {self.image_shape} (HWC), got {tuple(x.shape[1:])} (CHW)")
        taps = []
        for conv in self.blocks:
            x = F.relu(conv(x))
            taps.append(x)
        return taps, self.head(x.mean(dim=(2, 3)))


def perceptual_loss(extractor: FeatureExtractor, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Unweighted mean over tap points of the per-layer feature MSE."""
    _check_pair(a, b)
    taps_a, _ = extractor.features(a)
    taps_b, _ = extractor.features(b)
    per_layer = [F.mse_loss(fa, fb) for fa, fb in zip(taps_a, taps_b)]
    return torch.stack(per_layer).mean()


@dataclass
class LossWeights:
    pixel: float = 1.0
    perceptual: float = 1.0
    z: float = 1.0

    def __post_init__(self):
        values = (self.pixel, self.perceptual, self.z)
        if any(not math.isfinite(v) or v < 0 for v in values):
            raise ConfigurationError(f"loss weights must be finite and non-negative, got {values}")
        if not any(v > 0 for v in values):
            raise ConfigurationError("at least one loss weight must be positive")


LossTerm = Union[float, torch.Tensor, Callable[[], Union[float, torch.Tensor]]]


def combine(losses: Mapping[str, LossTerm], weights: LossWeights):
    """Weighted sum of named terms (``pixel``, ``perceptual``, ``z``).

    A term may be a zero-argument callable; it is only invoked when its weight
    is non-zero, so callers can pass expensive terms lazily.
    """
    total = 0.0
    for name, term in losses.items():
        try:
            w = getattr(weights, name)
        except AttributeError:
            raise ConfigurationError(f"no weight for loss term {name!r}") from None
        if w == 0:
            continue
        value = term() if callable(term) else term
        if not bool(torch.isfinite(torch.as_tensor(value)).all()):
            raise NumericalError(f"loss term {name!r} is not finite")
        total = total + w * value
    return total


def save_extractor(extractor: ConvFeatureExtractor, path) -> None:
    header = {
        "kind": extractor.kind,
        "config": extractor.config(),
        "image_shape": list(extractor.image_shape),
        "tap_points": list(extractor.tap_points),
        "layer_spec": "\n".join(extractor.layer_spec()),
    }
    checkpoint.write_container(path, checkpoint.EXTRACTOR_MAGIC, header, extractor.state_dict())


def load_extractor(path) -> ConvFeatureExtractor:
    header, tensors = checkpoint.read_container(path, checkpoint.EXTRACTOR_MAGIC)
    if header.get("kind") != ConvFeatureExtractor.kind:
        raise PersistenceError(f"{path}: unknown extractor kind {header.get('kind')!r}")
    extractor = ConvFeatureExtractor(**header["config"])
    if list(extractor.tap_points) != header.get("tap_points") or "\n".join(extractor.layer_spec()) != header.get("layer_spec"):
        raise PersistenceError(f"{path}: extractor layout does not match this version")
    checkpoint.load_state(extractor, tensors, path)
    return extractor.freeze()
