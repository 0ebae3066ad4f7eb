"""Latent-space priors, sampling and the clipping operators used during descent.

Latent vectors are plain ``torch.Tensor`` objects: shape ``(dim,)`` for a
single vector or ``(n, dim)`` for a batch.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch

from .errors import ConfigurationError, PersistenceError, ShapeError

PRIOR_KINDS = ("uniform", "standard_normal")

_DEFAULT_BOUNDS = {"uniform": (-1.0, 1.0), "standard_normal": (-3.0, 3.0)}

ZVEC_MAGIC = b"ZVEC1"


@dataclass(frozen=True)
class LatentPrior:
    """Distribution latents are drawn from, plus the interval clipping projects onto.

    ``bounds`` defaults to [-1, 1] for uniform priors and [-3, 3] for
    standard-normal ones; pass ``bounds=(-1, 1)`` explicitly to clip a normal
    prior the way DCGAN-style inversion does.
    """

    kind: str = "standard_normal"
    dim: int = 16
    bounds: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if self.kind not in PRIOR_KINDS:
            raise ConfigurationError(f"unknown prior kind {self.kind!r}; expected one of {PRIOR_KINDS}")
        if not isinstance(self.dim, (int, np.integer)) or isinstance(self.dim, bool) or self.dim < 1:
            raise ConfigurationError(f"prior dim must be a positive integer, got {self.dim!r}")
        bounds = self.bounds if self.bounds is not None else _DEFAULT_BOUNDS[self.kind]
        lo, hi = (float(b) for b in bounds)
        if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
            raise ConfigurationError(f"invalid bounds [{lo}, {hi}]")
        object.__setattr__(self, "bounds", (lo, hi))
        object.__setattr__(self, "dim", int(self.dim))

    @property
    def prior_id(self) -> str:
        lo, hi = self.bounds
        return f"{self.kind}:{self.dim}:[{lo:g},{hi:g}]"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "dim": self.dim, "bounds": list(self.bounds)}


def check_latents(z: torch.Tensor, prior: LatentPrior) -> torch.Tensor:
    if z.shape[-1] != prior.dim or z.dim() not in (1, 2):
        raise ShapeError(f"latent shape {tuple(z.shape)} does not match prior dim {prior.dim}")
    if not torch.isfinite(z).all():
        raise ShapeError("latent contains non-finite values")
    return z


def _check_bounds(bounds) -> Tuple[float, float]:
    lo, hi = (float(b) for b in bounds)
    if not lo < hi:
        raise ConfigurationError(f"invalid bounds [{lo}, {hi}]")
    return lo, hi


def _open_uniform(shape, lo: float, hi: float, generator: torch.Generator, dtype) -> torch.Tensor:
    # torch.rand is [0, 1); redraw anything that lands on an endpoint after scaling.
    out = lo + (hi - lo) * torch.rand(shape, generator=generator, dtype=dtype)
    bad = (out <= lo) | (out >= hi)
    while bad.any():
        redraw = lo + (hi - lo) * torch.rand(int(bad.sum()), generator=generator, dtype=dtype)
        out[bad] = redraw
        bad = (out <= lo) | (out >= hi)
    return out


def sample_prior(
    prior: LatentPrior,
    n: int,
    seed: Optional[int] = None,
    generator: Optional[torch.Generator] = None,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Draw ``n`` i.i.d. latents, shape ``(n, prior.dim)``.

    Exactly one of ``seed`` / ``generator`` should be given; a seed builds a
    fresh generator so equal seeds give bitwise-equal batches.
    """
    if n < 0:
        raise ConfigurationError(f"sample count must be >= 0, got {n}")
    if generator is None:
        generator = torch.Generator().manual_seed(0 if seed is None else int(seed))
    if prior.kind == "uniform":
        lo, hi = prior.bounds
        return lo + (hi - lo) * torch.rand((n, prior.dim), generator=generator, dtype=dtype)
    return torch.randn((n, prior.dim), generator=generator, dtype=dtype)


def stochastic_clip(z: torch.Tensor, bounds, generator: torch.Generator) -> torch.Tensor:
    """Replace every coordinate outside ``bounds`` with a fresh draw from the open interval.

    In-range coordinates (endpoints included) are returned untouched.
    """
    lo, hi = _check_bounds(bounds)
    out = z.detach().clone()
    outside = (out < lo) | (out > hi)
    count = int(outside.sum())
    if count:
        out[outside] = _open_uniform(count, lo, hi, generator, out.dtype)
    return out


def hard_clip(z: torch.Tensor, bounds) -> torch.Tensor:
    lo, hi = _check_bounds(bounds)
    return z.detach().clamp(lo, hi)


def save_latents(path, z: torch.Tensor) -> None:
    """Write a ``(count, dim)`` batch as a ZVEC1 file (little-endian)."""
    z = torch.as_tensor(z)
    if z.dim() == 1:
        z = z[None]
    if z.dim() != 2:
        raise ShapeError(f"expected a (count, dim) batch, got {tuple(z.shape)}")
    count, dim = z.shape
    body = np.ascontiguousarray(z.detach().cpu().numpy(), dtype="<f4").tobytes()
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(ZVEC_MAGIC)
        fh.write(struct.pack("<iq", dim, count))
        fh.write(body)
    os.replace(tmp, path)


def load_latents(path) -> torch.Tensor:
    with open(path, "rb") as fh:
        data = fh.read()
    head = len(ZVEC_MAGIC) + struct.calcsize("<iq")
    if len(data) < head or not data.startswith(ZVEC_MAGIC):
        raise PersistenceError(f"{path}: not a ZVEC1 file")
    dim, count = struct.unpack_from("<iq", data, len(ZVEC_MAGIC))
    if dim < 1 or count < 0 or len(data) - head != 4 * dim * count:
        raise PersistenceError(f"{path}: truncated or corrupt ZVEC1 body")
    arr = np.frombuffer(data, dtype="<f4", offset=head).reshape(count, dim)
    return torch.from_numpy(arr.astype(np.float32))
