"""Image-fidelity metrics used by the benchmark."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F

from .errors import NumericalError, ShapeError

PSNR_CAP_DB = 99.0


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """PSNR in dB of two [-1, 1] images after mapping them to [0, 1] (MAX = 1).

    Identical inputs return ``PSNR_CAP_DB``; values are capped there too.
    """
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    diff = (a.detach().double() - b.detach().double()) * 0.5
    mse = float(diff.pow(2).mean())
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


def embedding_distance(extractor, a: torch.Tensor, b: torch.Tensor) -> float:
    """Cosine distance ``1 - cos`` between the extractor embeddings of two images, in [0, 2].

    This is what the original benchmark table labels "FID"; it is a per-pair
    embedding distance, not a Frechet distance, hence the name here.
    """
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    with torch.no_grad():
        ea = extractor.embedding(a).double().flatten()
        eb = extractor.embedding(b).double().flatten()
    na, nb = float(ea.norm()), float(eb.norm())
    if na == 0.0 or nb == 0.0:
        raise NumericalError("zero-norm embedding in cosine distance")
    cos = float(torch.dot(ea, eb)) / (na * nb)
    return min(2.0, max(0.0, 1.0 - cos))
