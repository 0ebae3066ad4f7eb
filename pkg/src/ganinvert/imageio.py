"""Raster I/O: directory ingestion, resizing and comparison grids (PNG via Pillow)."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .errors import ConfigurationError, ShapeError

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp", ".ppm", ".pgm"}


def to_uint8(image: torch.Tensor) -> np.ndarray:
    """``(C, H, W)`` in [-1, 1] -> ``(H, W, C)`` uint8."""
    arr = ((image.detach().cpu().double().numpy() + 1.0) * 0.5 * 255.0).round()
    return np.clip(arr, 0, 255).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(arr: np.ndarray) -> torch.Tensor:
    """``(H, W, C)`` uint8 -> ``(C, H, W)`` float32 in [-1, 1]."""
    return torch.from_numpy(arr.astype(np.float32).transpose(2, 0, 1) / 255.0 * 2.0 - 1.0)


def resize_batch(images: torch.Tensor, image_shape) -> torch.Tensor:
    h, w, c = (int(s) for s in image_shape)
    if images.shape[1] != c:
        if images.shape[1] == 3 and c == 1:
            images = images.mean(dim=1, keepdim=True)
        elif images.shape[1] == 1 and c == 3:
            images = images.expand(-1, 3, -1, -1)
        else:
            raise ShapeError(f"cannot map {images.shape[1]} channels to {c}")
    if tuple(images.shape[2:]) != (h, w):
        images = F.interpolate(images, size=(h, w), mode="bilinear", align_corners=False, antialias=True)
    return images.clamp(-1.0, 1.0).contiguous()


@dataclass
class IngestedImages:
    images: torch.Tensor
    filenames: List[str]
    skipped: List[str] = field(default_factory=list)

    def __len__(self):
        return len(self.images)


def ingest_image_dir(path, target_shape) -> IngestedImages:
    """Decode every image file in ``path`` (sorted by name), resize and map to [-1, 1].

    Unreadable files are skipped with a warning and listed in ``skipped``. An
    empty result raises :class:`ConfigurationError`.
    """
    h, w, c = (int(s) for s in target_shape)
    root = Path(path)
    if not root.is_dir():
        raise ConfigurationError(f"{root}: not a directory")
    images, names, skipped = [], [], []
    for entry in sorted(root.iterdir(), key=lambda p: p.name):
        if not entry.is_file() or entry.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        try:
            with Image.open(entry) as im:
                im = im.convert("RGB" if c == 3 else "L").resize((w, h), Image.BILINEAR)
                arr = np.asarray(im)
        except (UnidentifiedImageError, OSError, ValueError) as exc:
            logger.warning("skipping unreadable image %s: %s", entry, exc)
            skipped.append(entry.name)
            continue
        if arr.ndim == 2:
            arr = arr[:, :, None]
        images.append(from_uint8(arr))
        names.append(entry.name)
    if skipped:
        logger.warning("%d of %d image files in %s were unreadable", len(skipped), len(skipped) + len(names), root)
    if not images:
        raise ConfigurationError(f"{root}: no readable images")
    return IngestedImages(torch.stack(images), names, skipped)


def emit_image_grid(columns: Mapping[str, Sequence[torch.Tensor]], path, separator: int = 2,
                    fill: int = 255) -> Path:
    """Write one PNG with a column per method and a row per target.

    Cells are separated (and bordered) by ``separator`` pixels of ``fill``.
    """
    cols = [list(v) for v in columns.values()]
    if not cols or not cols[0]:
        raise ConfigurationError("image grid needs at least one column with one image")
    rows = len(cols[0])
    if any(len(col) != rows for col in cols):
        raise ShapeError("all grid columns must have the same length")
    shape = tuple(cols[0][0].shape)
    if any(tuple(img.shape) != shape for col in cols for img in col):
        raise ShapeError("all grid images must share one shape")
    c, h, w = shape
    s = separator
    canvas = np.full((rows * h + (rows + 1) * s, len(cols) * w + (len(cols) + 1) * s, c), fill, dtype=np.uint8)
    for j, col in enumerate(cols):
        for i, img in enumerate(col):
            y, x = s + i * (h + s), s + j * (w + s)
            canvas[y : y + h, x : x + w] = to_uint8(img)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        Image.fromarray(canvas[:, :, 0] if c == 1 else canvas).save(tmp, format="PNG")
        os.replace(tmp, path)
    except OSError as exc:
        if tmp.exists():
            tmp.unlink()
        raise OSError(f"{path}: cannot write image grid ({exc})") from exc
    return path
