"""Procedural "blob face" images: the desk-scale stand-in for a face dataset.

Each image is a soft-edged ellipse (the face) on a flat background, with two
dark eyes and a mouth whose width and vertical offset vary. Edges are smoothed
with a logistic ramp so the data manifold is continuous.
"""

from __future__ import annotations

import numpy as np
import torch


def _soft_ellipse(yy, xx, cy, cx, ry, rx, sharpness):
    d = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
    return 1.0 / (1.0 + np.exp(sharpness * (d - 1.0)))


def blob_faces(n: int, size: int = 32, channels: int = 3, seed: int = 0) -> torch.Tensor:
    """``n`` images of shape ``(channels, size, size)`` with values in [-1, 1]."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / (size - 1)
    out = np.empty((n, 3, size, size), dtype=np.float64)
    for i in range(n):
        bg = rng.uniform(0.0, 0.45, 3)
        skin = np.array([rng.uniform(0.55, 1.0), rng.uniform(0.35, 0.8), rng.uniform(0.2, 0.6)])
        cy, cx = 0.5 + rng.uniform(-0.08, 0.08, 2)
        ry, rx = rng.uniform(0.28, 0.4), rng.uniform(0.22, 0.34)
        face = _soft_ellipse(yy, xx, cy, cx, ry, rx, 12.0)

        eye_dy = -0.3 * ry
        eye_dx = rng.uniform(0.35, 0.5) * rx
        eye_r = rng.uniform(0.05, 0.08)
        eyes = np.maximum(
            _soft_ellipse(yy, xx, cy + eye_dy, cx - eye_dx, eye_r, eye_r, 6.0),
            _soft_ellipse(yy, xx, cy + eye_dy, cx + eye_dx, eye_r, eye_r, 6.0),
        )
        mouth = _soft_ellipse(yy, xx, cy + rng.uniform(0.35, 0.5) * ry, cx,
                              rng.uniform(0.03, 0.07), rng.uniform(0.25, 0.6) * rx, 6.0)
        feature = np.clip(eyes + mouth, 0.0, 1.0) * face
        dark = np.array([0.1, 0.05, 0.05])

        img = bg[:, None, None] * (1 - face) + skin[:, None, None] * face
        img = img * (1 - feature) + dark[:, None, None] * feature
        out[i] = img

    if channels == 1:
        out = out.mean(axis=1, keepdims=True)
    return torch.from_numpy((out * 2.0 - 1.0).astype(np.float32))
