import random

import numpy as np
import pytest
import torch
import torch.nn as nn

from ganinvert.errors import ConfigurationError, NumericalError, ShapeError
from ganinvert.losses import (FeatureExtractor, LossWeights, combine, perceptual_loss, pixel_l2, pixel_mae, z_loss)


def _pair(seed=0, shape=(2, 3, 8, 8)):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(shape, generator=g) * 2 - 1, torch.rand(shape, generator=g) * 2 - 1


def test_pixel_mae_examples():
    a = torch.rand(3, 8, 8) * 0.5
    assert pixel_mae(a, a) == 0
    assert pixel_mae(a, a + 0.5).item() == pytest.approx(0.5, abs=1e-7)


def test_pixel_l2_examples():
    a = torch.rand(3, 8, 8) * 0.5
    assert pixel_l2(a, a) == 0
    assert pixel_l2(a.double(), a.double() + 0.1).item() == pytest.approx(0.01, abs=1e-12)


def test_z_loss_examples():
    z = torch.randn(16)
    assert z_loss(z, z) == 0
    assert z_loss(z.double() + 1, z.double()).item() == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_losses_match_brute_force(seed):
    a, b = _pair(seed)
    xs, ys = a.double().flatten().tolist(), b.double().flatten().tolist()
    n = len(xs)
    mae = sum(abs(x - y) for x, y in zip(xs, ys)) / n
    l2 = sum((x - y) ** 2 for x, y in zip(xs, ys)) / n
    assert pixel_mae(a.double(), b.double()).item() == pytest.approx(mae, rel=1e-12)
    assert pixel_l2(a.double(), b.double()).item() == pytest.approx(l2, rel=1e-12)
    assert z_loss(a.double().flatten(), b.double().flatten()).item() == pytest.approx(mae, rel=1e-12)


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        pixel_mae(torch.zeros(3, 4, 4), torch.zeros(3, 4, 5))
    with pytest.raises(ShapeError):
        z_loss(torch.zeros(3), torch.zeros(4))


def test_symmetry_and_scaling():
    a, b = _pair(4)
    a, b = a.double(), b.double()
    assert pixel_mae(a, b) == pixel_mae(b, a)
    assert pixel_l2(a, b) == pixel_l2(b, a)
    d = b - a
    for k in (0.25, 0.5, 1.0):
        assert pixel_mae(a, a + k * d).item() == pytest.approx(k * pixel_mae(a, b).item(), rel=1e-12)
        assert pixel_l2(a, a + k * d).item() == pytest.approx(k * k * pixel_l2(a, b).item(), rel=1e-12)


class PlantedExtractor(FeatureExtractor):
    """Each tap is a copy of the flattened input, scaled by a fixed factor."""

    def __init__(self, scales):
        super().__init__()
        self.scales = scales
        self.tap_points = tuple(f"t{i}" for i in range(len(scales)))
        self.embedding_dim = 2

    def forward(self, x):
        flat = x.flatten(1)
        return [s * flat for s in self.scales], flat[:, :2]


def test_perceptual_identical_is_zero(tiny_extractor):
    a, _ = _pair(0, (2, 3, 16, 16))
    assert perceptual_loss(tiny_extractor, a, a).item() == 0.0


def test_perceptual_single_tap_is_plain_mse():
    ext = PlantedExtractor([1.0])
    a, b = _pair(1)
    assert perceptual_loss(ext, a, b).item() == pytest.approx(((a - b) ** 2).mean().item(), rel=1e-6)


def test_perceptual_planted_layer_mses():
    # difference of 1 everywhere; tap scales sqrt(0.1), sqrt(0.2), sqrt(0.3) give per-layer MSEs 0.1, 0.2, 0.3
    ext = PlantedExtractor([np.sqrt(0.1), np.sqrt(0.2), np.sqrt(0.3)])
    a = torch.zeros(1, 1, 4, 4, dtype=torch.float64)
    b = torch.ones_like(a)
    assert perceptual_loss(ext, a, b).item() == pytest.approx(0.2, abs=1e-12)


def test_perceptual_symmetric(tiny_extractor):
    a, b = _pair(2, (2, 3, 16, 16))
    assert perceptual_loss(tiny_extractor, a, b) == perceptual_loss(tiny_extractor, b, a)


def test_perceptual_shape_checks(tiny_extractor):
    with pytest.raises(ShapeError):
        perceptual_loss(tiny_extractor, torch.zeros(3, 16, 16), torch.zeros(3, 16, 8))
    with pytest.raises(ShapeError):
        perceptual_loss(tiny_extractor, torch.zeros(3, 8, 8), torch.zeros(3, 8, 8))


def test_perceptual_finite_difference_gradient(tiny_extractor):
    ext = tiny_extractor.double()
    a, b = _pair(3, (3, 16, 16))
    a, b = a.double().requires_grad_(True), b.double()
    (grad,) = torch.autograd.grad(perceptual_loss(ext, a, b), a)
    rng = np.random.default_rng(0)
    h = 1e-5
    for flat in rng.choice(a.numel(), 10, replace=False):
        e = torch.zeros_like(a).flatten()
        e[flat] = h
        e = e.view_as(a)
        with torch.no_grad():
            fd = (perceptual_loss(ext, a + e, b) - perceptual_loss(ext, a - e, b)).item() / (2 * h)
        g = grad.flatten()[flat].item()
        assert abs(g - fd) <= 1e-3 * max(abs(fd), 1e-6)


def test_extractor_features_contract(tiny_extractor):
    taps, emb = tiny_extractor.features(torch.zeros(3, 16, 16))
    assert len(taps) == len(tiny_extractor.tap_points) == 3
    assert emb.shape == (8,)
    assert all(not p.requires_grad for p in tiny_extractor.parameters())


def test_combine_examples():
    assert combine({"pixel": 1.0}, LossWeights(1, 0, 0)) == 1.0
    assert combine({"pixel": 1.0, "perceptual": 2.0}, LossWeights(1, 1, 0)) == 3.0


def test_combine_dot_product_oracle():
    rnd = random.Random(0)
    for _ in range(50):
        vals = {k: rnd.uniform(0, 5) for k in ("pixel", "perceptual", "z")}
        w = LossWeights(rnd.uniform(0.1, 2), rnd.uniform(0, 2), rnd.uniform(0, 2))
        expected = vals["pixel"] * w.pixel + vals["perceptual"] * w.perceptual + vals["z"] * w.z
        assert combine(vals, w) == pytest.approx(expected, rel=1e-12)


def test_combine_skips_zero_weight_terms():
    calls = []

    def expensive():
        calls.append(1)
        return torch.tensor(1.0)

    assert combine({"pixel": 2.0, "perceptual": expensive}, LossWeights(1, 0, 0)) == 2.0
    assert calls == []
    assert combine({"perceptual": expensive}, LossWeights(1, 1, 0)).item() == 1.0
    assert calls == [1]


def test_combine_rejects_non_finite_and_unknown():
    with pytest.raises(NumericalError):
        combine({"pixel": float("nan")}, LossWeights())
    with pytest.raises(ConfigurationError):
        combine({"style": 1.0}, LossWeights())


@pytest.mark.parametrize("w", [(-1, 1, 1), (0, 0, 0), (float("inf"), 1, 1)])
def test_invalid_weights(w):
    with pytest.raises(ConfigurationError):
        LossWeights(*w)


def test_extractor_is_not_trainable():
    ext = PlantedExtractor([1.0])
    ext.extra = nn.Linear(2, 2)
    ext.freeze()
    assert not any(p.requires_grad for p in ext.parameters())
