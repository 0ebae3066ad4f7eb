import pytest

from ganinvert.config import RunConfig, config_from_dict, load_config
from ganinvert.errors import ConfigurationError


def write(tmp_path, text):
    path = tmp_path / "run.yaml"
    path.write_text(text)
    return path


def test_defaults_validate():
    cfg = load_config(env={})
    assert cfg.seed == 0 and cfg.prior.dim == 16 and cfg.image_shape == (32, 32, 3)
    assert cfg.inversion_config().iterations == 200
    assert cfg.inversion_config().learning_rate == 0.01
    assert cfg.encoder_config().learning_rate == 2e-4
    assert cfg.benchmark.n_targets == 50


def test_yaml_sections_and_tuples(tmp_path):
    cfg = load_config(write(tmp_path, """
seed: 4
prior: {kind: uniform, dim: 8, bounds: [-2, 2]}
encoder: {head_widths: [32, 16], loss_weights: {perceptual: 0.5}}
inversion: {clip_mode: stochastic}
"""), env={})
    assert cfg.latent_prior().bounds == (-2.0, 2.0)
    assert cfg.encoder.head_widths == (32, 16)
    assert cfg.loss_weights().perceptual == 0.5 and cfg.loss_weights().z == 1.0
    assert cfg.inversion_config().clip_mode == "stochastic" and cfg.inversion_config().seed == 4


@pytest.mark.parametrize("text", [
    "sede: 1",
    "prior: {dimension: 4}",
    "encoder: {loss_weights: {style: 1}}",
    "prior: {dim: 'sixteen'}",
    "prior: {dim: 0}",
    "prior: {kind: laplace}",
    "inversion: {clip_mode: soft}",
    "encoder: {loss_weights: {pixel: 0, perceptual: 0, z: 0}}",
    "benchmark: {methods: [descent, magic]}",
    "gan: {ema_decay: 1.5}",
    "data: {channels: 2}",
    "- a list",
    "seed: [unbalanced",
])
def test_invalid_configs_rejected(tmp_path, text):
    with pytest.raises(ConfigurationError):
        load_config(write(tmp_path, text), env={})


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "absent.yaml", env={})


def test_seed_precedence(tmp_path):
    path = write(tmp_path, "seed: 3")
    assert load_config(path, env={}).seed == 3
    assert load_config(path, env={"GANINVERT_SEED": "11"}).seed == 11
    assert load_config(path, seed=5, env={"GANINVERT_SEED": "11"}).seed == 5
    with pytest.raises(ConfigurationError):
        load_config(path, env={"GANINVERT_SEED": "abc"})


def test_out_override_and_hash():
    a = load_config(out="x", env={})
    b = load_config(out="x", env={})
    assert a.out == "x" and a.config_hash() == b.config_hash()
    assert load_config(out="y", env={}).config_hash() == a.config_hash()
    assert config_from_dict({"seed": 1}).config_hash() != RunConfig().config_hash()
