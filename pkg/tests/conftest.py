import os
import time
from pathlib import Path

import pytest
import torch

from ganinvert.encoder import (Encoder, EncoderTrainConfig, PairedDataset, build_generated_dataset, load_encoder,
                               save_encoder, train_alternating, train_on_generated)
from ganinvert.generator import GanTrainConfig, Generator, load_weights, save_weights, train_desk_gan
from ganinvert.latent import LatentPrior
from ganinvert.losses import ConvFeatureExtractor, LossWeights
from ganinvert.toy import blob_faces

torch.set_num_threads(1)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains desk-scale models (minutes)")
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.fixture
def tiny_gen():
    return Generator(latent_dim=8, image_shape=(16, 16, 3), channels=(16, 8), seed=3).eval()


@pytest.fixture
def tiny_extractor():
    return ConvFeatureExtractor(image_shape=(16, 16, 3), widths=(4, 8, 8), embedding_dim=8, seed=5)


class DeskWorld:
    """Desk-scale models shared by the slow tests, trained lazily once per session.

    Set GANINVERT_TEST_CACHE to a directory to keep checkpoints between runs.
    """

    image_shape = (32, 32, 3)
    n_pairs = 5000
    n_holdout = 200

    def __init__(self, root: Path):
        self.root = root
        self.prior = LatentPrior("standard_normal", 16)
        self.extractor = ConvFeatureExtractor(self.image_shape, seed=1234)
        self.timings = {}
        self._gen = None
        self._encoders = {}
        self._data = None
        self._holdout = None
        self.toy = None
        self.gan_log = None

    @property
    def gen(self):
        if self._gen is None:
            path = self.root / "generator.gckpt"
            self.toy = blob_faces(8192, seed=0)
            if path.exists():
                self._gen = load_weights(path)
            else:
                start = time.perf_counter()
                self._gen, _, self.gan_log = train_desk_gan(self.toy, GanTrainConfig(prior=self.prior), seed=0)
                self.timings["gan"] = time.perf_counter() - start
                save_weights(self._gen, path)
        return self._gen

    @property
    def data(self) -> PairedDataset:
        if self._data is None:
            self._data = build_generated_dataset(self.gen, self.prior, self.n_pairs, seed=0)
        return self._data

    @property
    def holdout(self) -> PairedDataset:
        if self._holdout is None:
            self._holdout = build_generated_dataset(self.gen, self.prior, self.n_holdout, seed=2)
        return self._holdout

    @property
    def real_train(self) -> torch.Tensor:
        return blob_faces(2048, seed=3)

    @property
    def real_holdout(self) -> torch.Tensor:
        return blob_faces(200, seed=99)

    def untrained_encoder(self) -> Encoder:
        return Encoder(self.prior.dim, self.image_shape, seed=0)

    def encoder(self, variant: str):
        """variant: 'pixel' (z-loss only), 'perceptual' (z + perceptual) or 'alternating'."""
        if variant in self._encoders:
            return self._encoders[variant]
        path = self.root / f"encoder-{variant}.eckpt"
        log = None
        if path.exists():
            enc = load_encoder(path)
        else:
            enc = self.untrained_encoder()
            start = time.perf_counter()
            if variant == "alternating":
                config = EncoderTrainConfig(regime="alternating")
                _, log = train_alternating(enc, self.gen, self.extractor, self.data, PairedDataset(self.real_train), config)
            else:
                weights = LossWeights(perceptual=0.0) if variant == "pixel" else LossWeights()
                config = EncoderTrainConfig(loss_weights=weights)
                _, log = train_on_generated(enc, self.gen, self.extractor, self.data, config)
            self.timings[f"encoder-{variant}"] = time.perf_counter() - start
            save_encoder(enc, path)
        self._encoders[variant] = enc
        self._encoders[f"{variant}-log"] = log
        return enc

    def encoder_log(self, variant: str):
        self.encoder(variant)
        return self._encoders[f"{variant}-log"]

    def path(self, name: str) -> Path:
        return self.root / name


@pytest.fixture(scope="session")
def world(tmp_path_factory):
    cache = os.environ.get("GANINVERT_TEST_CACHE")
    root = Path(cache) if cache else tmp_path_factory.mktemp("desk_world")
    root.mkdir(parents=True, exist_ok=True)
    return DeskWorld(root)


# -- acceptance reporting -------------------------------------------------------
_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    number, title = marker.args
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    if report.failed:
        reason = str(call.excinfo.value).splitlines()[0] if call.excinfo else "failed"
        detail = f"{detail}; {reason}" if detail else reason
    _CRITERIA[number] = (title, "PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2} {status}: {title} ({detail})")
